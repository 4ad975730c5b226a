"""Fine-tuning loop: binary cross-entropy on sigmoid outputs, per-epoch validation.

Two training modes: `per_subtask` trains one model for one named label,
`joint_multilabel` trains one model emitting all three logits. Entries whose
target label is unknown never enter the loss; they are dropped (per-subtask)
or masked out (joint) with a counted warning.

Determinism: every source of randomness (backbone init, batch order, dropout)
derives from the config seed, so two fp32 runs with identical config produce
identical epoch-loss sequences on the same backend.

fp16 runs cast parameters to float16 for forward/backward compute only;
optimizer state and master weights stay float32, with a static loss scale
(`FP16_LOSS_SCALE`) applied to the backward pass to keep small gradients
from flushing to zero.
"""

from __future__ import annotations

import logging
import uuid
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import backbones as bb
from .backbones import BackboneSpec, ClassifierHead, LoadedBackbone, load_backbone
from .corpus import Label, LabeledDataset, SplitResult
from .errors import ConfigurationError, RunFailure, ValidationError
from .metrics import SUBTASKS, MetricsReport, report_from_pairs
from .textprep import TinyTokenizer, load_tokenizer, normalize, pad_batch, default_max_len
from .tracking import (
    EpochMetrics,
    RunRecord,
    RunStore,
    STATUS_COMPLETED,
    STATUS_DIVERGED,
    STATUS_PARTIAL,
)

logger = logging.getLogger(__name__)

# Probability at or above the threshold counts as positive; the boundary is
# positive by convention. Inference reuses this default.
DECISION_THRESHOLD = 0.5

BACKEND_SUPPORTS_FP16 = True
FP16_LOSS_SCALE = 1024.0

OPTIMIZERS = ("adamw", "adafactor")
PRECISIONS = ("fp32", "fp16")
MODES = ("per_subtask", "joint_multilabel")

# The sweeps in this harness walk a plain grid; these are the defaults.
DEFAULT_SWEEP_LEARNING_RATES = (1e-5, 2e-5, 5e-5)
DEFAULT_SWEEP_EPOCHS = (2, 3, 4)
DEFAULT_BATCH_SIZE = 16


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-5
    epochs: int = 3
    batch_size: int = DEFAULT_BATCH_SIZE
    optimizer: str = "adamw"
    precision: str = "fp32"
    seed: int = 42
    mode: str = "per_subtask"
    target_label: str | None = "toxic"
    max_len: int | None = None
    weight_decay: float = 0.01

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"unknown precision {self.precision!r}")
        if self.precision == "fp16" and not BACKEND_SUPPORTS_FP16:
            raise ConfigurationError("fp16 requested but the compute backend lacks it")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}")
        if self.mode == "per_subtask":
            if self.target_label not in SUBTASKS:
                raise ConfigurationError(
                    f"per_subtask mode needs a target label from {SUBTASKS}"
                )
        elif self.target_label is not None:
            raise ConfigurationError("joint_multilabel mode takes no target label")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def labels(self) -> tuple[str, ...]:
        return (self.target_label,) if self.mode == "per_subtask" else SUBTASKS


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(
    logits: np.ndarray, targets: np.ndarray, weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Masked mean binary cross-entropy; returns (loss, d loss / d logits).

    Reductions run in float64 regardless of compute precision, computed in the
    overflow-free form max(z,0) - z*y + log1p(exp(-|z|)). With all-zero logits
    the loss is exactly ln 2 per evaluated pair.
    """
    z = logits.astype(np.float64)
    y = targets.astype(np.float64)
    w = weights.astype(np.float64)
    total = w.sum()
    if total == 0:
        raise ValidationError("no known labels in batch; nothing to train on")
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float((per * w).sum() / total)
    dz = (sigmoid(z) - y) * w / total
    return loss, dz


class AdamW:
    """Decoupled weight decay Adam; decay applies to matrices only."""

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if p.ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * p
            p -= self.lr * update


class Adafactor:
    """Factored second-moment optimizer (simplified: explicit lr, no momentum).

    Matrices keep row/column mean accumulators instead of a full second
    moment; updates are RMS-clipped at 1.0.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float,
                 eps: float = 1e-30, weight_decay: float = 0.01):
        self.lr = lr
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.row: dict[str, np.ndarray] = {}
        self.col: dict[str, np.ndarray] = {}
        self.full: dict[str, np.ndarray] = {}
        for k, v in params.items():
            if v.ndim == 2:
                self.row[k] = np.zeros(v.shape[0], dtype=np.float32)
                self.col[k] = np.zeros(v.shape[1], dtype=np.float32)
            else:
                self.full[k] = np.zeros_like(v)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        beta2t = 1.0 - self.t ** -0.8
        for k, p in params.items():
            g = grads[k]
            g2 = g * g + self.eps
            if p.ndim == 2:
                self.row[k] = beta2t * self.row[k] + (1.0 - beta2t) * g2.mean(axis=1)
                self.col[k] = beta2t * self.col[k] + (1.0 - beta2t) * g2.mean(axis=0)
                denom = np.sqrt(
                    np.outer(self.row[k], self.col[k]) / max(self.row[k].mean(), self.eps)
                )
            else:
                self.full[k] = beta2t * self.full[k] + (1.0 - beta2t) * g2
                denom = np.sqrt(self.full[k])
            update = g / np.maximum(denom, self.eps)
            rms = float(np.sqrt(np.mean(update**2)))
            if rms > 1.0:
                update = update / rms
            if p.ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * p
            p -= self.lr * update


def make_optimizer(config: TrainConfig, params: dict[str, np.ndarray]):
    if config.optimizer == "adamw":
        return AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return Adafactor(params, lr=config.learning_rate, weight_decay=config.weight_decay)


@dataclass
class FittedModel:
    """Backbone + head bound to a tokenizer and label set, ready for inference."""

    spec: BackboneSpec
    backbone: LoadedBackbone
    head: ClassifierHead
    labels: tuple[str, ...]
    max_len: int
    tokenizer: TinyTokenizer
    run_id: str | None = None

    def encode(self, texts: Sequence[str]) -> list:
        return [
            self.tokenizer.encode(normalize(t, self.spec.casing), self.max_len)
            for t in texts
        ]

    def predict_proba(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        """Sigmoid probabilities, shape (len(texts), len(labels)), float64."""
        seqs = self.encode(texts)
        chunks = []
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, mask = pad_batch(chunk, pad_id=self.tokenizer.pad_id)
            logits = bb.forward(self.backbone, self.head, (ids, mask))
            chunks.append(sigmoid(np.asarray(logits)))
        if not chunks:
            return np.zeros((0, len(self.labels)))
        return np.vstack(chunks)


def _prepare(
    dataset: LabeledDataset,
    labels: tuple[str, ...],
    tokenizer: TinyTokenizer,
    casing,
    max_len: int,
    drop_fully_unknown: bool,
) -> tuple[list, np.ndarray, np.ndarray, int]:
    """Tokenize a dataset; returns (sequences, targets, weights, n_excluded)."""
    seqs, targets, weights = [], [], []
    excluded = 0
    for comment, labelset in dataset:
        known = [labelset.get(lbl).known for lbl in labels]
        if drop_fully_unknown and not any(known):
            excluded += 1
            continue
        seqs.append(tokenizer.encode(normalize(comment.text, casing), max_len))
        targets.append([labelset.get(l).bit if k else 0 for l, k in zip(labels, known)])
        weights.append([1.0 if k else 0.0 for k in known])
    return (
        seqs,
        np.asarray(targets, dtype=np.float64).reshape(len(seqs), len(labels)),
        np.asarray(weights, dtype=np.float64).reshape(len(seqs), len(labels)),
        excluded,
    )


def evaluate(model: FittedModel, dataset: LabeledDataset) -> MetricsReport:
    """Metrics over entries whose gold value is known, per label."""
    texts = [c.text for c, _ in dataset]
    probs = model.predict_proba(texts) if texts else np.zeros((0, len(model.labels)))
    pairs: dict[str, tuple[list[int], list[int]]] = {}
    for j, label in enumerate(model.labels):
        preds, golds = [], []
        for i, (_, labelset) in enumerate(dataset):
            gold = labelset.get(label)
            if not gold.known:
                continue
            preds.append(1 if probs[i, j] >= DECISION_THRESHOLD else 0)
            golds.append(gold.bit)
        pairs[label] = (preds, golds)
    return report_from_pairs(pairs)


def _new_run_id(spec: BackboneSpec, config: TrainConfig) -> str:
    tag = config.target_label if config.mode == "per_subtask" else "joint"
    return f"{spec.name}-{tag}-s{config.seed}-{uuid.uuid4().hex[:8]}"


def _train_loop(
    train_set: LabeledDataset,
    validation_set: LabeledDataset | None,
    spec: BackboneSpec,
    config: TrainConfig,
    tracker: RunStore,
    run_id: str | None,
    split_manifest_ref: str | None,
) -> tuple[FittedModel, RunRecord]:
    config.validate()
    max_len = config.max_len or default_max_len(spec)
    if max_len > spec.max_positions:
        raise ConfigurationError(
            f"max_len {max_len} exceeds {spec.name}'s {spec.max_positions} positions"
        )

    backbone = load_backbone(spec, seed=config.seed)
    tokenizer = load_tokenizer(spec.vocab_source)
    labels = config.labels()
    head = ClassifierHead(input_dim=backbone.hidden_size, num_labels=len(labels))
    model = FittedModel(
        spec=spec, backbone=backbone, head=head, labels=labels,
        max_len=max_len, tokenizer=tokenizer,
    )

    seqs, targets, weights, excluded = _prepare(
        train_set, labels, tokenizer, spec.casing, max_len, drop_fully_unknown=True
    )
    if not seqs:
        raise ValidationError("no trainable entries: every target label is unknown")
    if excluded:
        logger.warning("excluded %d entries with unknown target label(s)", excluded)

    run_id = run_id or _new_run_id(spec, config)
    tracker.create_run(
        run_id,
        backbone=spec.name,
        config=config.to_dict(),
        split_manifest=split_manifest_ref,
        notes={"excluded_unknown": excluded, "labels": list(labels)},
    )
    model.run_id = run_id

    params = {**backbone.params, **head.params()}
    optimizer = make_optimizer(config, params)
    seed64 = config.seed & 0xFFFF_FFFF_FFFF_FFFF
    order_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed64, 1])))
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed64, 2])))
    fp16 = config.precision == "fp16"
    compute_dtype = np.float16 if fp16 else np.float32
    loss_scale = FP16_LOSS_SCALE if fp16 else 1.0

    n = len(seqs)
    try:
        for epoch in range(1, config.epochs + 1):
            order = order_rng.permutation(n)
            loss_sum = 0.0
            pair_count = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start : start + config.batch_size]
                batch = [seqs[i] for i in idx]
                ids, mask = pad_batch(batch, pad_id=tokenizer.pad_id)
                logits, cache = bb.forward(
                    backbone, head, (ids, mask),
                    train=True, rng=dropout_rng,
                    compute_dtype=compute_dtype, with_cache=True,
                )
                loss, dz = bce_with_logits(logits, targets[idx], weights[idx])
                if not np.isfinite(loss):
                    tracker.finish_run(run_id, STATUS_DIVERGED)
                    raise RunFailure(
                        f"run {run_id}: non-finite loss at epoch {epoch}; aborted"
                    )
                grads = bb.backward((dz * loss_scale).astype(compute_dtype), cache)
                grads32 = {
                    k: (g.astype(np.float32) / loss_scale if fp16 else g)
                    for k, g in grads.items()
                }
                optimizer.step(params, grads32)
                batch_pairs = float(weights[idx].sum())
                loss_sum += loss * batch_pairs
                pair_count += batch_pairs
            train_loss = loss_sum / pair_count
            report = evaluate(model, validation_set) if validation_set is not None else None
            tracker.append_epoch(run_id, EpochMetrics(epoch, train_loss, report))
    except KeyboardInterrupt:
        tracker.finish_run(run_id, STATUS_PARTIAL)
        raise

    tracker.finish_run(run_id, STATUS_COMPLETED)
    record = tracker.load()[run_id]
    return model, record


def fine_tune(
    split: SplitResult,
    spec: BackboneSpec,
    config: TrainConfig,
    tracker: RunStore,
    run_id: str | None = None,
    split_manifest_ref: str | None = None,
) -> tuple[FittedModel, RunRecord]:
    """Fine-tune on the train partition, evaluating on validation each epoch."""
    if len(split.train) < 1 or len(split.validation) < 1:
        raise ValidationError("split has an empty partition")
    if split_manifest_ref is None:
        split_manifest_ref = f"seed={split.seed} ratio={split.ratio}"
    return _train_loop(
        split.train, split.validation, spec, config, tracker, run_id, split_manifest_ref
    )


def train_on_full_data(
    dataset: LabeledDataset,
    spec: BackboneSpec,
    config: TrainConfig,
    tracker: RunStore,
    run_id: str | None = None,
) -> FittedModel:
    """Train on every labeled entry with no validation pass (submission models)."""
    model, _ = _train_loop(dataset, None, spec, config, tracker, run_id, None)
    return model


def detect_overfitting(
    history: Sequence[EpochMetrics] | Sequence[float], patience: int
) -> tuple[bool, int]:
    """Flag a terminal strict decline of validation F1.

    Returns (flag, best_epoch). The flag is set exactly when the last
    `patience` transitions each decreased strictly; best_epoch is the
    1-based argmax of validation F1, earliest on ties. Pure function.
    """
    if patience < 1:
        raise ValidationError("patience must be >= 1")
    if len(history) == 0:
        raise ValidationError("history must be non-empty")
    f1s: list[float] = []
    for item in history:
        if isinstance(item, EpochMetrics):
            if item.validation is None:
                raise ValidationError(
                    f"epoch {item.epoch} has no validation report; cannot assess overfitting"
                )
            f1s.append(item.validation.macro_f1)
        else:
            f1s.append(float(item))
    best_epoch = int(np.argmax(f1s)) + 1  # argmax returns the earliest maximum
    flag = len(f1s) > patience and all(
        f1s[-i] < f1s[-i - 1] for i in range(1, patience + 1)
    )
    return flag, best_epoch


def grid_configs(
    base: TrainConfig,
    learning_rates: Sequence[float] = DEFAULT_SWEEP_LEARNING_RATES,
    epoch_counts: Sequence[int] = DEFAULT_SWEEP_EPOCHS,
) -> list[TrainConfig]:
    """The cartesian sweep grid; one config per (learning rate, epochs) pair."""
    return [
        replace(base, learning_rate=lr, epochs=ep)
        for lr in learning_rates
        for ep in epoch_counts
    ]
