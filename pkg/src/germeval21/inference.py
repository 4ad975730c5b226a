"""Prediction, run selection, and submission export.

Predictions carry both the sigmoid probability and the hard {0,1} decision per
subtask; a probability at or above the threshold is positive (the boundary
counts as positive). Submission files use the shared-task exchange header
`comment_id,Sub1_Toxic,Sub2_Engaging,Sub3_FactClaiming` and round-trip through
the corpus loader.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import LabeledDataset
from .errors import ConfigurationError, ValidationError
from .metrics import SUBTASKS
from .tracking import RunRecord, RunStore, compare_runs
from .training import DECISION_THRESHOLD, FittedModel

SUBMISSION_COLUMNS = {
    "toxic": "Sub1_Toxic",
    "engaging": "Sub2_Engaging",
    "fact_claiming": "Sub3_FactClaiming",
}


@dataclass
class PredictionSet:
    """Per-comment probabilities and decisions, in input order."""

    order: tuple[str, ...]
    probabilities: dict[str, dict[str, float]] = field(default_factory=dict)
    decisions: dict[str, dict[str, int]] = field(default_factory=dict)
    provenance: tuple[str, ...] = ()
    threshold: float = DECISION_THRESHOLD

    def decision(self, comment_id: str, subtask: str) -> int | None:
        return self.decisions.get(comment_id, {}).get(subtask)

    def to_payload(self) -> dict:
        return {
            "order": list(self.order),
            "probabilities": self.probabilities,
            "decisions": self.decisions,
            "provenance": list(self.provenance),
            "threshold": self.threshold,
        }

    @staticmethod
    def from_payload(payload: dict) -> "PredictionSet":
        return PredictionSet(
            order=tuple(payload["order"]),
            probabilities={
                cid: {k: float(v) for k, v in probs.items()}
                for cid, probs in payload["probabilities"].items()
            },
            decisions={
                cid: {k: int(v) for k, v in dec.items()}
                for cid, dec in payload["decisions"].items()
            },
            provenance=tuple(payload.get("provenance", [])),
            threshold=float(payload.get("threshold", DECISION_THRESHOLD)),
        )


def predict(
    models: FittedModel | Mapping[str, FittedModel],
    comments: LabeledDataset | Sequence,
    threshold: float = DECISION_THRESHOLD,
) -> PredictionSet:
    """Probabilities and decisions for every comment.

    `models` is either one joint multi-label model or a {subtask: model}
    mapping covering all three subtasks. Deterministic for fixed weights.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold must be in (0, 1), got {threshold}")

    entries = list(comments)
    comment_list = [e[0] if isinstance(e, tuple) else e for e in entries]
    ids = [c.id for c in comment_list]
    texts = [c.text for c in comment_list]

    per_subtask_probs: dict[str, list[float]] = {}
    provenance: list[str] = []
    if isinstance(models, FittedModel):
        missing = [s for s in SUBTASKS if s not in models.labels]
        if missing:
            raise ConfigurationError(
                f"joint model covers {models.labels}, missing {missing}"
            )
        probs = models.predict_proba(texts)
        for j, label in enumerate(models.labels):
            per_subtask_probs[label] = [float(p) for p in probs[:, j]]
        if models.run_id:
            provenance.append(models.run_id)
    else:
        missing = [s for s in SUBTASKS if s not in models]
        if missing:
            raise ConfigurationError(f"no model supplied for subtask(s) {missing}")
        for subtask in SUBTASKS:
            model = models[subtask]
            if subtask not in model.labels:
                raise ConfigurationError(
                    f"model for {subtask!r} was trained on {model.labels}"
                )
            j = model.labels.index(subtask)
            probs = model.predict_proba(texts)
            per_subtask_probs[subtask] = [float(p) for p in probs[:, j]]
            if model.run_id:
                provenance.append(model.run_id)

    probabilities = {
        cid: {s: per_subtask_probs[s][i] for s in SUBTASKS}
        for i, cid in enumerate(ids)
    }
    decisions = {
        cid: {s: int(p >= threshold) for s, p in probs.items()}
        for cid, probs in probabilities.items()
    }
    return PredictionSet(
        order=tuple(ids),
        probabilities=probabilities,
        decisions=decisions,
        provenance=tuple(provenance),
        threshold=threshold,
    )


def select_top_runs(store: RunStore, metric: str = "macro", k: int = 1) -> list[RunRecord]:
    """The k best runs by best validation F1; ties go to the earlier start.

    Returns fewer than k when the store is small; runs without the metric
    (e.g. full-data runs) are skipped. The result is a prefix of the
    compare_runs ordering restricted to scored runs.
    """
    if k < 1:
        raise ValidationError("k must be >= 1")
    rows = [r for r in compare_runs(store, metric=metric) if r.sort_metric is not None]
    records = store.load()
    return [records[r.run_id] for r in rows[:k]]


def export_submission(
    predictions: PredictionSet, path: str | Path, fmt: str = "csv"
) -> Path:
    """Write hard decisions in the shared-task exchange format.

    Rows follow the prediction set's input order; every comment must carry a
    decision for all three subtasks. Deterministic: equal prediction sets
    produce byte-identical files.
    """
    if fmt not in ("csv", "tsv"):
        raise ConfigurationError(f"unknown submission format {fmt!r}")
    delimiter = "," if fmt == "csv" else "\t"
    for cid in predictions.order:
        have = predictions.decisions.get(cid, {})
        missing = [s for s in SUBTASKS if s not in have]
        if missing:
            raise ValidationError(
                f"comment {cid!r} lacks decisions for subtask(s) {missing}"
            )
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["comment_id", *SUBMISSION_COLUMNS.values()])
        for cid in predictions.order:
            row = [cid]
            row.extend(str(predictions.decisions[cid][s]) for s in SUBTASKS)
            writer.writerow(row)
    return path
