"""Backbone registry, weight loading, and the classification forward pass.

A BackboneSpec is declarative: it names a pre-trained model, its casing and
pooling rules, and where its weights live. Weight loading goes through an
adapter registry keyed by locator scheme so that multi-GB third-party weights
stay optional; the built-in `tiny_test` backbone (random init, 2 layers,
hidden size 32) is always available and carries the whole test suite.

Locator grammar: "scheme:rest[#sha256=<hex>]". Shipped schemes:
  builtin:random          random tiny network, no I/O
  file:<path>             .npz archive written by `save_backbone`
Hub locators ("hf:...") are declarative only; loading them requires
registering an adapter.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .nets import (
    NetConfig,
    backward as net_backward,
    cast_params,
    forward as net_forward,
    init_params,
    pool_backward,
    pool_forward,
)
from .textprep import NormalizationPolicy, TinyTokenizer, TokenSequence, pad_batch, parse_locator

MB = 10**6
GB = 10**9

FAMILIES = ("bert_like", "electra_like", "gpt2_like", "tiny_test")
POOLING_RULES = ("cls_token", "last_nonpad_token", "mean")
HEAD_DROPOUT = 0.1


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    family: str
    max_positions: int
    weight_source: str
    approx_binary_size: int
    casing: NormalizationPolicy = NormalizationPolicy.IDENTITY
    pooling: str | None = None
    vocab_source: str = "builtin:tiny"
    hidden_size: int | None = None
    num_heads: int | None = None
    num_layers: int | None = None
    vocab_size: int | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown backbone family {self.family!r}")
        if self.pooling is None:
            default = "last_nonpad_token" if self.family == "gpt2_like" else "cls_token"
            object.__setattr__(self, "pooling", default)
        if self.pooling not in POOLING_RULES:
            raise ConfigurationError(f"unknown pooling rule {self.pooling!r}")
        if self.family == "gpt2_like" and self.pooling != "last_nonpad_token":
            raise ConfigurationError(
                "gpt2_like backbones classify from the last non-padding token"
            )

    def to_config(self) -> dict:
        cfg = {
            "name": self.name,
            "family": self.family,
            "casing": self.casing.value,
            "pooling": self.pooling,
            "max_positions": self.max_positions,
            "weight_source": self.weight_source,
            "vocab_source": self.vocab_source,
            "approx_binary_size": self.approx_binary_size,
        }
        for key in ("hidden_size", "num_heads", "num_layers", "vocab_size"):
            value = getattr(self, key)
            if value is not None:
                cfg[key] = value
        return cfg

    @staticmethod
    def from_config(cfg: dict) -> "BackboneSpec":
        known = {
            "name", "family", "casing", "pooling", "max_positions", "weight_source",
            "vocab_source", "approx_binary_size", "hidden_size", "num_heads",
            "num_layers", "vocab_size",
        }
        unknown = set(cfg) - known
        if unknown:
            raise ConfigurationError(f"unknown backbone config keys: {sorted(unknown)}")
        cfg = dict(cfg)
        cfg["casing"] = NormalizationPolicy(cfg.get("casing", "identity"))
        return BackboneSpec(**cfg)


def registry_default() -> list[BackboneSpec]:
    """The four shared-task backbones plus the built-in tiny test network."""
    tiny_vocab = TinyTokenizer.default().vocab_size
    return [
        BackboneSpec(
            name="gbert-large",
            family="bert_like",
            max_positions=512,
            weight_source="hf:deepset/gbert-large",
            vocab_source="hf:deepset/gbert-large",
            approx_binary_size=1_300_000_000,
        ),
        BackboneSpec(
            name="gelectra-large",
            family="electra_like",
            max_positions=512,
            weight_source="hf:deepset/gelectra-large",
            vocab_source="hf:deepset/gelectra-large",
            approx_binary_size=1_300_000_000,
        ),
        BackboneSpec(
            name="electra-base-german-uncased",
            family="electra_like",
            casing=NormalizationPolicy.LOWERCASE_KEEP_ACCENTS,
            max_positions=512,
            weight_source="hf:german-nlp-group/electra-base-german-uncased",
            vocab_source="hf:german-nlp-group/electra-base-german-uncased",
            approx_binary_size=424 * MB,
        ),
        BackboneSpec(
            name="gerpt2-large",
            family="gpt2_like",
            max_positions=1024,
            weight_source="hf:benjamin/gerpt2-large",
            vocab_source="hf:benjamin/gerpt2-large",
            approx_binary_size=3_200_000_000,
            hidden_size=1280,
            num_heads=20,
        ),
        BackboneSpec(
            name="tiny_test",
            family="tiny_test",
            pooling="mean",
            max_positions=128,
            weight_source="builtin:random",
            vocab_source="builtin:tiny",
            approx_binary_size=200_000,  # ~50k float32 parameters
            hidden_size=32,
            num_heads=2,
            num_layers=2,
            vocab_size=tiny_vocab,
        ),
    ]


def save_registry(specs: Sequence[BackboneSpec], path: str | Path) -> None:
    payload = {"backbones": [s.to_config() for s in specs]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_registry(path: str | Path) -> list[BackboneSpec]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"backbone registry not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"registry {path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict) or "backbones" not in payload:
        raise ConfigurationError(f"registry {path} lacks a 'backbones' list")
    return [BackboneSpec.from_config(c) for c in payload["backbones"]]


def find_spec(specs: Sequence[BackboneSpec], name: str) -> BackboneSpec:
    for spec in specs:
        if spec.name == name:
            return spec
    raise ConfigurationError(f"no backbone named {name!r} in the registry")


@dataclass
class ClassifierHead:
    """Affine layer on the pooled representation; zero-initialized by default.

    A single affine layer needs no symmetry breaking, and zero init makes the
    first-step behavior exact: logits 0, probabilities 0.5, loss ln 2.
    """

    input_dim: int
    num_labels: int
    W: np.ndarray = field(default=None)  # type: ignore[assignment]
    b: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.num_labels < 1:
            raise ConfigurationError("head needs at least one label")
        if self.W is None:
            self.W = np.zeros((self.input_dim, self.num_labels), dtype=np.float32)
        if self.b is None:
            self.b = np.zeros(self.num_labels, dtype=np.float32)
        if self.W.shape != (self.input_dim, self.num_labels) or self.b.shape != (self.num_labels,):
            raise ConfigurationError("head parameter shapes do not match dims")

    def params(self) -> dict[str, np.ndarray]:
        return {"head.W": self.W, "head.b": self.b}

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        self.W = params["head.W"]
        self.b = params["head.b"]


@dataclass
class LoadedBackbone:
    """A spec plus concrete parameters ready for forward/backward."""

    spec: BackboneSpec
    net_config: NetConfig
    params: dict[str, np.ndarray]

    @property
    def causal(self) -> bool:
        return self.spec.family == "gpt2_like"

    @property
    def hidden_size(self) -> int:
        return self.net_config.hidden_size


WeightAdapter = Callable[[BackboneSpec, str, str | None, int], LoadedBackbone]

_WEIGHT_ADAPTERS: dict[str, WeightAdapter] = {}


def register_weight_adapter(scheme: str, adapter: WeightAdapter) -> None:
    _WEIGHT_ADAPTERS[scheme] = adapter


def _net_config_from_spec(spec: BackboneSpec) -> NetConfig:
    missing = [k for k in ("hidden_size", "num_heads", "num_layers", "vocab_size") if getattr(spec, k) is None]
    if missing:
        raise ConfigurationError(
            f"backbone {spec.name!r} lacks architecture fields {missing} needed to build it"
        )
    return NetConfig(
        vocab_size=spec.vocab_size,
        max_positions=spec.max_positions,
        hidden_size=spec.hidden_size,
        num_heads=spec.num_heads,
        num_layers=spec.num_layers,
    )


def _load_builtin(spec: BackboneSpec, rest: str, checksum: str | None, seed: int) -> LoadedBackbone:
    if rest != "random":
        raise ConfigurationError(f"unknown builtin weight source {rest!r}")
    config = _net_config_from_spec(spec)
    rng = np.random.Generator(np.random.PCG64(seed & 0xFFFF_FFFF_FFFF_FFFF))
    params = init_params(config, rng)
    return LoadedBackbone(spec=spec, net_config=config, params=params)


def _load_file(spec: BackboneSpec, rest: str, checksum: str | None, seed: int) -> LoadedBackbone:
    path = Path(rest)
    if not path.is_file():
        raise ConfigurationError(f"weight file not found: {path}")
    data = path.read_bytes()
    if checksum is not None:
        digest = hashlib.sha256(data).hexdigest()
        if digest != checksum:
            raise ConfigurationError(
                f"weight checksum mismatch for {path}: expected {checksum}, got {digest}"
            )
    with np.load(io.BytesIO(data), allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        params = {k: archive[k] for k in archive.files if k != "__meta__"}
    config = NetConfig(**meta["net_config"])
    return LoadedBackbone(spec=spec, net_config=config, params=params)


register_weight_adapter("builtin", _load_builtin)
register_weight_adapter("file", _load_file)


def load_backbone(spec: BackboneSpec, seed: int = 0) -> LoadedBackbone:
    """Resolve the spec's weight locator through the adapter registry.

    For file archives, the sha256 in the locator is verified against the raw
    bytes before anything is deserialized; a mismatch rejects the weights.
    """
    scheme, rest, checksum = parse_locator(spec.weight_source)
    adapter = _WEIGHT_ADAPTERS.get(scheme)
    if adapter is None:
        raise ConfigurationError(
            f"no weight adapter registered for scheme {scheme!r}; "
            f"{spec.name} needs its weights attached via register_weight_adapter"
        )
    return adapter(spec, rest, checksum, seed)


def save_backbone(backbone: LoadedBackbone, path: str | Path) -> str:
    """Write weights + architecture to an .npz archive; returns its sha256."""
    meta = {"net_config": asdict(backbone.net_config)}
    arrays = dict(backbone.params)
    arrays["__meta__"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def forward(
    backbone: LoadedBackbone,
    head: ClassifierHead,
    batch: Sequence[TokenSequence] | tuple[np.ndarray, np.ndarray],
    train: bool = False,
    rng: np.random.Generator | None = None,
    compute_dtype=np.float32,
    with_cache: bool = False,
):
    """Pooled representation -> dropout -> affine head; returns logits [B, num_labels].

    `batch` is either a list of TokenSequences (padded here) or pre-padded
    (ids, mask) arrays. Dropout (p=0.1) applies only when train=True, drawing
    its mask from `rng`.
    """
    if head.input_dim != backbone.hidden_size:
        raise ConfigurationError(
            f"head expects input dim {head.input_dim}, backbone provides {backbone.hidden_size}"
        )
    if isinstance(batch, tuple):
        ids, mask = batch
    else:
        ids, mask = pad_batch(batch, pad_id=0)
    dtype = np.dtype(compute_dtype)
    params = cast_params(backbone.params, dtype)
    hidden, net_cache = net_forward(params, ids, mask, backbone.net_config, causal=backbone.causal)
    pooled, pool_cache = pool_forward(hidden, mask, backbone.spec.pooling)

    drop_mask = None
    dropped = pooled
    if train and HEAD_DROPOUT > 0.0:
        if rng is None:
            raise ConfigurationError("training-mode forward needs an rng for dropout")
        keep = (rng.random(pooled.shape) >= HEAD_DROPOUT).astype(dtype)
        drop_mask = keep / dtype.type(1.0 - HEAD_DROPOUT)
        dropped = pooled * drop_mask

    w = head.W if head.W.dtype == dtype else head.W.astype(dtype)
    b = head.b if head.b.dtype == dtype else head.b.astype(dtype)
    logits = dropped @ w + b
    if not with_cache:
        return logits
    cache = {
        "net_cache": net_cache,
        "pool_cache": pool_cache,
        "drop_mask": drop_mask,
        "dropped": dropped,
        "head_w": w,
    }
    return logits, cache


def backward(dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
    """Gradients for head and backbone parameters given d(loss)/d(logits)."""
    dropped = cache["dropped"]
    grads: dict[str, np.ndarray] = {
        "head.W": dropped.reshape(-1, dropped.shape[-1]).T @ dlogits,
        "head.b": dlogits.sum(axis=0),
    }
    dpooled = dlogits @ cache["head_w"].T
    if cache["drop_mask"] is not None:
        dpooled = dpooled * cache["drop_mask"]
    dhidden = pool_backward(dpooled, cache["pool_cache"])
    grads.update(net_backward(dhidden, cache["net_cache"]))
    return grads
