"""Text normalization policies and tokenizer adapters.

Comments are fed to the backbones either untouched (`identity`) or Unicode
lowercased with accents preserved (`lowercase_keep_accents`) for the uncased
backbone. Lowercasing uses `str.lower()`, never `str.casefold()`: casefold
would expand ß to "ss", and the uncased backbone keeps accented codepoints
intact, so ß stays ß.

Real subword tokenizers attach through the adapter registry by vocabulary
file; the built-in whitespace + byte-fallback tokenizer covers desk-scale
work and the tiny_test backbone.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError

# Default sequence lengths when a training config leaves max_len unset.
DEFAULT_MAX_LEN_ENCODER = 512
DEFAULT_MAX_LEN_DECODER = 1024


class NormalizationPolicy(enum.Enum):
    IDENTITY = "identity"
    LOWERCASE_KEEP_ACCENTS = "lowercase_keep_accents"


def normalize(text: str, policy: NormalizationPolicy) -> str:
    """Apply a normalization policy; identity returns the input unchanged."""
    if policy is NormalizationPolicy.IDENTITY:
        return text
    if policy is NormalizationPolicy.LOWERCASE_KEEP_ACCENTS:
        return text.lower()
    raise ValueError(f"unknown normalization policy: {policy!r}")


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length token ids with an attention mask.

    `ids[i]` is a real token exactly where `attention_mask[i] == 1`;
    masked-out positions hold the pad id.
    """

    ids: tuple[int, ...]
    attention_mask: tuple[int, ...]
    truncated: bool

    def __post_init__(self):
        if len(self.ids) != len(self.attention_mask):
            raise ValueError("ids and attention_mask must have equal length")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def real_length(self) -> int:
        return int(sum(self.attention_mask))


class TinyTokenizer:
    """Whitespace tokenizer with byte fallback.

    Words found in the vocabulary map to their id; anything else is encoded
    as its UTF-8 bytes, one token per byte, so no input is ever
    out-of-vocabulary. Every sequence is wrapped as [BOS] ... [EOS].
    Byte tokens occupy a contiguous block of 256 ids starting right after
    the largest special/word id.
    """

    def __init__(
        self,
        word_ids: dict[str, int],
        pad_id: int = 0,
        bos_id: int = 1,
        eos_id: int = 2,
    ):
        specials = {pad_id, bos_id, eos_id}
        if len(specials) != 3:
            raise ConfigurationError("pad/bos/eos ids must be distinct")
        taken = sorted(word_ids.values())
        if len(set(taken)) != len(taken):
            raise ConfigurationError("word vocabulary assigns one id twice")
        if any(i in specials for i in taken):
            raise ConfigurationError("word id collides with a special token id")
        self.word_ids = dict(word_ids)
        self.pad_id = pad_id
        self.bos_id = bos_id
        self.eos_id = eos_id
        self.byte_base = max([pad_id, bos_id, eos_id, *taken]) + 1
        self.vocab_size = self.byte_base + 256

    @classmethod
    def default(cls) -> "TinyTokenizer":
        """Built-in vocabulary: the desk-scale word list, ids from 3 upward."""
        return cls({w: 3 + i for i, w in enumerate(DEFAULT_WORD_LIST)})

    @classmethod
    def from_vocab_file(cls, path: str | Path, sha256: str | None = None) -> "TinyTokenizer":
        """Load one word per line; ids are assigned in file order from 3 upward."""
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"vocabulary file not found: {path}")
        data = path.read_bytes()
        if sha256 is not None:
            digest = hashlib.sha256(data).hexdigest()
            if digest != sha256:
                raise ConfigurationError(
                    f"vocabulary checksum mismatch for {path}: expected {sha256}, got {digest}"
                )
        try:
            words = [line for line in data.decode("utf-8").splitlines() if line.strip()]
        except UnicodeDecodeError as exc:
            raise ConfigurationError(f"vocabulary file {path} is not valid UTF-8: {exc}") from None
        if not words:
            raise ConfigurationError(f"vocabulary file {path} contains no words")
        return cls({w: 3 + i for i, w in enumerate(words)})

    def encode(self, text: str, max_len: int) -> TokenSequence:
        if max_len < 2:
            raise ValueError("max_len must leave room for BOS and EOS")
        body: list[int] = []
        for word in text.split():
            wid = self.word_ids.get(word)
            if wid is not None:
                body.append(wid)
            else:
                body.extend(self.byte_base + b for b in word.encode("utf-8"))
        truncated = len(body) > max_len - 2
        if truncated:
            body = body[: max_len - 2]
        ids = (self.bos_id, *body, self.eos_id)
        return TokenSequence(ids=ids, attention_mask=(1,) * len(ids), truncated=truncated)


# Words the built-in tokenizer knows. The three uppercase markers are the
# ground-truth signals of the synthetic desk-scale corpus.
MARKER_TOXIC = "GIFT"
MARKER_ENGAGING = "DANKE"
MARKER_FACT = "FAKT"

DEFAULT_WORD_LIST: tuple[str, ...] = (
    MARKER_TOXIC,
    MARKER_ENGAGING,
    MARKER_FACT,
    "der", "die", "das", "und", "oder", "aber", "nicht", "doch", "wir",
    "ihr", "sie", "er", "es", "ich", "du", "man", "hat", "ist", "sind",
    "war", "wird", "kann", "muss", "soll", "mehr", "sehr", "auch", "nur",
    "schon", "noch", "hier", "da", "so", "wie", "was", "wer", "wenn",
    "dann", "also", "eben", "ganz", "gut", "schlecht", "politik", "verein",
    "kommentar", "meinung", "leute", "heute", "morgen", "immer", "nie",
)


TokenizerFactory = Callable[[str, str | None], TinyTokenizer]

_TOKENIZER_ADAPTERS: dict[str, TokenizerFactory] = {}


def register_tokenizer_adapter(scheme: str, factory: TokenizerFactory) -> None:
    """Attach a tokenizer loader for locator scheme `scheme` ("scheme:rest")."""
    _TOKENIZER_ADAPTERS[scheme] = factory


def parse_locator(locator: str) -> tuple[str, str, str | None]:
    """Split "scheme:rest#sha256=<hex>" into (scheme, rest, checksum)."""
    checksum = None
    if "#sha256=" in locator:
        locator, checksum = locator.split("#sha256=", 1)
    scheme, _, rest = locator.partition(":")
    if not scheme or not _:
        raise ConfigurationError(f"locator {locator!r} has no scheme prefix")
    return scheme, rest, checksum


def load_tokenizer(locator: str) -> TinyTokenizer:
    """Resolve a vocabulary locator to a tokenizer instance.

    "builtin:tiny" returns the built-in vocabulary; "file:<path>[#sha256=...]"
    loads a word list with an optional checksum gate. Other schemes must be
    registered via `register_tokenizer_adapter`.
    """
    scheme, rest, checksum = parse_locator(locator)
    if scheme == "builtin":
        return TinyTokenizer.default()
    if scheme == "file":
        return TinyTokenizer.from_vocab_file(rest, sha256=checksum)
    factory = _TOKENIZER_ADAPTERS.get(scheme)
    if factory is None:
        raise ConfigurationError(
            f"no tokenizer adapter registered for scheme {scheme!r} "
            f"(builtin and file vocabularies are supported out of the box)"
        )
    return factory(rest, checksum)


def tokenize(text: str, backbone: "BackboneSpec", max_len: int) -> TokenSequence:
    """Normalize per the backbone's casing policy, then subword-encode.

    Sequences longer than max_len are truncated and flagged. max_len must not
    exceed the backbone's position budget.
    """
    if max_len > backbone.max_positions:
        raise ConfigurationError(
            f"max_len {max_len} exceeds {backbone.name}'s {backbone.max_positions} positions"
        )
    tokenizer = load_tokenizer(backbone.vocab_source)
    return tokenizer.encode(normalize(text, backbone.casing), max_len)


def pad_batch(
    sequences: Sequence[TokenSequence],
    pad_id: int,
    length: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Pad sequences to a common length; returns (ids, attention_mask) int arrays."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    target = length if length is not None else max(len(s) for s in sequences)
    if any(len(s) > target for s in sequences):
        raise ValueError(f"a sequence exceeds the requested pad length {target}")
    ids = np.full((len(sequences), target), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), target), dtype=np.int64)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s.ids
        mask[i, : len(s)] = s.attention_mask
    return ids, mask


def default_max_len(backbone: "BackboneSpec") -> int:
    """512 for encoder-style backbones, 1024 for decoder-style, capped by positions."""
    base = DEFAULT_MAX_LEN_DECODER if backbone.family == "gpt2_like" else DEFAULT_MAX_LEN_ENCODER
    return min(base, backbone.max_positions)
