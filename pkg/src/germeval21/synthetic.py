"""Synthetic desk-scale corpora with known ground truth.

Each comment is filler text; a label is present exactly when its marker token
appears (GIFT -> toxic, DANKE -> engaging, FAKT -> fact_claiming). The task is
separable by construction, so the tiny backbone must solve it quickly; that
makes these corpora the workhorse of the end-to-end tests.
"""

from __future__ import annotations

import random

from .corpus import Comment, LabeledDataset, Label, LabelSet, label_from_bit
from .textprep import (
    DEFAULT_WORD_LIST,
    MARKER_ENGAGING,
    MARKER_FACT,
    MARKER_TOXIC,
)

_MARKERS = {
    "toxic": MARKER_TOXIC,
    "engaging": MARKER_ENGAGING,
    "fact_claiming": MARKER_FACT,
}
_FILLERS = tuple(w for w in DEFAULT_WORD_LIST if w not in _MARKERS.values())


def synthetic_marker_corpus(
    n: int = 200,
    seed: int = 7,
    marker_probability: float = 0.5,
    source_tag: str = "synthetic-markers",
) -> LabeledDataset:
    """Build n comments whose labels are fully determined by marker tokens.

    Uses `random.Random` (stable across Python releases) so a fixed seed
    always yields the identical corpus.
    """
    rng = random.Random(seed)
    entries = []
    for i in range(n):
        words = [rng.choice(_FILLERS) for _ in range(rng.randint(4, 12))]
        bits = {}
        for subtask, marker in _MARKERS.items():
            present = rng.random() < marker_probability
            bits[subtask] = 1 if present else 0
            if present:
                words.insert(rng.randrange(len(words) + 1), marker)
        labels = LabelSet(**{s: label_from_bit(b) for s, b in bits.items()})
        entries.append((Comment(id=str(1000 + i), text=" ".join(words)), labels))
    return LabeledDataset(entries=tuple(entries), source_tag=source_tag)


def synthetic_offense_corpus(
    n: int = 60,
    seed: int = 11,
    offense_probability: float = 0.5,
    other_label: str = "OTHER",
    offense_label: str = "OFFENSE",
    source_tag: str = "synthetic-offense",
) -> "ExternalCorpus":
    """External-style corpus with coarse string labels, for augmentation tests."""
    from .augmentation import ExternalCorpus

    rng = random.Random(seed)
    rows = []
    for i in range(n):
        words = [rng.choice(_FILLERS) for _ in range(rng.randint(4, 10))]
        offensive = rng.random() < offense_probability
        if offensive:
            words.insert(rng.randrange(len(words) + 1), MARKER_TOXIC)
        rows.append(
            (
                Comment(id=str(i), text=" ".join(words)),
                offense_label if offensive else other_label,
            )
        )
    return ExternalCorpus(rows=tuple(rows), source_tag=source_tag)
