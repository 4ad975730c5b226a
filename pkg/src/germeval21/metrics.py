"""Binary classification metrics: confusion counts, precision/recall/F1, macro F1.

All metrics operate on hard {0,1} decisions; thresholding happens upstream.
Zero denominators yield 0.0 (not 1.0, not NaN) for the affected metric.
This convention matters for degenerate runs where a model predicts a single
class, so it is applied uniformly by `prf1`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

SUBTASKS = ("toxic", "engaging", "fact_claiming")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(predictions: Sequence[int], golds: Sequence[int]) -> ConfusionCounts:
    """Count positional (prediction, gold) pairs in one vectorized pass.

    Both sequences must contain only 0/1 and have equal length.
    """
    if len(predictions) != len(golds):
        raise ValueError(
            f"length mismatch: {len(predictions)} predictions vs {len(golds)} golds"
        )
    p = np.asarray(predictions, dtype=np.int64)
    g = np.asarray(golds, dtype=np.int64)
    if p.size and (p.min() < 0 or p.max() > 1 or g.min() < 0 or g.max() > 1):
        raise ValueError("predictions and golds must be 0/1")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (g == 1))),
        fp=int(np.sum((p == 1) & (g == 0))),
        fn=int(np.sum((p == 0) & (g == 1))),
        tn=int(np.sum((p == 0) & (g == 0))),
    )


def prf1(counts: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall, F1 from confusion counts.

    precision = tp/(tp+fp), recall = tp/(tp+fn), f1 = 2PR/(P+R).
    Any zero denominator makes the affected value 0.0.
    """
    precision = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    recall = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = f1_score(precision, recall)
    return precision, recall, f1


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0.0 when both are 0."""
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def macro_f1(per_label_f1: Mapping[str, float]) -> float:
    """Arithmetic mean of per-label F1 values."""
    if not per_label_f1:
        raise ValueError("macro F1 over an empty label map is undefined")
    return sum(per_label_f1.values()) / len(per_label_f1)


@dataclass(frozen=True)
class LabelMetrics:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts


@dataclass(frozen=True)
class MetricsReport:
    """Per-label precision/recall/F1 plus macro F1 over evaluated labels.

    `per_label` covers only labels that had at least one known gold value;
    `evaluated_count` is the total number of (prediction, gold) pairs that
    entered the confusion counts across all labels.
    """

    per_label: dict[str, LabelMetrics] = field(default_factory=dict)
    macro_f1: float = 0.0
    evaluated_count: int = 0

    def f1(self, label: str) -> float:
        return self.per_label[label].f1

    def to_flat(self) -> dict:
        """Flat key-value record for the run store (label.precision, ... , macro_f1)."""
        flat: dict = {"macro_f1": self.macro_f1, "evaluated_count": self.evaluated_count}
        for label, m in self.per_label.items():
            flat[f"{label}.precision"] = m.precision
            flat[f"{label}.recall"] = m.recall
            flat[f"{label}.f1"] = m.f1
            flat[f"{label}.tp"] = m.counts.tp
            flat[f"{label}.fp"] = m.counts.fp
            flat[f"{label}.fn"] = m.counts.fn
            flat[f"{label}.tn"] = m.counts.tn
        return flat

    @staticmethod
    def from_flat(flat: Mapping) -> "MetricsReport":
        labels = sorted({k.split(".")[0] for k in flat if "." in k})
        per_label = {}
        for label in labels:
            counts = ConfusionCounts(
                tp=int(flat[f"{label}.tp"]),
                fp=int(flat[f"{label}.fp"]),
                fn=int(flat[f"{label}.fn"]),
                tn=int(flat[f"{label}.tn"]),
            )
            per_label[label] = LabelMetrics(
                precision=float(flat[f"{label}.precision"]),
                recall=float(flat[f"{label}.recall"]),
                f1=float(flat[f"{label}.f1"]),
                counts=counts,
            )
        return MetricsReport(
            per_label=per_label,
            macro_f1=float(flat["macro_f1"]),
            evaluated_count=int(flat["evaluated_count"]),
        )


def report_from_pairs(pairs_per_label: Mapping[str, tuple[Sequence[int], Sequence[int]]]) -> MetricsReport:
    """Build a MetricsReport from (predictions, golds) pairs keyed by label.

    Labels with no pairs are dropped; macro F1 averages the remaining labels.
    """
    per_label: dict[str, LabelMetrics] = {}
    evaluated = 0
    for label, (preds, golds) in pairs_per_label.items():
        if len(preds) == 0:
            continue
        counts = confusion(preds, golds)
        precision, recall, f1 = prf1(counts)
        per_label[label] = LabelMetrics(precision, recall, f1, counts)
        evaluated += counts.total
    macro = macro_f1({lbl: m.f1 for lbl, m in per_label.items()}) if per_label else 0.0
    return MetricsReport(per_label=per_label, macro_f1=macro, evaluated_count=evaluated)
