"""Merge external offensive-language corpora into the toxic label.

External corpora carry their own coarse string labels (OFFENSE, OTHER, ...);
a LabelMapping decides per source label whether a row becomes toxic-present,
toxic-absent, or is dropped. Merged rows never receive engaging or
fact-claiming values: the external tasks say nothing about them.

External ids are always prefixed with the corpus source tag, so merging the
same corpus twice collides on ids and is rejected instead of silently
duplicating data.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from .corpus import Comment, Label, LabeledDataset, LabelSet, split as corpus_split, SplitResult
from .errors import CorpusParseError, ValidationError

logger = logging.getLogger(__name__)

TOXIC_PRESENT = "toxic_present"
TOXIC_ABSENT = "toxic_absent"
DROP = "drop"
MAPPING_TARGETS = (TOXIC_PRESENT, TOXIC_ABSENT, DROP)


@dataclass(frozen=True)
class ExternalCorpus:
    """Rows of (comment, raw source label string) from a foreign shared task."""

    rows: tuple[tuple[Comment, str], ...]
    source_tag: str

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[tuple[Comment, str]]:
        return iter(self.rows)


def load_external_corpus(
    path: str | Path,
    text_column: str = "text",
    label_column: str = "label",
    id_column: str | None = None,
    delimiter: str = ",",
    source_tag: str | None = None,
) -> ExternalCorpus:
    """Load a delimited file whose label column holds arbitrary strings."""
    path = Path(path)
    if source_tag is None:
        source_tag = path.stem
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusParseError("file has no header row") from None
        col = {name: i for i, name in enumerate(header)}
        for needed in (text_column, label_column):
            if needed not in col:
                raise CorpusParseError(f"column {needed!r} missing from header")
        rows = []
        for k, row in enumerate(reader):
            if len(row) != len(header):
                raise CorpusParseError(
                    f"expected {len(header)} columns, found {len(row)}",
                    line=reader.line_num,
                )
            cid = row[col[id_column]] if id_column and id_column in col else f"row-{k}"
            rows.append((Comment(id=cid, text=row[col[text_column]]), row[col[label_column]]))
    return ExternalCorpus(rows=tuple(rows), source_tag=source_tag)


def load_label_mapping(path: str | Path) -> dict[str, str]:
    """Read `source_label<TAB>target` lines; targets must be known."""
    mapping: dict[str, str] = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"mapping line {i}: expected 'label<TAB>target', got {line!r}")
        source, target = parts[0].strip(), parts[1].strip()
        if target not in MAPPING_TARGETS:
            raise ValidationError(
                f"mapping line {i}: target {target!r} not in {MAPPING_TARGETS}"
            )
        mapping[source] = target
    if not mapping:
        raise ValidationError(f"mapping file {path} is empty")
    return mapping


@dataclass(frozen=True)
class MergeResult:
    dataset: LabeledDataset
    base_count: int
    mapped_count: int
    dropped_count: int

    def reconciles(self) -> bool:
        return self.base_count + self.mapped_count == len(self.dataset)


def merge_external(
    base: LabeledDataset,
    external: ExternalCorpus,
    mapping: Mapping[str, str],
) -> MergeResult:
    """Append mapped external rows to the base dataset.

    Base entries pass through untouched and first; external ids gain a
    "<source_tag>:" prefix. Unmapped source labels abort with the offending
    label named.
    """
    unmapped = sorted({label for _, label in external if label not in mapping})
    if unmapped:
        raise ValidationError(f"external labels without a mapping: {unmapped}")

    entries = list(base.entries)
    dropped = 0
    mapped = 0
    for comment, source_label in external:
        target = mapping[source_label]
        if target == DROP:
            dropped += 1
            continue
        toxic = Label.PRESENT if target == TOXIC_PRESENT else Label.ABSENT
        entries.append(
            (
                Comment(id=f"{external.source_tag}:{comment.id}", text=comment.text),
                LabelSet(toxic=toxic),
            )
        )
        mapped += 1
    merged = LabeledDataset(
        entries=tuple(entries),
        source_tag=f"{base.source_tag}+{external.source_tag}",
    )
    logger.info(
        "merged %d external rows into %d base rows (%d dropped)",
        mapped, len(base), dropped,
    )
    return MergeResult(
        dataset=merged, base_count=len(base), mapped_count=mapped, dropped_count=dropped
    )


@dataclass(frozen=True)
class PairedSplit:
    """Matched train sets for the with/without-augmentation comparison.

    Both runs share the identical base-only validation split, so their scores
    are directly comparable; only the train side differs.
    """

    baseline: SplitResult
    augmented: SplitResult
    merge: MergeResult


def paired_augmentation_split(
    base: LabeledDataset,
    external: ExternalCorpus,
    mapping: Mapping[str, str],
    ratio: float,
    seed: int,
) -> PairedSplit:
    """Split the base corpus, then extend only the train side with mapped rows.

    The validation partition contains base-corpus ids exclusively.
    """
    base_split = corpus_split(base, ratio, seed)
    merge = merge_external(base_split.train, external, mapping)
    augmented = SplitResult(
        train=merge.dataset,
        validation=base_split.validation,
        seed=seed,
        ratio=ratio,
    )
    return PairedSplit(baseline=base_split, augmented=augmented, merge=merge)
