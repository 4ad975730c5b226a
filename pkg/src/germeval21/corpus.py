"""Comment corpora: delimited-file loading, saving, and seeded train/validation splits.

File format: UTF-8 delimited text with a header row. The default column names
follow the shared-task convention (`comment_id`, `comment_text`, `Sub1_Toxic`,
`Sub2_Engaging`, `Sub3_FactClaiming`). Label cells are "1", "0", or empty
(empty = unknown). Columns the header does not carry degrade gracefully:
no id column means synthetic "row-<k>" ids, no label column means unknown.

Splits shuffle with Fisher-Yates driven by a splitmix64 PRNG (algorithm id
"fy-splitmix64-v1"). The algorithm is pinned here rather than borrowed from
numpy so that a numpy upgrade can never silently reshuffle; persisted split
manifests make old splits reproducible even if the algorithm ever changes.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

from .errors import CorpusParseError, ValidationError
from .metrics import SUBTASKS

logger = logging.getLogger(__name__)

SPLIT_ALGORITHM = "fy-splitmix64-v1"


class Label(enum.Enum):
    PRESENT = "1"
    ABSENT = "0"
    UNKNOWN = ""

    @property
    def known(self) -> bool:
        return self is not Label.UNKNOWN

    @property
    def bit(self) -> int:
        if not self.known:
            raise ValueError("unknown label has no 0/1 value")
        return 1 if self is Label.PRESENT else 0


def label_from_bit(bit: int) -> Label:
    return Label.PRESENT if bit else Label.ABSENT


@dataclass(frozen=True)
class Comment:
    id: str
    text: str


@dataclass(frozen=True)
class LabelSet:
    toxic: Label = Label.UNKNOWN
    engaging: Label = Label.UNKNOWN
    fact_claiming: Label = Label.UNKNOWN

    def get(self, subtask: str) -> Label:
        if subtask not in SUBTASKS:
            raise KeyError(f"unknown subtask {subtask!r}")
        return getattr(self, subtask)

    def present_count(self) -> int:
        return sum(1 for s in SUBTASKS if self.get(s) is Label.PRESENT)


Entry = tuple[Comment, LabelSet]


@dataclass(frozen=True)
class LabeledDataset:
    """Ordered comments with tri-valued labels; ids unique, order = load order."""

    entries: tuple[Entry, ...]
    source_tag: str
    empty_text_count: int = 0

    def __post_init__(self):
        seen: set[str] = set()
        for comment, _ in self.entries:
            if not comment.id:
                raise ValidationError("comment id must be non-empty")
            if comment.id in seen:
                raise ValidationError(f"duplicate comment id {comment.id!r}")
            seen.add(comment.id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Entry]:
        return iter(self.entries)

    def ids(self) -> tuple[str, ...]:
        return tuple(c.id for c, _ in self.entries)

    def by_id(self, comment_id: str) -> Entry:
        for entry in self.entries:
            if entry[0].id == comment_id:
                return entry
        raise KeyError(comment_id)


@dataclass(frozen=True)
class ColumnSchema:
    """Names the columns of a delimited corpus file plus its dialect.

    A named column that is absent from the file header falls back to the
    documented default behavior (synthetic ids / unknown labels). Setting a
    label column to None skips that subtask entirely.
    """

    id_column: str | None = "comment_id"
    text_column: str = "comment_text"
    toxic_column: str | None = "Sub1_Toxic"
    engaging_column: str | None = "Sub2_Engaging"
    fact_claiming_column: str | None = "Sub3_FactClaiming"
    delimiter: str = ","
    quotechar: str = '"'

    def label_columns(self) -> dict[str, str | None]:
        return {
            "toxic": self.toxic_column,
            "engaging": self.engaging_column,
            "fact_claiming": self.fact_claiming_column,
        }


def _parse_label_cell(cell: str, column: str, line: int) -> Label:
    cell = cell.strip()
    if cell == "":
        return Label.UNKNOWN
    if cell == "1":
        return Label.PRESENT
    if cell == "0":
        return Label.ABSENT
    raise ValidationError(
        f"line {line}: label cell {cell!r} in column {column!r} is not 0, 1, or empty"
    )


def load_labeled_corpus(
    path: str | Path,
    schema: ColumnSchema | None = None,
    source_tag: str | None = None,
) -> LabeledDataset:
    """Load one entry per data row; see module docstring for the format."""
    schema = schema or ColumnSchema()
    path = Path(path)
    if source_tag is None:
        source_tag = path.stem
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter, quotechar=schema.quotechar)
        try:
            header = next(reader)
        except StopIteration:
            raise CorpusParseError("file has no header row") from None
        col_index = {name: i for i, name in enumerate(header)}
        if schema.text_column not in col_index:
            raise CorpusParseError(f"text column {schema.text_column!r} missing from header")
        text_i = col_index[schema.text_column]
        id_i = col_index.get(schema.id_column) if schema.id_column else None
        label_is = {
            subtask: col_index.get(col) if col else None
            for subtask, col in schema.label_columns().items()
        }

        entries: list[Entry] = []
        seen_ids: set[str] = set()
        empty_text = 0
        for k, row in enumerate(reader):
            line = reader.line_num
            if len(row) != len(header):
                raise CorpusParseError(
                    f"expected {len(header)} columns, found {len(row)}", line=line
                )
            cid = row[id_i] if id_i is not None else f"row-{k}"
            if not cid:
                raise ValidationError(f"line {line}: empty comment id")
            if cid in seen_ids:
                raise ValidationError(f"duplicate comment id {cid!r}")
            seen_ids.add(cid)
            text = row[text_i]
            if not text.strip():
                empty_text += 1
            labels = {
                subtask: (
                    _parse_label_cell(row[i], header[i], line)
                    if i is not None
                    else Label.UNKNOWN
                )
                for subtask, i in label_is.items()
            }
            entries.append((Comment(id=cid, text=text), LabelSet(**labels)))

    if empty_text:
        logger.warning("%s: %d rows have empty text (kept)", path, empty_text)
    return LabeledDataset(
        entries=tuple(entries), source_tag=source_tag, empty_text_count=empty_text
    )


def save_labeled_corpus(
    dataset: LabeledDataset, path: str | Path, schema: ColumnSchema | None = None
) -> None:
    """Write a dataset back to a delimited file; unknown labels become empty cells.

    Reloading with the same schema yields entry-wise equal data.
    """
    schema = schema or ColumnSchema()
    columns = [schema.id_column or "comment_id", schema.text_column]
    label_cols = [(s, c) for s, c in schema.label_columns().items() if c]
    columns.extend(c for _, c in label_cols)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(
            fh, delimiter=schema.delimiter, quotechar=schema.quotechar, lineterminator="\n"
        )
        writer.writerow(columns)
        for comment, labels in dataset:
            row = [comment.id, comment.text]
            row.extend(labels.get(subtask).value for subtask, _ in label_cols)
            writer.writerow(row)


class SplitMix64:
    """Pinned 64-bit PRNG (splitmix64) used by the split shuffle."""

    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = seed & self.MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & self.MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & self.MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & self.MASK
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform draw from [0, n) via rejection sampling (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def seeded_permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates permutation of range(n) under splitmix64 (fy-splitmix64-v1)."""
    order = list(range(n))
    rng = SplitMix64(seed)
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        order[i], order[j] = order[j], order[i]
    return order


@dataclass(frozen=True)
class SplitResult:
    train: LabeledDataset
    validation: LabeledDataset
    seed: int
    ratio: float


def train_size(n: int, ratio: float) -> int:
    """floor(ratio * N) with ratio read as a decimal literal.

    Computing the floor on the exact rational avoids float double-rounding:
    0.7 * 10 must give 7, not 6.
    """
    return math.floor(Fraction(str(ratio)) * n)


def split(dataset: LabeledDataset, ratio: float, seed: int) -> SplitResult:
    """Deterministic seeded split; first floor(ratio*N) shuffled entries train."""
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(dataset)
    if n < 2:
        raise ValidationError(f"cannot split a dataset of size {n}")
    k = train_size(n, ratio)
    if k < 1 or n - k < 1:
        raise ValidationError(
            f"ratio {ratio} on {n} entries leaves an empty partition (train={k})"
        )
    order = seeded_permutation(n, seed)
    shuffled = [dataset.entries[i] for i in order]
    train = LabeledDataset(entries=tuple(shuffled[:k]), source_tag=dataset.source_tag)
    validation = LabeledDataset(entries=tuple(shuffled[k:]), source_tag=dataset.source_tag)
    return SplitResult(train=train, validation=validation, seed=seed, ratio=ratio)


def write_split_manifest(result: SplitResult, path: str | Path) -> None:
    """Persist the validation ids, one per line, under a seed/ratio header."""
    lines = [f"# seed={result.seed} ratio={result.ratio}"]
    lines.extend(c.id for c, _ in result.validation)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path: str | Path) -> tuple[int, float, tuple[str, ...]]:
    """Return (seed, ratio, validation ids) from a manifest file."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# seed="):
        raise ValidationError(f"{path} is not a split manifest (missing header)")
    header = lines[0][2:].split()
    fields = dict(part.split("=", 1) for part in header)
    try:
        seed = int(fields["seed"])
        ratio = float(fields["ratio"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{path} has a malformed manifest header: {exc}") from None
    ids = tuple(line for line in lines[1:] if line)
    return seed, ratio, ids


def apply_split_manifest(dataset: LabeledDataset, path: str | Path) -> SplitResult:
    """Rebuild a split from its manifest: membership is authoritative, not order.

    Validation entries follow manifest order; train keeps dataset order.
    """
    seed, ratio, val_ids = read_split_manifest(path)
    id_set = set(val_ids)
    missing = id_set - set(dataset.ids())
    if missing:
        raise ValidationError(
            f"manifest names ids absent from the dataset: {sorted(missing)[:5]}"
        )
    by_id = {c.id: (c, l) for c, l in dataset}
    validation = tuple(by_id[i] for i in val_ids)
    train = tuple(e for e in dataset.entries if e[0].id not in id_set)
    return SplitResult(
        train=LabeledDataset(entries=train, source_tag=dataset.source_tag),
        validation=LabeledDataset(entries=validation, source_tag=dataset.source_tag),
        seed=seed,
        ratio=ratio,
    )
