"""Local append-only experiment store.

One project = one line-delimited JSON file; every line is a self-describing
versioned event (`v` field). Writers serialize through an advisory exclusive
lock on the store file and fsync before acknowledging, so concurrent runs from
separate processes cannot interleave partial lines and an acknowledged event
survives a crash. On load, a final line without its trailing newline is the
footprint of a crashed append and is ignored; a malformed line anywhere else
is real corruption and raises.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ValidationError
from .metrics import SUBTASKS, MetricsReport

logger = logging.getLogger(__name__)

EVENT_VERSION = 1

STATUS_COMPLETED = "completed"
STATUS_DIVERGED = "diverged"
STATUS_PARTIAL = "partial"
STATUS_RUNNING = "running"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(backbone: str, config: dict, split_manifest: str | None) -> str:
    payload = {"backbone": backbone, "config": config, "split_manifest": split_manifest}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class EpochMetrics:
    """One training epoch: loss on train, metrics on validation (None for full-data runs)."""

    epoch: int
    train_loss: float
    validation: MetricsReport | None = None

    def to_payload(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "validation": self.validation.to_flat() if self.validation else None,
        }

    @staticmethod
    def from_payload(payload: dict) -> "EpochMetrics":
        validation = payload.get("validation")
        return EpochMetrics(
            epoch=int(payload["epoch"]),
            train_loss=float(payload["train_loss"]),
            validation=MetricsReport.from_flat(validation) if validation else None,
        )


@dataclass
class RunRecord:
    run_id: str
    backbone: str
    config: dict
    split_manifest: str | None
    status: str
    epoch_history: list[EpochMetrics] = field(default_factory=list)
    started: str = ""
    finished: str | None = None
    content_hash: str = ""
    notes: dict = field(default_factory=dict)

    def recompute_content_hash(self) -> str:
        return content_hash(self.backbone, self.config, self.split_manifest)

    def best_validation_f1(self, metric: str = "macro") -> float | None:
        """Best per-epoch validation F1 for a subtask name or "macro"."""
        best = None
        for em in self.epoch_history:
            if em.validation is None:
                continue
            if metric == "macro":
                value = em.validation.macro_f1
            elif metric in em.validation.per_label:
                value = em.validation.per_label[metric].f1
            else:
                continue
            if best is None or value > best:
                best = value
        return best


class RunStore:
    """Append-only event log for training runs."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    # -- write side ---------------------------------------------------------

    def _append_line(self, payload: dict) -> None:
        line = canonical_json(payload) + "\n"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())

    def append_event(self, run_id: str, event: dict) -> None:
        """Durably append one event; the run must exist unless this creates it."""
        if event.get("event") != "run_created" and run_id not in self.run_ids():
            raise ValidationError(f"run {run_id!r} does not exist in {self.path}")
        payload = {"v": EVENT_VERSION, "run_id": run_id, **event}
        self._append_line(payload)

    def create_run(
        self,
        run_id: str,
        backbone: str,
        config: dict,
        split_manifest: str | None = None,
        started: str | None = None,
        notes: dict | None = None,
    ) -> None:
        if run_id in self.run_ids():
            raise ValidationError(f"run id {run_id!r} already exists in {self.path}")
        self.append_event(
            run_id,
            {
                "event": "run_created",
                "backbone": backbone,
                "config": config,
                "split_manifest": split_manifest,
                "started": started or utc_now(),
                "content_hash": content_hash(backbone, config, split_manifest),
                "notes": notes or {},
            },
        )

    def append_epoch(self, run_id: str, epoch_metrics: EpochMetrics) -> None:
        self.append_event(run_id, {"event": "epoch", **epoch_metrics.to_payload()})

    def finish_run(self, run_id: str, status: str, finished: str | None = None) -> None:
        if status not in (STATUS_COMPLETED, STATUS_DIVERGED, STATUS_PARTIAL):
            raise ValidationError(f"unknown run status {status!r}")
        self.append_event(
            run_id,
            {"event": "run_finished", "status": status, "finished": finished or utc_now()},
        )

    # -- read side ----------------------------------------------------------

    def _read_events(self) -> list[dict]:
        if not self.path.exists():
            return []
        raw = self.path.read_bytes()
        if not raw:
            return []
        complete, _, tail = raw.rpartition(b"\n")
        if tail:
            logger.warning("%s: ignoring trailing partial line (%d bytes)", self.path, len(tail))
        events = []
        lines = complete.split(b"\n") if complete else []
        for i, line in enumerate(lines):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line.decode("utf-8")))
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise ValidationError(
                    f"{self.path}: corrupt event on line {i + 1}: {exc}"
                ) from None
        return events

    def run_ids(self) -> set[str]:
        return {
            e["run_id"] for e in self._read_events() if e.get("event") == "run_created"
        }

    def load(self) -> dict[str, RunRecord]:
        """Replay all events into RunRecords, in creation order."""
        records: dict[str, RunRecord] = {}
        for event in self._read_events():
            kind = event.get("event")
            run_id = event.get("run_id")
            if kind == "run_created":
                records[run_id] = RunRecord(
                    run_id=run_id,
                    backbone=event["backbone"],
                    config=event["config"],
                    split_manifest=event.get("split_manifest"),
                    status=STATUS_RUNNING,
                    started=event.get("started", ""),
                    content_hash=event.get("content_hash", ""),
                    notes=event.get("notes", {}),
                )
            elif kind == "epoch":
                record = records.get(run_id)
                if record is None:
                    raise ValidationError(f"epoch event for unknown run {run_id!r}")
                record.epoch_history.append(EpochMetrics.from_payload(event))
            elif kind == "run_finished":
                record = records.get(run_id)
                if record is None:
                    raise ValidationError(f"finish event for unknown run {run_id!r}")
                record.status = event["status"]
                record.finished = event.get("finished")
            # unknown event kinds are skipped: newer writers remain readable
        for record in records.values():
            epochs = [em.epoch for em in record.epoch_history]
            if epochs != list(range(1, len(epochs) + 1)):
                raise ValidationError(
                    f"run {record.run_id!r} has non-consecutive epochs {epochs}"
                )
        return records


@dataclass(frozen=True)
class ComparisonRow:
    run_id: str
    backbone: str
    learning_rate: float | None
    epochs: int
    status: str
    started: str
    best_f1: dict[str, float | None]
    sort_metric: float | None


def compare_runs(
    store: RunStore,
    metric: str = "macro",
    status: str | None = None,
    backbone: str | None = None,
) -> list[ComparisonRow]:
    """Best validation F1 per run, sorted descending; ties go to the earlier start.

    Runs without the requested metric sort last (still listed). The result is
    a pure function of the store contents.
    """
    if metric != "macro" and metric not in SUBTASKS:
        raise ValidationError(f"unknown comparison metric {metric!r}")
    rows = []
    for record in store.load().values():
        if status and record.status != status:
            continue
        if backbone and record.backbone != backbone:
            continue
        best = {name: record.best_validation_f1(name) for name in (*SUBTASKS, "macro")}
        rows.append(
            ComparisonRow(
                run_id=record.run_id,
                backbone=record.backbone,
                learning_rate=record.config.get("learning_rate"),
                epochs=len(record.epoch_history),
                status=record.status,
                started=record.started,
                best_f1=best,
                sort_metric=best[metric],
            )
        )
    return sorted(
        rows,
        key=lambda r: (r.sort_metric is None, -(r.sort_metric or 0.0), r.started),
    )


def render_comparison(rows: Sequence[ComparisonRow]) -> str:
    headers = ["run_id", "backbone", "lr", "epochs", "status", "toxic", "engaging", "fact_claiming", "macro"]
    table = [headers]
    for r in rows:
        table.append(
            [
                r.run_id,
                r.backbone,
                "" if r.learning_rate is None else f"{r.learning_rate:g}",
                str(r.epochs),
                r.status,
                *(
                    "" if r.best_f1[m] is None else f"{r.best_f1[m]:.4f}"
                    for m in (*SUBTASKS, "macro")
                ),
            ]
        )
    widths = [max(len(row[i]) for row in table) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines)


def history_table(store: RunStore, subtask: str) -> list[tuple[int, str, float]]:
    """(epoch, run_id, f1) rows for every run that has validation history."""
    if subtask != "macro" and subtask not in SUBTASKS:
        raise ValidationError(f"unknown subtask {subtask!r}")
    rows: list[tuple[int, str, float]] = []
    for record in store.load().values():
        for em in record.epoch_history:
            if em.validation is None:
                continue
            if subtask == "macro":
                rows.append((em.epoch, record.run_id, em.validation.macro_f1))
            elif subtask in em.validation.per_label:
                rows.append((em.epoch, record.run_id, em.validation.per_label[subtask].f1))
    rows.sort(key=lambda r: (r[1], r[0]))
    return rows


def plot_history(store: RunStore, subtask: str, output_path: str | Path) -> Path:
    """Write a validation-F1-vs-epoch chart plus a sidecar data table.

    The sidecar (`<output>.tsv`) carries the exact plotted values so tests and
    diffs work on text, never on pixels. Returns the sidecar path.
    """
    rows = history_table(store, subtask)
    if not rows:
        raise ValidationError(f"no runs with epoch history for subtask {subtask!r}")

    sidecar = Path(str(output_path) + ".tsv")
    lines = ["epoch\trun_id\tf1"]
    lines.extend(f"{epoch}\t{run_id}\t{f1!r}" for epoch, run_id, f1 in rows)
    sidecar.write_text("\n".join(lines) + "\n", encoding="utf-8")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    by_run: dict[str, list[tuple[int, float]]] = {}
    for epoch, run_id, f1 in rows:
        by_run.setdefault(run_id, []).append((epoch, f1))
    for run_id, points in by_run.items():
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, marker="o", label=run_id)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"validation F1 ({subtask})")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(output_path)
    plt.close(fig)
    return sidecar
