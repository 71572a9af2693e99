"""Online refinement of representation scores from detection-error records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .dataset import GroupKey
from .errors import DataError, OrderingError
from .scoring import RsTable

DEFAULT_MU = 0.99


@dataclass(frozen=True)
class ErrorRecord:
    group: GroupKey
    loss: float
    step: int

    @classmethod
    def from_dict(cls, d: dict) -> ErrorRecord:
        try:
            key = GroupKey(int(d["class_id"]), int(d["size_bin"]), int(d["pos_bin"]))
            return cls(key, float(d["loss"]), int(d["step"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed error record {d!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "class_id": self.group.class_id,
            "size_bin": self.group.size_bin,
            "pos_bin": self.group.pos_bin,
            "loss": self.loss,
            "step": self.step,
        }


@dataclass(frozen=True)
class DynamicsConfig:
    mu: float = DEFAULT_MU
    loss_divisor: float = 1.0

    def __post_init__(self):
        if not 0 <= self.mu <= 1:
            raise ValueError("mu must lie in [0, 1]")
        if not (self.loss_divisor > 0 and math.isfinite(self.loss_divisor)):
            raise ValueError("loss_divisor must be positive and finite")


class RejectedRecord(DataError):
    pass


def apply_error_record(table: RsTable, rec: ErrorRecord, cfg: DynamicsConfig) -> float:
    """EMA update of one group's RS in place; returns the new value.

    ``rs <- mu * rs + (1 - mu) * loss / loss_divisor``. The class mean is
    moved by the same delta divided by the number of bins.
    """
    if not (math.isfinite(rec.loss) and rec.loss >= 0):
        raise RejectedRecord(f"loss must be finite and non-negative, got {rec.loss}")
    stats = table.groups.get(rec.group)
    if stats is None:
        raise DataError(f"group {rec.group.as_tuple()} is not in the RS table")
    old = stats.rs
    loss = rec.loss / cfg.loss_divisor
    new = cfg.mu * old + (1.0 - cfg.mu) * loss
    if new != old:
        stats.rs = new
        c = rec.group.class_id
        table.class_mean_rs[c] += (new - old) / table.binning.num_bins
    return new


@dataclass
class UpdateReport:
    table: RsTable
    records_applied: int = 0
    rejected: int = 0
    per_group: dict[GroupKey, int] = field(default_factory=dict)
    rs_before_min: float = 0.0
    rs_before_max: float = 0.0
    rs_after_min: float = 0.0
    rs_after_max: float = 0.0

    def to_dict(self) -> dict:
        return {
            "records_applied": self.records_applied,
            "rejected": self.rejected,
            "groups_touched": len(self.per_group),
            "per_group": [
                {"class_id": k.class_id, "size_bin": k.size_bin, "pos_bin": k.pos_bin, "count": n}
                for k, n in sorted(self.per_group.items(), key=lambda kv: kv[0].as_tuple())
            ],
            "rs_before": {"min": self.rs_before_min, "max": self.rs_before_max},
            "rs_after": {"min": self.rs_after_min, "max": self.rs_after_max},
        }


def run_update_stream(table: RsTable, records: Iterable[ErrorRecord],
                      cfg: DynamicsConfig | None = None) -> UpdateReport:
    """Apply records in order to a copy of ``table``.

    The input table is never mutated, so readers holding it keep a
    consistent snapshot; the updated table is ``report.table``. Steps must be
    non-decreasing. Min/max statistics cover the groups the stream touched.
    """
    cfg = cfg or DynamicsConfig()
    work = table.copy()
    report = UpdateReport(work)
    before: dict[GroupKey, float] = {}
    last_step = None
    for rec in records:
        if last_step is not None and rec.step < last_step:
            raise OrderingError(f"record step {rec.step} follows step {last_step}")
        last_step = rec.step
        if rec.group in work.groups and rec.group not in before:
            before[rec.group] = work.groups[rec.group].rs
        try:
            apply_error_record(work, rec, cfg)
        except RejectedRecord:
            report.rejected += 1
            continue
        report.records_applied += 1
        report.per_group[rec.group] = report.per_group.get(rec.group, 0) + 1

    touched = [k for k in before if k in report.per_group]
    if touched:
        report.rs_before_min = min(before[k] for k in touched)
        report.rs_before_max = max(before[k] for k in touched)
        report.rs_after_min = min(work.groups[k].rs for k in touched)
        report.rs_after_max = max(work.groups[k].rs for k in touched)
    return report


def read_error_stream(path) -> Iterator[ErrorRecord]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            yield ErrorRecord.from_dict(d)


def snapshot(table: RsTable, path, cfg: DynamicsConfig | None = None,
             records_applied: int = 0) -> RsTable:
    """Write the table plus dynamics metadata; ``restore`` reads it back exactly.

    ``records_applied`` is added to any count already carried by the table.
    Returns the table as written.
    """
    out = table.copy()
    if cfg is not None:
        out.meta["mu"] = cfg.mu
        out.meta["loss_divisor"] = cfg.loss_divisor
    out.meta["records_applied"] = int(out.meta.get("records_applied", 0)) + records_applied
    Path(path).write_text(out.to_json(), encoding="utf-8")
    return out


def restore(path, dataset_digest: str | None = None) -> RsTable:
    return RsTable.load(path, dataset_digest)
