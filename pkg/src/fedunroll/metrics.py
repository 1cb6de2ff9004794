"""Metrics rows and deterministic CSV serialization.

One row per (round, method) aggregate. Floats are serialized with
repr(), which is the shortest round-tripping decimal form, so equal
runs produce byte-identical files; non-finite values are emitted as the
literal marker DIVERGED; absent values as the empty string. Lines are
joined with a fixed "\n" regardless of platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

COLUMNS = (
    "round",
    "epoch",
    "method",
    "client_id",
    "train_rmse",
    "test_rmse",
    "loss_sum",
    "lagrangian_final_cell",
    "wall_ms",
)

DIVERGED = "DIVERGED"


@dataclass
class MetricsRecord:
    round: int
    epoch: int
    method: str
    client_id: Union[int, str]
    train_rmse: Optional[float]
    test_rmse: Optional[float]
    loss_sum: Optional[float] = None
    lagrangian_final_cell: Optional[float] = None
    wall_ms: Optional[float] = None


def format_value(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    xf = float(x)
    if not math.isfinite(xf):
        return DIVERGED
    return repr(xf)


def record_row(rec: MetricsRecord, columns: Sequence[str]) -> str:
    return ",".join(format_value(getattr(rec, c)) for c in columns)


def rows_to_csv(records: Sequence[MetricsRecord], include_wall: bool = True) -> str:
    cols = COLUMNS if include_wall else COLUMNS[:-1]
    lines = [",".join(cols)]
    lines.extend(record_row(r, cols) for r in records)
    return "\n".join(lines) + "\n"


def write_csv(path, records: Sequence[MetricsRecord], include_wall: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(rows_to_csv(records, include_wall=include_wall))


@dataclass
class SummaryRow:
    """One Table-style line: per-method mean and spread across trials."""

    method: str
    setting: int
    trials: int
    mean_rmse: float
    std_rmse: float


def summary_to_csv(rows: Sequence[SummaryRow]) -> str:
    lines = ["method,setting,trials,mean_rmse,std_rmse"]
    for r in rows:
        lines.append(
            ",".join(
                [
                    r.method,
                    str(r.setting),
                    str(r.trials),
                    format_value(r.mean_rmse),
                    format_value(r.std_rmse),
                ]
            )
        )
    return "\n".join(lines) + "\n"
