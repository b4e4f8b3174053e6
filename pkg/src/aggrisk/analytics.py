"""Loss statistics over per-trial loss vectors and report assembly.

Quantiles use the lower order statistic: the ``ceil(p * N)``-th smallest
loss, with ``p`` taken as the decimal it prints as so ``VaR(0.1)`` over ten
trials is the smallest loss rather than the second.
"""

from __future__ import annotations

import bisect
import io
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np

SUMMARY_QUANTILES = (0.5, 0.9, 0.99)
QUANTILE_CONVENTION = "lower order statistic at ceil(p*N)"
VARIANCE_CONVENTION = "unbiased (N-1); N=1 reports 0"
REPORT_COLUMNS = ("group_key", "statistic", "x", "value")


def _rank(p: float, n: int) -> int:
    return math.ceil(Decimal(repr(float(p))) * n)


def _check(sorted_losses, p=None):
    if len(sorted_losses) == 0:
        raise ValueError("empty loss list")
    if p is not None and not 0.0 < p < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {p}")


_SCALE = 1127  # 2**-1127 divides every float64 mantissa*2**exponent split below


def exact_mean(values: Sequence[float]) -> float:
    """Mean rounded once from the exact sum, so it is independent of summation order."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(arr)):
        return math.fsum(arr.tolist()) / len(arr)
    mant, expo = np.frexp(arr)
    ints = (mant * 2.0**53).astype(np.int64)
    shifts = expo.astype(np.int64) - 53 + _SCALE
    order = np.argsort(shifts, kind="stable")
    ints, shifts = ints[order], shifts[order]
    cuts = np.flatnonzero(np.diff(shifts)) + 1
    total = 0
    for lo, hi in zip([0, *cuts.tolist()], [*cuts.tolist(), len(arr)]):
        total += sum(ints[lo:hi].tolist()) << int(shifts[lo])
    return float(Fraction(total, len(arr) << _SCALE))


def ep_curve(sorted_losses: Sequence[float], thresholds: Iterable[float]) -> list[tuple[float, float]]:
    """Fraction of trials whose loss strictly exceeds each threshold."""
    losses = list(sorted_losses)
    n = len(losses)
    if n == 0:
        return [(float(v), 0.0) for v in thresholds]
    return [(float(v), (n - bisect.bisect_right(losses, v)) / n) for v in thresholds]


def value_at_risk(sorted_losses: Sequence[float], p: float) -> float:
    _check(sorted_losses, p)
    return float(sorted_losses[_rank(p, len(sorted_losses)) - 1])


def tail_value_at_risk(sorted_losses: Sequence[float], p: float) -> float:
    """Mean of the ``ceil((1 - p) * N)`` largest losses."""
    _check(sorted_losses, p)
    n = len(sorted_losses)
    count = math.ceil((1 - Decimal(repr(float(p)))) * n)
    return exact_mean(sorted_losses[n - count :])


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    variance: float
    min: float
    max: float
    quantiles: Mapping[float, float]
    degenerate: bool = False


def summary_stats(losses: Sequence[float]) -> SummaryStats:
    values = [float(x) for x in losses]
    _check(values)
    n = len(values)
    mean = exact_mean(values)
    variance = math.fsum((x - mean) ** 2 for x in values) / (n - 1) if n > 1 else 0.0
    ordered = sorted(values)
    return SummaryStats(
        mean=mean,
        variance=variance,
        min=ordered[0],
        max=ordered[-1],
        quantiles={q: value_at_risk(ordered, q) for q in SUMMARY_QUANTILES},
        degenerate=n == 1,
    )


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StatRow:
    statistic: str
    x: float | int | None
    value: float


def stat_rows(sorted_losses: Sequence[float], spec, ordered_losses: Sequence[float] | None = None) -> list[StatRow]:
    """Rows for one group given its ascending losses and a reducer statistic spec.

    ``ordered_losses`` are the same losses in trial order, used for the mean.
    """
    kind = spec.kind
    trial_order = ordered_losses if ordered_losses is not None else sorted_losses
    if kind == "EP":
        return [StatRow("EP", v, prob) for v, prob in ep_curve(sorted_losses, spec.thresholds)]
    if kind == "VAR":
        return [StatRow("VaR", spec.confidence, value_at_risk(sorted_losses, spec.confidence))]
    if kind == "TVAR":
        return [StatRow("TVaR", spec.confidence, tail_value_at_risk(sorted_losses, spec.confidence))]
    if kind == "MEAN":
        return [StatRow("mean", None, exact_mean(trial_order))]
    if kind == "STATS":
        s = summary_stats(trial_order)
        rows = [
            StatRow("mean", None, s.mean),
            StatRow("variance", None, s.variance),
            StatRow("min", None, s.min),
            StatRow("max", None, s.max),
        ]
        rows += [StatRow("quantile", q, v) for q, v in s.quantiles.items()]
        return rows
    if kind == "DISTRIBUTION":
        return [StatRow("loss_at_rank", i + 1, float(v)) for i, v in enumerate(sorted_losses)]
    raise ValueError(f"unknown statistic {kind!r}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def _csv_field(text: str) -> str:
    return f'"{text}"' if any(c in text for c in ',"\n') else text


@dataclass(frozen=True)
class ReportRow:
    group_key: str
    statistic: str
    x: float | int | None
    value: float


@dataclass(frozen=True)
class LossReport:
    rows: tuple[ReportRow, ...]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        for key, value in self.metadata.items():
            buf.write(f"# {key}: {value}\n")
        buf.write(",".join(REPORT_COLUMNS) + "\n")
        for r in self.rows:
            buf.write(f"{_csv_field(r.group_key)},{r.statistic},{_fmt(r.x)},{_fmt(r.value)}\n")
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8", newline="\n")
        return path

    def value(self, statistic: str, group_key: str = "TOTAL", x=None) -> float:
        for r in self.rows:
            if r.group_key == group_key and r.statistic == statistic and (x is None or r.x == x):
                return r.value
        raise KeyError((group_key, statistic, x))

    @classmethod
    def from_csv(cls, text: str) -> LossReport:
        import csv

        metadata, lines = {}, []
        for line in text.splitlines():
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                metadata[key] = value
            else:
                lines.append(line)
        reader = csv.reader(lines)
        header = next(reader)
        if tuple(header) != REPORT_COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        rows = []
        for g, stat, x, v in reader:
            xv = None if x == "" else (int(x) if x.lstrip("-").isdigit() else float(x))
            rows.append(ReportRow(g, stat, xv, float(v)))
        return cls(tuple(rows), metadata)


def assemble_report(per_group: Iterable[tuple[object, Sequence[StatRow]]], metadata: Mapping[str, str]) -> LossReport:
    """Flatten per-group statistics into a deterministically ordered report.

    Group keys must provide ``label`` and ``sort_key()``; rows are ordered by
    group, then statistic name, then x.
    """
    keyed = []
    for group, rows in per_group:
        for r in rows:
            x_order = (0, 0.0) if r.x is None else (1, float(r.x))
            keyed.append(((group.sort_key(), r.statistic, x_order), ReportRow(group.label, r.statistic, r.x, r.value)))
    keyed.sort(key=lambda item: item[0])
    return LossReport(tuple(row for _, row in keyed), dict(metadata))
