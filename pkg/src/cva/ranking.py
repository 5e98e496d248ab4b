"""Benchmark rank aggregation: fractional raw ranks and range-weighted [1, 3] scores.

Both schemes aggregate per-metric values into a segmentation rank (mean over
``seg`` metrics), a classification rank (mean over ``cls`` metrics) and an
overall rank ``2/3 * seg + 1/3 * cls``. Lower is better in both.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError, ParseError

TASKS = ("seg", "cls")
SEG_WEIGHT = 2.0 / 3.0


class ZeroRangeWarning(RuntimeWarning):
    """A metric column has max == min; its scores were set to the midpoint 2."""


@dataclass(frozen=True)
class Metric:
    name: str
    task: str
    higher_is_better: bool = True

    @property
    def header(self) -> str:
        h = f"{self.name}:{self.task}"
        return h if self.higher_is_better else h + ":lower"


@dataclass
class MetricTable:
    models: list[str]
    metrics: list[Metric]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.models), len(self.metrics)):
            raise ContractError(f"values shape {self.values.shape} does not match "
                                f"{len(self.models)} models x {len(self.metrics)} metrics")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("metric table contains non-finite values")
        if len(set(self.models)) != len(self.models):
            raise ContractError("duplicate model names")
        for m in self.metrics:
            if m.task not in TASKS:
                raise ContractError(f"metric {m.name}: task must be one of {TASKS}, got {m.task!r}")

    def task_columns(self, task: str) -> np.ndarray:
        return np.array([i for i, m in enumerate(self.metrics) if m.task == task], dtype=int)

    def oriented(self) -> np.ndarray:
        """Values with lower-is-better columns negated so that larger is always better."""
        sign = np.array([1.0 if m.higher_is_better else -1.0 for m in self.metrics])
        return self.values * sign


@dataclass
class RankReport:
    scheme: str
    models: list[str]
    metrics: list[Metric]
    per_metric: np.ndarray
    seg_rank: np.ndarray
    cls_rank: np.ndarray
    avg_rank: np.ndarray
    flagged: list[str] = field(default_factory=list)

    def row(self, model: str) -> dict[str, float]:
        i = self.models.index(model)
        return {"avg": float(self.avg_rank[i]), "seg": float(self.seg_rank[i]), "cls": float(self.cls_rank[i])}

    def order(self) -> list[str]:
        """Models sorted by overall rank, best first (stable for ties)."""
        return [self.models[i] for i in np.argsort(self.avg_rank, kind="stable")]


def _aggregate(table: MetricTable, per_metric: np.ndarray, scheme: str, flagged=None) -> RankReport:
    seg_cols, cls_cols = table.task_columns("seg"), table.task_columns("cls")
    if seg_cols.size == 0 or cls_cols.size == 0:
        raise ContractError("aggregate ranking needs at least one seg and one cls metric")
    seg = per_metric[:, seg_cols].mean(axis=1)
    cls = per_metric[:, cls_cols].mean(axis=1)
    avg = SEG_WEIGHT * seg + (1.0 - SEG_WEIGHT) * cls
    return RankReport(scheme, list(table.models), list(table.metrics), per_metric, seg, cls, avg, list(flagged or []))


def raw_rank(table: MetricTable) -> RankReport:
    """Per metric, best model gets rank 1; ties share the average rank."""
    ranks = rankdata(-table.oriented(), method="average", axis=0)
    return _aggregate(table, ranks, "raw")


def range_weighted_score(table: MetricTable) -> RankReport:
    """Per metric, ``score = 3 - 2 (v - min) / (max - min)`` on the oriented values.

    A zero-range metric scores 2 for every model and is listed in ``flagged``.
    """
    v = table.oriented()
    lo, hi = v.min(axis=0), v.max(axis=0)
    span = hi - lo
    flagged = [m.name for m, s in zip(table.metrics, span) if s == 0]
    if flagged:
        warnings.warn(f"zero-range metrics scored 2: {flagged}", ZeroRangeWarning, stacklevel=2)
    safe = np.where(span == 0, 1.0, span)
    scores = np.where(span == 0, 2.0, 3.0 - 2.0 * (v - lo) / safe)
    return _aggregate(table, scores, "range_weighted", flagged)


SCHEMES = {"raw": raw_rank, "range": range_weighted_score, "range_weighted": range_weighted_score}


# -- CSV I/O ----------------------------------------------------------------------------

def _parse_header(header: list[str], path) -> list[Metric]:
    if not header or header[0].strip() != "model":
        raise ParseError(f"{path}: first header cell must be 'model'", 1)
    metrics = []
    for cell in header[1:]:
        parts = cell.strip().split(":")
        if len(parts) not in (2, 3) or not parts[0] or parts[1] not in TASKS:
            raise ParseError(f"{path}: bad metric header {cell!r} (expected name:seg|cls[:lower])", 1)
        if len(parts) == 3 and parts[2] != "lower":
            raise ParseError(f"{path}: bad orientation suffix in {cell!r}", 1)
        metrics.append(Metric(parts[0], parts[1], len(parts) == 2))
    if len({m.name for m in metrics}) != len(metrics):
        raise ParseError(f"{path}: duplicate metric names", 1)
    return metrics


def parse_metrics(lines, path="<string>") -> MetricTable:
    rows = list(csv.reader(lines))
    if not rows:
        raise ParseError(f"{path}: empty file", 1)
    metrics = _parse_header(rows[0], path)
    models, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(metrics) + 1:
            raise ParseError(f"{path}: expected {len(metrics) + 1} cells, got {len(row)}", lineno)
        name = row[0].strip()
        if name in models:
            raise ParseError(f"{path}: duplicate model {name!r}", lineno)
        try:
            vals = [float(c) for c in row[1:]]
        except ValueError as e:
            raise ParseError(f"{path}: non-numeric cell ({e})", lineno) from None
        if not all(np.isfinite(vals)):
            raise ParseError(f"{path}: non-finite cell", lineno)
        models.append(name)
        values.append(vals)
    if not models:
        raise ParseError(f"{path}: no model rows", len(rows))
    return MetricTable(models, metrics, np.array(values))


def load_metrics_csv(path) -> MetricTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return parse_metrics(fh.read().splitlines(), path)


def write_metrics_csv(table: MetricTable, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [m.header for m in table.metrics])
        for name, row in zip(table.models, table.values):
            w.writerow([name] + [repr(float(v)) for v in row])
    return path


def rank_report_write(report: RankReport, path) -> Path:
    """One row per model: per-metric ranks or scores, then seg, cls and avg."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [m.name for m in report.metrics] + ["seg_rank", "cls_rank", "avg_rank"])
        for i, name in enumerate(report.models):
            cells = list(report.per_metric[i]) + [report.seg_rank[i], report.cls_rank[i], report.avg_rank[i]]
            w.writerow([name] + [f"{float(c):.6f}" for c in cells])
    return path


# -- embedded fixtures ------------------------------------------------------------------

TRACKS = ("resenc_l", "primus_m")


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("cva") / "data" / f"{name}.csv"))


def load_fixture(table: str, track: str) -> MetricTable:
    """``table`` is ``raw`` (metrics behind the raw ranks) or ``range`` (metrics behind the range-weighted scores)."""
    return load_metrics_csv(fixture_path(f"{table}_{track}"))


def load_published(table: str, track: str) -> dict[str, dict[str, float]]:
    with fixture_path(f"{table}_{track}_published").open(newline="", encoding="utf-8") as fh:
        return {r["model"]: {k: float(r[k]) for k in ("avg", "seg", "cls")} for r in csv.DictReader(fh)}
