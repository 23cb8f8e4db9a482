"""Rank correlation and sensitivity summaries for metric series."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from itertools import combinations
from typing import Mapping

import numpy as np

from .errors import DegenerateWarning, EmptyDataset, LabelMismatch, ShapeError


@dataclass(frozen=True)
class MetricSeries:
    labels: tuple
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        labels = tuple(self.labels)
        if vals.ndim != 1 or len(labels) != vals.size:
            raise ShapeError("labels and values must have the same length")
        if vals.size < 2:
            raise ShapeError("a metric series needs at least 2 values")
        if not np.all(np.isfinite(vals)):
            raise ValueError("metric series values must be finite")
        if len(set(labels)) != len(labels):
            raise LabelMismatch("duplicate labels")
        vals.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "values", vals)

    @classmethod
    def of(cls, values, labels=None) -> "MetricSeries":
        values = list(values)
        return cls(tuple(labels) if labels is not None else tuple(range(len(values))), values)

    def by_label(self) -> dict:
        return dict(zip(self.labels, self.values.tolist()))


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, MetricSeries) else np.asarray(x, dtype=np.float64)


def kendall_tau(x, y) -> float:
    """Kendall's tau-b between two equally long series.

    Pair counts are integers, so identical rankings give exactly 1.0 and
    reversed rankings exactly -1.0.  If either series is entirely tied the
    statistic is undefined: NaN is returned with a ``DegenerateWarning``.

    Raises:
        ShapeError: lengths differ or are below 2.
    """
    a, b = _values(x), _values(y)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"series lengths differ: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ShapeError("need at least 2 observations")
    i, j = np.triu_indices(n, k=1)
    sa = np.sign(a[j] - a[i]).astype(np.int64)
    sb = np.sign(b[j] - b[i]).astype(np.int64)
    s = int(np.sum(sa * sb))  # concordant minus discordant
    untied_a = int(np.count_nonzero(sa))
    untied_b = int(np.count_nonzero(sb))
    if untied_a == 0 or untied_b == 0:
        warnings.warn("Kendall's tau undefined for an all-tied series", DegenerateWarning, stacklevel=2)
        return float("nan")
    tau = s / math.sqrt(untied_a * untied_b)
    return max(-1.0, min(1.0, tau))


def coverage_proportion(values, range_min: float = 0.0, range_max: float = 100.0) -> float:
    """``(max - min) / (range_max - range_min)`` of a series."""
    v = _values(values)
    if v.size == 0:
        raise EmptyDataset("empty series")
    if not range_max > range_min:
        raise ValueError("range_max must exceed range_min")
    if v.min() < range_min or v.max() > range_max:
        raise ValueError(f"values outside [{range_min}, {range_max}]")
    return float((v.max() - v.min()) / (range_max - range_min))


def std_dev(values, ddof: int = 0) -> float:
    """Standard deviation; population (divisor ``N``) by default.

    ``ddof=1`` gives the sample estimate with divisor ``N - 1``.
    """
    v = _values(values)
    if v.size == 0:
        raise EmptyDataset("empty series")
    if v.size - ddof <= 0:
        raise EmptyDataset(f"need more than {ddof} values")
    return float(np.std(v, ddof=ddof))


def rank_stability(series_by_dataset: Mapping[str, MetricSeries]) -> float:
    """Kendall's tau of method rankings across datasets, aligned by label.

    With more than two datasets the pairwise taus are averaged.

    Raises:
        LabelMismatch: the datasets do not cover the same methods.
    """
    names = list(series_by_dataset)
    if len(names) < 2:
        raise ShapeError("need at least 2 datasets")
    maps = {name: series_by_dataset[name].by_label() for name in names}
    ref = set(maps[names[0]])
    for name in names[1:]:
        if set(maps[name]) != ref:
            raise LabelMismatch(f"method labels of {name!r} differ from {names[0]!r}")
    order = list(series_by_dataset[names[0]].labels)
    taus = [
        kendall_tau([maps[p][m] for m in order], [maps[q][m] for m in order])
        for p, q in combinations(names, 2)
    ]
    return float(np.mean(taus))


@dataclass(frozen=True)
class ColumnSummary:
    tau: float | None
    value_range: float
    coverage: float | None
    std: float

    def to_dict(self) -> dict:
        return {"tau": self.tau, "range": self.value_range, "coverage": self.coverage, "std": self.std}


def summarize_column(values, reference=None, bounds: tuple[float, float] | None = None, ddof: int = 0,
                     absolute: bool = True) -> ColumnSummary:
    """Summary statistics of one table column.

    ``tau`` is taken against ``reference`` (absolute value when ``absolute``);
    ``coverage`` needs the metric's theoretical ``bounds``.
    """
    v = _values(values)
    tau = None
    if reference is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWarning)
            tau = kendall_tau(v, reference)
        if absolute and not math.isnan(tau):
            tau = abs(tau)
    cov = coverage_proportion(v, *bounds) if bounds is not None else None
    return ColumnSummary(tau=tau, value_range=float(v.max() - v.min()), coverage=cov, std=std_dev(v, ddof))
