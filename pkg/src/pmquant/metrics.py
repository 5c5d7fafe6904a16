"""Evaluation over masked rasters: MAE, interval coverage and width,
bound-exceedance fractions, crossing rate, nearest-rank quantiles and the
paired-map scatter table.

Pooling across images always pools pixels, not per-image rates.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import pandas as pd

from .errors import DomainError, EmptySampleError, ShapeError


def _valid(mask, shape) -> np.ndarray:
    m = np.asarray(getattr(mask, "validity", mask), dtype=bool)
    if m.shape != tuple(shape):
        raise ShapeError(f"mask {m.shape} does not match raster {tuple(shape)}")
    if not m.any():
        raise EmptySampleError("mask selects no valid pixels")
    return m


def _vals(x):
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def masked_mae(pred, target, mask) -> float:
    pred, target = _vals(pred), _vals(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    m = _valid(mask, target.shape)
    return float(np.mean(np.abs(pred[m] - target[m])))


@dataclass(frozen=True)
class IntervalMetrics:
    coverage: float
    median_width: float
    frac_above_lower: float
    frac_below_upper: float
    crossing_rate: float


def interval_metrics(triple, target, mask) -> IntervalMetrics:
    """Closed-interval coverage; crossed intervals (upper < lower) never cover."""
    lower, upper = _vals(triple.lower), _vals(triple.upper)
    target = _vals(target)
    if lower.shape != target.shape or upper.shape != target.shape:
        raise ShapeError("quantile maps and target differ in shape")
    m = _valid(mask, target.shape)
    lo, hi, y = lower[m], upper[m], target[m]
    crossed = hi < lo
    return IntervalMetrics(
        coverage=float(np.mean((lo <= y) & (y <= hi) & ~crossed)),
        median_width=float(np.median(hi - lo)),
        frac_above_lower=float(np.mean(y >= lo)),
        frac_below_upper=float(np.mean(y <= hi)),
        crossing_rate=float(np.mean(crossed)),
    )


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Sorted value at 1-based rank ``ceil(q * n)`` (at least 1)."""
    if not 0.0 < q < 1.0:
        raise DomainError(f"quantile level must lie in (0, 1), got {q}")
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise EmptySampleError("no values")
    k = max(1, math.ceil(q * values.size - 1e-9))
    return float(values[k - 1])


def prediction_quantile(raster, mask, q: float) -> float:
    vals = _vals(raster)
    m = _valid(mask, vals.shape)
    return nearest_rank(vals[m], q)


@dataclass(frozen=True)
class MetricsReport:
    masked_mae: float
    interval_coverage: float
    median_interval_width: float
    frac_above_lower: float
    frac_below_upper: float
    crossing_rate: float
    valid_pixel_count: int
    name: str = "pooled"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([getattr(self, c) for c in self.columns()])
        return buf.getvalue()


def evaluate(triples, targets, masks, name: str = "pooled") -> MetricsReport:
    """Pool every valid pixel of every image into one report."""
    if hasattr(triples, "lower"):
        triples, targets, masks = [triples], [targets], [masks]
    lows, meds, ups, ys, ms = [], [], [], [], []
    for t, y, m in zip(triples, targets, masks):
        y = _vals(y)
        mm = np.asarray(getattr(m, "validity", m), dtype=bool)
        if mm.shape != y.shape:
            raise ShapeError(f"mask {mm.shape} does not match target {y.shape}")
        lows.append(_vals(t.lower)[mm])
        meds.append(_vals(t.median)[mm])
        ups.append(_vals(t.upper)[mm])
        ys.append(y[mm])
        ms.append(np.ones(int(mm.sum()), dtype=bool))
    cat = np.concatenate
    flat = _Flat(cat(lows), cat(meds), cat(ups))
    y, m = cat(ys), cat(ms)
    iv = interval_metrics(flat, y, m)
    return MetricsReport(
        masked_mae=masked_mae(flat.median, y, m),
        interval_coverage=iv.coverage,
        median_interval_width=iv.median_width,
        frac_above_lower=iv.frac_above_lower,
        frac_below_upper=iv.frac_below_upper,
        crossing_rate=iv.crossing_rate,
        valid_pixel_count=int(m.size),
        name=name,
    )


@dataclass
class _Flat:
    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray


def paired_scatter(map_a, map_b, region_labels=None, mask=None) -> pd.DataFrame:
    """One row per valid pixel: ``value_a``, ``value_b``, ``region``.

    ``region_labels`` is an integer/string raster; ``None`` or an empty
    array labels everything ``"unlabeled"``.
    """
    a, b = _vals(map_a), _vals(map_b)
    if a.shape != b.shape:
        raise ShapeError(f"maps differ in shape: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, bool) if mask is None else np.asarray(getattr(mask, "validity", mask), bool)
    if m.shape != a.shape:
        raise ShapeError(f"mask {m.shape} does not match maps {a.shape}")
    if region_labels is None or np.size(region_labels) == 0:
        regions = np.full(int(m.sum()), "unlabeled", dtype=object)
    else:
        labels = np.asarray(getattr(region_labels, "values", region_labels))
        if labels.shape != a.shape:
            raise ShapeError(f"region labels {labels.shape} do not match maps {a.shape}")
        regions = labels[m]
    return pd.DataFrame({"value_a": a[m], "value_b": b[m], "region": regions})


def density_table(maps: dict[str, np.ndarray], masks: dict[str, np.ndarray] | None = None,
                  bins: int = 50) -> pd.DataFrame:
    """Histogram densities of several maps on shared bins (long format)."""
    masks = masks or {}
    vals = {k: _vals(v)[np.asarray(masks.get(k, np.ones(np.shape(_vals(v)), bool)), bool)]
            for k, v in maps.items()}
    allv = np.concatenate([v for v in vals.values() if v.size])
    if allv.size == 0:
        raise EmptySampleError("no valid values to histogram")
    edges = np.histogram_bin_edges(allv, bins=bins)
    rows = []
    for name, v in vals.items():
        dens, _ = np.histogram(v, bins=edges, density=True)
        for lo, hi, d in zip(edges[:-1], edges[1:], dens):
            rows.append({"map": name, "bin_lo": lo, "bin_hi": hi, "density": d})
    return pd.DataFrame(rows)
