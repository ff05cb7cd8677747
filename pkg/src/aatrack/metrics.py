"""Overlap and surface-distance metrics, and the paired signed-rank test."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    hd_mm: float
    assd_mm: float


def _binary(m) -> np.ndarray:
    a = np.asarray(m)
    if a.dtype != bool:
        a = a >= 0.5
    return a


def _same_grid(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")


def dice(a, b) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    a, b = _binary(a), _binary(b)
    _same_grid(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 8-neighbour or lying on the image edge."""
    m = _binary(mask)
    padded = np.pad(m, 1, constant_values=False)
    h, w = m.shape
    interior = np.ones_like(m)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy or dx:
                interior &= padded[1 + dy: 1 + dy + h, 1 + dx: 1 + dx + w]
    return m & ~interior


def _boundary_points(mask) -> np.ndarray:
    pts = np.argwhere(boundary(mask))
    if len(pts) == 0:
        raise ValueError("surface distance of an empty mask is undefined")
    return pts.astype(np.int64)


def _min_distances(pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # squared distances are exact integers; one sqrt per minimum keeps results exact
    min_a = np.empty(len(pa), dtype=np.int64)
    min_b = np.full(len(pb), np.iinfo(np.int64).max)
    for s in range(0, len(pa), 512):
        blk = pa[s: s + 512]
        d2 = (blk[:, None, 0] - pb[None, :, 0]) ** 2 + (blk[:, None, 1] - pb[None, :, 1]) ** 2
        min_a[s: s + 512] = d2.min(axis=1)
        np.minimum(min_b, d2.min(axis=0), out=min_b)
    return np.sqrt(min_a.astype(np.float64)), np.sqrt(min_b.astype(np.float64))


def hausdorff(a, b, spacing: float = 1.0) -> float:
    a, b = _binary(a), _binary(b)
    _same_grid(a, b)
    da, db = _min_distances(_boundary_points(a), _boundary_points(b))
    return float(max(da.max(), db.max()) * spacing)


def assd(a, b, spacing: float = 1.0) -> float:
    a, b = _binary(a), _binary(b)
    _same_grid(a, b)
    da, db = _min_distances(_boundary_points(a), _boundary_points(b))
    return float((da.sum() + db.sum()) / (len(da) + len(db)) * spacing)


def evaluate_masks(pred, truth, spacing: float = 1.0) -> MetricReport:
    a, b = _binary(pred), _binary(truth)
    _same_grid(a, b)
    da, db = _min_distances(_boundary_points(a), _boundary_points(b))
    return MetricReport(
        dsc=dice(a, b),
        hd_mm=float(max(da.max(), db.max()) * spacing),
        assd_mm=float((da.sum() + db.sum()) / (len(da) + len(db)) * spacing),
    )


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided p-value of the paired Wilcoxon signed-rank test.

    Zero differences are dropped; the statistic uses average ranks for ties and
    the normal approximation with the tie-corrected variance (no continuity
    correction).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("wilcoxon: x and y must be 1-D and of equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n < 6:
        raise ValueError(f"wilcoxon: need at least 6 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        raise ValueError("wilcoxon: zero variance")
    z = (w_plus - mean) / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(abs(z))))
