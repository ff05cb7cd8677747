"""Brute-force reference implementations used to freeze expected values.

Everything here is written with plain Python loops and shares no code with
the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv2d_loop(x, w, b, stride=1, pad=0):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = b[oi]
                    for ci in range(c):
                        for a in range(kh):
                            for e in range(kw):
                                acc += xp[ni, ci, i * stride + a, j * stride + e] * w[oi, ci, a, e]
                    out[ni, oi, i, j] = acc
    return out


def conv_transpose2d_loop(x, w, b, stride=1, pad=0):
    """Scatter form: every input pixel stamps the kernel onto the output."""
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    full = np.zeros((n, o, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    for oi in range(o):
                        for a in range(kh):
                            for e in range(kw):
                                full[ni, oi, i * stride + a, j * stride + e] += x[ni, ci, i, j] * w[ci, oi, a, e]
    ho, wo = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    out = full[:, :, pad:pad + ho, pad:pad + wo].copy()
    for oi in range(o):
        out[:, oi] += b[oi]
    return out


def bilinear(img, y, x):
    """Sample a 2-D array at (y, x) with border clamping."""
    h, w = img.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    y0 = min(int(math.floor(y)), h - 2)
    x0 = min(int(math.floor(x)), w - 2)
    fy, fx = y - y0, x - x0
    return ((1 - fy) * (1 - fx) * img[y0, x0] + (1 - fy) * fx * img[y0, x0 + 1]
            + fy * (1 - fx) * img[y0 + 1, x0] + fy * fx * img[y0 + 1, x0 + 1])


def warp_loop(img, flow):
    """flow is (2, H, W) with (u, v) = (column, row) displacement."""
    h, w = img.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = bilinear(img, i + flow[1, i, j], j + flow[0, i, j])
    return out


def track_point(flow, y, x):
    """Where a point of the target frame lands in the source frame."""
    return y + bilinear(flow[1], y, x), x + bilinear(flow[0], y, x)


def boundary_loop(mask):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, x = i + dy, j + dx
                    if not (0 <= y < h and 0 <= x < w) or not mask[y, x]:
                        out[i, j] = True
    return out


def surface_distances(a, b):
    """Per-point nearest distances from boundary(a) to boundary(b) and back, all pairs."""
    pa = [tuple(p) for p in np.argwhere(boundary_loop(a))]
    pb = [tuple(p) for p in np.argwhere(boundary_loop(b))]

    def nearest(p, others):
        return min(math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2) for q in others)

    return [nearest(p, pb) for p in pa], [nearest(q, pa) for q in pb]


def surface_distances_matrix(a, b):
    """Same as ``surface_distances`` via a full pairwise distance matrix (still O(n*m))."""
    pa = np.argwhere(boundary_loop(a)).astype(np.int64)
    pb = np.argwhere(boundary_loop(b)).astype(np.int64)
    d2 = ((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1).astype(np.float64)), np.sqrt(d2.min(axis=0).astype(np.float64))


def dice_loop(a, b):
    inter = na = nb = 0
    for va, vb in zip(a.reshape(-1), b.reshape(-1)):
        na += bool(va)
        nb += bool(vb)
        inter += bool(va) and bool(vb)
    return 1.0 if na + nb == 0 else 2.0 * inter / (na + nb)


def hausdorff_loop(a, b, spacing=1.0):
    da, db = surface_distances(a, b)
    return max(max(da), max(db)) * spacing


def assd_loop(a, b, spacing=1.0):
    da, db = surface_distances(a, b)
    return (sum(da) + sum(db)) / (len(da) + len(db)) * spacing


def average_ranks(values):
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def wilcoxon_normal(x, y):
    """Normal approximation with tie-corrected variance, no continuity correction."""
    d = [a - b for a, b in zip(x, y) if a != b]
    n = len(d)
    ranks = average_ranks([abs(v) for v in d])
    w = sum(r for r, v in zip(ranks, d) if v > 0)
    ties = {}
    for v in d:
        ties[abs(v)] = ties.get(abs(v), 0) + 1
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in ties.values()) / 48.0
    z = (w - n * (n + 1) / 4.0) / math.sqrt(var)
    return min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))


def wilcoxon_exact(x, y):
    """Two-sided p by enumerating all 2^n sign assignments of the ranks."""
    d = [a - b for a, b in zip(x, y) if a != b]
    n = len(d)
    ranks = average_ranks([abs(v) for v in d])
    mean = sum(ranks) / 2.0
    obs = abs(sum(r for r, v in zip(ranks, d) if v > 0) - mean)
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        w = sum(r for r, s in zip(ranks, signs) if s)
        hits += abs(w - mean) >= obs - 1e-12
    return hits / 2 ** n


def smooth_flow(rng, h, w, amplitude=2.5, modes=3):
    """Random low-frequency (2, H, W) flow."""
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((2, h, w))
    for ch in range(2):
        for _ in range(modes):
            ky, kx = rng.uniform(-2.5, 2.5, 2) * 2 * np.pi / np.array([h, w])
            out[ch] += rng.uniform(-1, 1) * np.cos(ky * rr + kx * cc + rng.uniform(0, 2 * np.pi))
        out[ch] *= amplitude / modes
    return out


def random_blob_mask(rng, h, w, fill=0.4):
    """Random binary mask from thresholded smoothed noise, never empty."""
    noise = rng.standard_normal((h, w))
    k = rng.integers(1, 4)
    for _ in range(k):
        noise = (noise + np.roll(noise, 1, 0) + np.roll(noise, -1, 0) + np.roll(noise, 1, 1) + np.roll(noise, -1, 1)) / 5
    m = noise > np.quantile(noise, 1 - fill)
    if not m.any():
        m[rng.integers(h), rng.integers(w)] = True
    return m
