"""Flow fields, the bilinear warp, and flow composition.

Convention (backward warping): a flow F on a target grid says where each
target pixel x samples the source, ``warped(x) = source(x + F(x))``. Channel
0 is the column displacement u, channel 1 the row displacement v, both in
pixels. Under this convention ``compose(f_ij, f_jk)(x) = f_ij(x + f_jk(x)) +
f_jk(x)`` carries a frame-k point back to frame i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, upsample_matrix


def grid_sample(source, flow) -> tuple[Tensor, float]:
    """Bilinearly sample ``source`` (N, C, H, W) at grid + ``flow`` (N, 2, H, W).

    Sample positions outside the image are clamped to the border. Returns the
    sampled tensor and the fraction of positions that needed clamping.
    """
    source, flow = as_tensor(source), as_tensor(flow)
    if source.ndim != 4 or flow.ndim != 4 or flow.shape[1] != 2:
        raise ValueError(f"grid_sample: bad shapes {source.shape}, {flow.shape}")
    n, c, h, w = source.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError(f"grid_sample: grid mismatch {source.shape} vs {flow.shape}")
    fd = flow.data
    jj = np.arange(w, dtype=np.float64)[None, :]
    ii = np.arange(h, dtype=np.float64)[:, None]
    x = jj + fd[:, 0]
    y = ii + fd[:, 1]
    in_x = (x >= 0) & (x <= w - 1)
    in_y = (y >= 0) & (y <= h - 1)
    oob = float(1.0 - (in_x & in_y).mean())
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(yc), max(h - 2, 0)).astype(np.intp)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]
    dx = 1 if w > 1 else 0
    dy = w if h > 1 else 0
    i00 = (y0 * w + x0).reshape(n, 1, h * w)
    flat = source.data.reshape(n, c, h * w)

    def gather(idx):
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, h * w)), axis=2).reshape(n, c, h, w)

    a = gather(i00)
    b = gather(i00 + dx)
    cc = gather(i00 + dy)
    d = gather(i00 + dy + dx)
    top = (1.0 - wx) * a + wx * b
    bot = (1.0 - wx) * cc + wx * d
    out = (1.0 - wy) * top + wy * bot

    def bw(g):
        gsrc = None
        if source.requires_grad:
            base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
            idx = np.concatenate(
                [(base + i00 + off).reshape(-1) for off in (0, dx, dy, dy + dx)]
            )
            wts = np.concatenate([
                (g * (1.0 - wx) * (1.0 - wy)).reshape(-1),
                (g * wx * (1.0 - wy)).reshape(-1),
                (g * (1.0 - wx) * wy).reshape(-1),
                (g * wx * wy).reshape(-1),
            ])
            gsrc = np.bincount(idx, weights=wts, minlength=n * c * h * w).reshape(n, c, h, w)
        gflow = None
        if flow.requires_grad:
            du = (g * ((1.0 - wy) * (b - a) + wy * (d - cc))).sum(axis=1) * in_x
            dv = (g * ((1.0 - wx) * (cc - a) + wx * (d - b))).sum(axis=1) * in_y
            gflow = np.stack([du, dv], axis=1)
        return gsrc, gflow

    return Tensor._make(out, (source, flow), bw, "grid_sample"), oob


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (u, v) displacement in pixels stored as a (2, H, W) tensor."""

    data: Tensor

    def __post_init__(self):
        t = as_tensor(self.data)
        if t.ndim != 3 or t.shape[0] != 2:
            raise ValueError(f"flow must have shape (2, H, W), got {t.shape}")
        object.__setattr__(self, "data", t)

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(Tensor(np.zeros((2, height, width))))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        arr = np.empty((2, height, width))
        arr[0] = u
        arr[1] = v
        return cls(Tensor(arr))

    @classmethod
    def from_array(cls, arr, requires_grad: bool = False) -> "FlowField":
        return cls(Tensor(arr, requires_grad=requires_grad))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def u(self) -> np.ndarray:
        return self.data.data[0]

    @property
    def v(self) -> np.ndarray:
        return self.data.data[1]

    def numpy(self) -> np.ndarray:
        return self.data.data

    def detach(self) -> "FlowField":
        return FlowField(Tensor(self.data.data.copy()))

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


@dataclass
class WarpResult:
    warped: Tensor
    oob_fraction: float


def warp(source, flow: FlowField) -> WarpResult:
    """Backward-warp an image (H, W) or stack (C, H, W) onto the flow's grid."""
    src = as_tensor(source)
    if src.ndim not in (2, 3):
        raise ValueError(f"warp: source must be (H, W) or (C, H, W), got {src.shape}")
    if src.shape[-2:] != flow.grid:
        raise ValueError(f"warp: source grid {src.shape[-2:]} != flow grid {flow.grid}")
    src4 = src.reshape((1, 1) + src.shape) if src.ndim == 2 else src.reshape((1,) + src.shape)
    out, oob = grid_sample(src4, flow.data.reshape((1,) + flow.data.shape))
    return WarpResult(out.reshape(src.shape), oob)


def compose(f_ij: FlowField, f_jk: FlowField) -> FlowField:
    """f_ij (+) f_jk = (f_ij warped by f_jk) + f_jk."""
    if f_ij.grid != f_jk.grid:
        raise ValueError(f"compose: grid mismatch {f_ij.grid} vs {f_jk.grid}")
    return FlowField(warp(f_ij.data, f_jk).warped + f_jk.data)


def composite_sequence(pairwise: list[FlowField]) -> list[FlowField]:
    """Frame-1-referenced composites [F_12, F_13, ..., F_1N] from consecutive flows."""
    if not pairwise:
        raise ValueError("composite_sequence needs at least one pairwise flow")
    grid = pairwise[0].grid
    for f in pairwise:
        if f.grid != grid:
            raise ValueError("composite_sequence: pairwise flows have different grids")
    out = [pairwise[0]]
    for f in pairwise[1:]:
        out.append(compose(out[-1], f))
    return out


def drift_compensate(composite: FlowField, correction: FlowField) -> FlowField:
    """Fold a residual correction, estimated between the composite-warped first
    frame and the actual frame, into the composite flow."""
    return compose(composite, correction)


def upsample_flow(flow: np.ndarray, factor: int = 2) -> np.ndarray:
    """Bilinear upsampling of a (2, h, w) flow with displacements scaled by ``factor``."""
    _, h, w = flow.shape
    ry, rx = upsample_matrix(h, factor), upsample_matrix(w, factor)
    return factor * np.matmul(np.matmul(ry, flow), rx.T)
