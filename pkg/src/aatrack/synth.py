"""Synthetic cine phantoms with analytic ground-truth motion.

The "myocardium" is a C-shaped elliptical band around a bright cavity on a
textured background. Frames are rendered analytically by pulling each pixel
back through a time-dependent radial contraction, so ground-truth flows are
exact under the backward-warp convention. An optional dark disc inside the
cavity (the distractor) has myocardium-like intensity, hangs off the inner
wall and thickens as the wall contracts. It never belongs to the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cine import CineSequence
from .flow import FlowField

BACKGROUND = 0.45
BLOOD = 0.85
WALL = 0.2
EDGE = 0.7  # px, width of the tanh edges


@dataclass(frozen=True)
class Shape:
    """C-shaped band: elliptical radius s in [inner, inner + thickness] outside the gap."""

    center: tuple[float, float]
    inner: float
    thickness: float
    aspect: float = 1.0  # row-axis / col-axis scale of the ellipse
    orientation: float = 0.0  # radians; direction the gap faces
    gap: float = math.radians(70.0)

    def coords(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Elliptical radius and signed angular offset from the gap direction."""
        dy = rows - self.center[0]
        dx = cols - self.center[1]
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        along = dx * c + dy * s
        across = -dx * s + dy * c
        sa = math.sqrt(self.aspect)
        radius = np.hypot(along * sa, across / sa)
        ang = np.arctan2(across, along)
        return radius, ang

    def indicator(self, rows, cols) -> np.ndarray:
        r, ang = self.coords(rows, cols)
        return (r >= self.inner) & (r <= self.inner + self.thickness) & (np.abs(ang) > self.gap / 2)

    def soft(self, rows, cols) -> tuple[np.ndarray, np.ndarray]:
        """Smooth wall and blood-pool memberships."""
        r, ang = self.coords(rows, cols)
        outer = self.inner + self.thickness
        band = _step(r - self.inner) * _step(outer - r)
        open_ = _step(np.maximum(r, 1.0) * (np.abs(ang) - self.gap / 2))
        return band * open_, _step(outer - r)


def _step(d):
    return 0.5 * (1.0 + np.tanh(d / EDGE))


def render_shape_mask(size: int, shape: Shape) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    return shape.indicator(rr, cc)


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    frames: int = 12
    contraction_amplitude: float = 0.25  # peak inward motion of the inner wall, fraction of its radius
    inner_radius: float = 12.0
    wall_thickness: float = 5.0
    gap_deg: float = 70.0
    jitter: bool = True  # randomise pose/size around the nominal values from the seed
    distractor: bool = False
    distractor_radius: float = 3.0
    distractor_contrast: float = 1.0  # 1 = same intensity as the wall
    distractor_follow: float = 1.0  # multiple of the wall motion at the attachment point
    distractor_overlap: float = 1.0  # px the disc overlaps the inner wall
    distractor_growth: float = 3.0  # relative radius increase at peak contraction
    texture_noise: float = 0.05
    drift: float = 0.01  # multiplicative gain change per frame
    pixel_spacing: float = 1.5
    seed: int = 0

    def validate(self) -> None:
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.size < 16:
            raise ValueError("size must be >= 16")
        if not 0 <= self.contraction_amplitude < 0.6:
            raise ValueError("contraction_amplitude must lie in [0, 0.6) so the deformation stays invertible")
        peak = self.contraction_amplitude * (self.inner_radius * 1.15) * max(1.0, self.distractor_follow if self.distractor else 1.0)
        if peak >= 0.25 * self.size:
            raise ValueError(
                f"contraction_amplitude too large: peak displacement {peak:.1f} px must stay below "
                f"25% of the grid ({0.25 * self.size:.1f} px)"
            )
        if self.inner_radius <= 0 or self.wall_thickness <= 0:
            raise ValueError("inner_radius and wall_thickness must be positive")
        if self.inner_radius * 1.15 + self.wall_thickness * 1.2 + 4 > self.size / 2:
            raise ValueError("shape does not fit in the grid")


@dataclass
class PhantomCine:
    cine: CineSequence
    masks: list[np.ndarray]
    pairwise_flows: list[FlowField]
    composite_flows: list[FlowField]
    gains: list[float]
    shape: Shape
    config: PhantomConfig
    amplitudes: list[float] = field(default_factory=list)


class RadialContraction:
    """r -> r - a * R * rho(r / R) with rho(s) = s exp((1 - s^2) / 2).

    rho peaks at s = 1 with value 1, so the inner wall (radius R) moves inward
    by a * R and the map is the identity at the centre and far away.
    Monotone (hence invertible) for a < exp(-1/2).
    """

    def __init__(self, center, radius: float, amplitude: float):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.amplitude = float(amplitude)

    def _radial(self, r):
        s = r / self.radius
        return r - self.amplitude * self.radius * s * np.exp(0.5 * (1.0 - s * s))

    def _radial_inverse(self, rp):
        r = np.array(rp, dtype=np.float64)
        for _ in range(60):
            s = r / self.radius
            e = np.exp(0.5 * (1.0 - s * s))
            g = r - self.amplitude * self.radius * s * e - rp
            dg = 1.0 - self.amplitude * e * (1.0 - s * s)
            step = g / dg
            r = r - step
            if np.abs(step).max() < 1e-13:
                break
        return r

    def _apply(self, rows, cols, fn):
        dy = rows - self.center[0]
        dx = cols - self.center[1]
        r = np.hypot(dy, dx)
        rn = fn(r)
        scale = np.divide(rn, r, out=np.ones_like(r), where=r > 1e-12)
        if self.amplitude and np.any(r <= 1e-12):
            # derivative of the radial map at the origin
            scale = np.where(r > 1e-12, scale, 1.0 - self.amplitude * math.exp(0.5))
        return self.center[0] + dy * scale, self.center[1] + dx * scale

    def forward(self, rows, cols):
        return self._apply(rows, cols, self._radial)

    def inverse(self, rows, cols):
        return self._apply(rows, cols, self._radial_inverse)


class _Texture:
    """Sum of random plane waves with wavelengths 5-12 px, standard deviation ``sigma``."""

    def __init__(self, rng: np.random.Generator, sigma: float, modes: int = 24):
        lam = rng.uniform(5.0, 12.0, modes)
        theta = rng.uniform(0, 2 * np.pi, modes)
        k = 2 * np.pi / lam
        self.ky = k * np.sin(theta)
        self.kx = k * np.cos(theta)
        self.phase = rng.uniform(0, 2 * np.pi, modes)
        self.amp = sigma * math.sqrt(2.0 / modes)

    def __call__(self, rows, cols):
        arg = rows[..., None] * self.ky + cols[..., None] * self.kx + self.phase
        return self.amp * np.cos(arg).sum(axis=-1)


def _contraction_profile(frames: int, amplitude: float) -> list[float]:
    # contract to mid-sequence, then relax; the window closes at ~35% of peak
    # contraction so the last frame still differs from ED
    if frames == 1:
        return [0.0]
    return [amplitude * math.sin(0.8 * math.pi * n / (frames - 1)) ** 2 for n in range(frames)]


def _sample_shape(cfg: PhantomConfig, rng: np.random.Generator) -> Shape:
    c = cfg.size / 2.0 - 0.5
    if not cfg.jitter:
        return Shape((c, c), cfg.inner_radius, cfg.wall_thickness, 1.0, math.pi / 2, math.radians(cfg.gap_deg))
    return Shape(
        center=(c + rng.uniform(-2, 2), c + rng.uniform(-2, 2)),
        inner=cfg.inner_radius * rng.uniform(0.9, 1.1),
        thickness=cfg.wall_thickness * rng.uniform(0.85, 1.15),
        aspect=rng.uniform(0.85, 1.15),
        orientation=rng.uniform(0, 2 * np.pi),
        gap=math.radians(cfg.gap_deg) * rng.uniform(0.8, 1.2),
    )


def _inner_wall_distance(shape: Shape, direction: float) -> float:
    """Distance from the centre to the inner wall along a world-frame direction."""
    ey, ex = math.sin(direction), math.cos(direction)
    r, _ = shape.coords(np.array(shape.center[0] + ey), np.array(shape.center[1] + ex))
    return shape.inner / float(r)


def generate_phantom(config: PhantomConfig) -> PhantomCine:
    config.validate()
    rng = np.random.default_rng(config.seed)
    shape = _sample_shape(config, rng)
    texture = _Texture(rng, config.texture_noise)
    size = config.size
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    amps = _contraction_profile(config.frames, config.contraction_amplitude)
    radius = shape.inner
    maps = [RadialContraction(shape.center, radius, a) for a in amps]

    if config.distractor:
        # opposite the gap, attached to the inner wall at ED
        direction = shape.orientation + math.pi + rng.uniform(-0.6, 0.6)
        ey, ex = math.sin(direction), math.cos(direction)
        wall_r = _inner_wall_distance(shape, direction)
        p0 = (shape.center[0] + wall_r * ey, shape.center[1] + wall_r * ex)
        peak_amp = max(max(amps), 1e-12)

    frames, masks, gains = [], [], []
    for n, phi in enumerate(maps):
        pr, pc = phi.inverse(rr, cc)
        wall, blood = shape.soft(pr, pc)
        level = BACKGROUND + (BLOOD - BACKGROUND) * blood
        level = level + (WALL - level) * wall
        img = level + texture(pr, pc)
        if config.distractor:
            # the disc hangs off the moving attachment point and thickens with contraction
            tr, tc = phi.forward(np.array(p0[0]), np.array(p0[1]))
            ay = p0[0] + config.distractor_follow * (float(tr) - p0[0])
            ax = p0[1] + config.distractor_follow * (float(tc) - p0[1])
            rad = config.distractor_radius * (1.0 + config.distractor_growth * amps[n] / peak_amp)
            cy, cx = ay - (rad - config.distractor_overlap) * ey, ax - (rad - config.distractor_overlap) * ex
            disc = _step(rad - np.hypot(rr - cy, cc - cx))
            img = img + (WALL - img) * disc * config.distractor_contrast
        gain = (1.0 + config.drift) ** n
        frames.append(img * gain)
        gains.append(gain)
        masks.append(shape.indicator(pr, pc))

    pairwise = []
    composite = []
    for n in range(1, config.frames):
        pr, pc = maps[n].inverse(rr, cc)
        composite.append(FlowField.from_array(np.stack([pc - cc, pr - rr])))
        qr, qc = maps[n - 1].forward(pr, pc)
        pairwise.append(FlowField.from_array(np.stack([qc - cc, qr - rr])))

    cine = CineSequence(
        frames=frames,
        pixel_spacing=config.pixel_spacing,
        ed_mask=masks[0].copy(),
        truth_masks=masks,
        truth_flows=pairwise,
        cine_id=f"phantom_{config.seed:04d}",
    )
    return PhantomCine(cine, masks, pairwise, composite, gains, shape, config, amps)


def translation_pair(dy: float, dx: float, config: PhantomConfig | None = None) -> tuple[np.ndarray, np.ndarray, FlowField]:
    """Static phantom frame and the same scene shifted by (dy, dx), both rendered analytically.

    Returns (i1, i2, f12) where ``warp(i1, f12)`` reproduces i2, so f12 is
    the constant flow (-dx, -dy).
    """
    cfg = config or PhantomConfig()
    rng = np.random.default_rng(cfg.seed)
    shape = _sample_shape(cfg, rng)
    texture = _Texture(rng, cfg.texture_noise)
    rr, cc = np.mgrid[0:cfg.size, 0:cfg.size].astype(np.float64)

    def render(r, c):
        wall, blood = shape.soft(r, c)
        level = BACKGROUND + (BLOOD - BACKGROUND) * blood
        return level + (WALL - level) * wall + texture(r, c)

    return render(rr, cc), render(rr - dy, cc - dx), FlowField.constant(cfg.size, cfg.size, -dx, -dy)


# -- masks for the shape prior ----------------------------------------------

@dataclass(frozen=True)
class MaskFamilyConfig:
    size: int = 64
    inner_range: tuple[float, float] = (7.0, 15.0)
    thickness_range: tuple[float, float] = (3.0, 8.0)
    aspect_range: tuple[float, float] = (0.8, 1.25)
    gap_deg_range: tuple[float, float] = (45.0, 100.0)
    center_jitter: float = 3.0


def random_shape(cfg: MaskFamilyConfig, rng: np.random.Generator) -> Shape:
    c = cfg.size / 2.0 - 0.5
    return Shape(
        center=(c + rng.uniform(-cfg.center_jitter, cfg.center_jitter),
                c + rng.uniform(-cfg.center_jitter, cfg.center_jitter)),
        inner=rng.uniform(*cfg.inner_range),
        thickness=rng.uniform(*cfg.thickness_range),
        aspect=rng.uniform(*cfg.aspect_range),
        orientation=rng.uniform(0, 2 * np.pi),
        gap=math.radians(rng.uniform(*cfg.gap_deg_range)),
    )


def generate_mask_family(count: int, config: MaskFamilyConfig | None = None, seed: int = 0) -> list[np.ndarray]:
    """Random C-shaped masks, each a single non-empty 8-connected component."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = config or MaskFamilyConfig()
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        m = render_shape_mask(cfg.size, random_shape(cfg, rng))
        if m.any() and count_components(m) == 1:
            out.append(m)
    return out


_EIGHT = np.ones((3, 3), dtype=bool)


def count_components(mask) -> int:
    return int(ndimage.label(np.asarray(mask) >= 0.5, structure=_EIGHT)[1])


def _disc(size: int, center, radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius


def corrupt_mask(mask, kind: str, seed: int = 0, size: float | None = None) -> np.ndarray:
    """Seeded corruption of a binary mask.

    ``blob`` adds one detached disc (radius 5 px by default, about the size
    of a papillary muscle next to the wall), ``hole`` cuts a disc out of the mask,
    ``boundary_noise`` flips a random subset of pixels on either side of the
    boundary.
    """
    m = np.asarray(mask) >= 0.5
    rng = np.random.default_rng(seed)
    h, w = m.shape
    if kind == "blob":
        radius = 5.0 if size is None else size
        far = ndimage.distance_transform_edt(~m)
        ok = far > radius + 2.0
        rr, cc = np.mgrid[0:h, 0:w]
        ok &= (rr > radius + 1) & (rr < h - radius - 2) & (cc > radius + 1) & (cc < w - radius - 2)
        # prefer positions close to the mask, where a leak would appear
        cand = np.argwhere(ok & (far < radius + 6.0))
        if len(cand) == 0:
            cand = np.argwhere(ok)
        if len(cand) == 0:
            raise ValueError("no room for a detached blob")
        cy, cx = cand[rng.integers(len(cand))]
        return m | _disc(h, (cy, cx), radius)
    if kind == "hole":
        radius = 2.5 if size is None else size
        pts = np.argwhere(ndimage.binary_erosion(m) if ndimage.binary_erosion(m).any() else m)
        cy, cx = pts[rng.integers(len(pts))]
        return m & ~_disc(h, (cy, cx), radius)
    if kind == "boundary_noise":
        frac = 0.3 if size is None else size
        ring = ndimage.binary_dilation(m, _EIGHT) & ~ndimage.binary_erosion(m, _EIGHT)
        flip = ring & (rng.random(m.shape) < frac)
        return m ^ flip
    raise ValueError(f"unknown corruption kind {kind!r}")
