"""Symmetric pairwise motion estimation.

Two parameterizations share the objectives in ``losses``:

* ``direct_field``: the two flow fields themselves are optimised per pair,
  coarse to fine over an average-pooling pyramid.
* ``siamese_net``: a small weight-shared convolutional network predicts both
  flows (see ``network``); ``estimate_pair`` then runs inference only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import losses as L
from .flow import FlowField, upsample_flow, warp
from .losses import LossWeights
from .optim import Adam
from .tensor import NonFiniteError, Tensor, pool_matrix

log = logging.getLogger(__name__)

PARAMETERIZATIONS = ("direct_field", "siamese_net")


class DivergenceError(RuntimeError):
    """The objective became non-finite during optimisation."""


@dataclass(frozen=True)
class EstimatorConfig:
    levels: int = 3
    iters_per_level: int = 150
    learning_rate: float = 1e-2
    weights: LossWeights = field(default_factory=LossWeights.baseline)
    parameterization: str = "direct_field"
    seed: int = 0
    recon_every: int = 1  # recompute VAE reconstructions every k iterations
    grad_smoothing: float = 6.0  # Gaussian sigma (level pixels) applied to field gradients
    # network-only settings
    channels: tuple[int, int, int] = (8, 16, 32)
    net_learning_rate: float = 1e-3
    batch_size: int = 4
    epochs: int = 20

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if self.learning_rate <= 0 or self.net_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.grad_smoothing < 0:
            raise ValueError("grad_smoothing must be non-negative")
        if self.recon_every < 1:
            raise ValueError("recon_every must be >= 1")

    def with_(self, **kw) -> "EstimatorConfig":
        return replace(self, **kw)


@dataclass
class MotionPair:
    f12: FlowField
    f21: FlowField
    final_loss: float
    iterations_run: int
    history: list[dict] = field(default_factory=list)
    converged: bool = True


@dataclass
class AnatomyPrior:
    """Corrected masks for both frames plus the frozen shape model."""

    m1: np.ndarray
    m2: np.ndarray
    vae: object | None = None  # shape_prior.VaeModel; None disables the recon term


def _pool(img: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        h, w = img.shape[-2:]
        img = pool_matrix(h) @ img @ pool_matrix(w).T
    return img


def _window_converged(losses: list[float], window: int = 50, slack: float = 1e-3) -> bool:
    """True when every ``window``-iteration span ends no higher than it started."""
    for s in range(0, len(losses) - window, window):
        a, b = losses[s], losses[s + window]
        if b > a + slack * max(abs(a), 1e-12):
            return False
    return True


def _reconstruct(vae, warped_masks: np.ndarray, full: tuple[int, int], level: int) -> np.ndarray:
    """VAE reconstructions (no gradient) of warped masks given at pyramid ``level``."""
    from .shape_prior import vae_correct_batch
    from .tensor import upsample_matrix

    m = warped_masks
    if level:
        f = 2 ** level
        h, w = m.shape[-2:]
        m = np.clip(upsample_matrix(h, f) @ m @ upsample_matrix(w, f).T, 0.0, 1.0)
    rec = vae_correct_batch(vae, m)
    return _pool(rec, level)


def estimate_pair(
    i1,
    i2,
    config: EstimatorConfig,
    anatomy: AnatomyPrior | None = None,
    params=None,
    init: tuple[FlowField, FlowField] | None = None,
    single_scale: bool = False,
) -> MotionPair:
    """Estimate (F12, F21) for a normalised image pair.

    Without ``anatomy`` the baseline objective is minimised; with it, the
    anatomy and reconstruction terms are added (their weights come from
    ``config.weights``). Reconstructions are recomputed from the current warped
    masks every ``config.recon_every`` iterations and treated as constants.
    """
    i1 = np.asarray(i1, dtype=np.float64)
    i2 = np.asarray(i2, dtype=np.float64)
    if i1.shape != i2.shape or i1.ndim != 2:
        raise ValueError(f"estimate_pair: grid mismatch {i1.shape} vs {i2.shape}")
    if anatomy is not None and (anatomy.m1.shape != i1.shape or anatomy.m2.shape != i1.shape):
        raise ValueError("estimate_pair: mask grid differs from image grid")
    if config.parameterization == "siamese_net":
        if params is None:
            raise ValueError("siamese_net estimation needs trained network parameters")
        from .network import predict_pair

        f12, f21 = predict_pair(params, i1, i2)
        terms = L.objective_terms(i1, i2, f12, f21, config.weights)
        return MotionPair(f12, f21, float(L.combine(terms, config.weights).item()), 0)
    return _estimate_direct(i1, i2, config, anatomy, init, single_scale)


def _estimate_direct(i1, i2, config, anatomy, init, single_scale) -> MotionPair:
    h, w = i1.shape
    levels = 1 if single_scale else config.levels
    while levels > 1 and (h % 2 ** (levels - 1) or w % 2 ** (levels - 1)):
        levels -= 1
    weights = config.weights
    use_masks = anatomy is not None and (weights.lambda_anat > 0 or weights.lambda_recon > 0)
    use_recon = use_masks and anatomy.vae is not None and weights.lambda_recon > 0

    history: list[dict] = []
    total_iters = 0
    if init is not None:
        flows = [_pool(init[0].numpy(), levels - 1) / 2 ** (levels - 1),
                 _pool(init[1].numpy(), levels - 1) / 2 ** (levels - 1)]
    else:
        s = 2 ** (levels - 1)
        flows = [np.zeros((2, h // s, w // s)), np.zeros((2, h // s, w // s))]
    final = np.inf
    finest: list[float] = []
    for level in range(levels - 1, -1, -1):
        a = _pool(i1, level)
        b = _pool(i2, level)
        p12 = Tensor(flows[0], requires_grad=True)
        p21 = Tensor(flows[1], requires_grad=True)
        f12, f21 = FlowField(p12), FlowField(p21)
        opt = Adam([p12, p21], lr=config.learning_rate)
        if use_masks:
            m1 = _pool(anatomy.m1.astype(np.float64), level)
            m2 = _pool(anatomy.m2.astype(np.float64), level)
        recon = None
        trace = []
        for it in range(config.iters_per_level):
            if use_recon and it % config.recon_every == 0:
                mw = np.stack([warp(m1, f12.detach()).warped.data, warp(m2, f21.detach()).warped.data])
                recon = _reconstruct(anatomy.vae, mw, (h, w), level)
            try:
                if use_masks:
                    terms = L.objective_terms(
                        a, b, f12, f21, weights, m1, m2,
                        None if recon is None else recon[0], None if recon is None else recon[1],
                    )
                else:
                    terms = L.objective_terms(a, b, f12, f21, weights)
                loss = L.combine(terms, weights)
                opt.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise DivergenceError(f"objective diverged at level {level}, iteration {it}") from exc
            final = loss.item()
            trace.append(final)
            history.append({"level": level, "iteration": total_iters, "loss": final,
                            **{k: v.item() for k, v in terms.items()}})
            if config.grad_smoothing > 0:
                for p in (p12, p21):
                    p.grad = ndimage.gaussian_filter(p.grad, (0, config.grad_smoothing, config.grad_smoothing), mode="nearest")
            opt.step()
            total_iters += 1
        flows = [p12.data, p21.data]
        if level == 0:
            finest = trace
        else:
            flows = [upsample_flow(f) for f in flows]
    # final loss at the returned flows
    f12, f21 = FlowField(Tensor(flows[0])), FlowField(Tensor(flows[1]))
    if use_masks:
        rec = None
        if use_recon:
            mw = np.stack([warp(anatomy.m1.astype(float), f12).warped.data,
                           warp(anatomy.m2.astype(float), f21).warped.data])
            rec = _reconstruct(anatomy.vae, mw, (h, w), 0)
        terms = L.objective_terms(i1, i2, f12, f21, weights, anatomy.m1.astype(float), anatomy.m2.astype(float),
                                  None if rec is None else rec[0], None if rec is None else rec[1])
    else:
        terms = L.objective_terms(i1, i2, f12, f21, weights)
    final = L.combine(terms, weights).item()
    if not np.isfinite(final):
        raise DivergenceError("final objective is not finite")
    converged = _window_converged(finest)
    if not converged:
        log.debug("direct-field estimation did not decrease monotonically over a 50-iteration window")
    return MotionPair(f12, f21, final, total_iters, history, converged)
