"""Training objectives for pairwise motion estimation and the shape VAE.

Image and mask residuals are mean absolute errors; every term uses mean
reduction so the weights do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .flow import FlowField, warp
from .tensor import Tensor, as_tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_h: float = 0.02
    lambda_anat: float = 0.0
    lambda_recon: float = 0.0
    huber_delta: float = 1.0
    image_norm: str = "l1"  # "l2" switches image residuals to MSE

    def __post_init__(self):
        if min(self.lambda_h, self.lambda_anat, self.lambda_recon) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")
        if self.image_norm not in ("l1", "l2"):
            raise ValueError(f"image_norm must be 'l1' or 'l2', got {self.image_norm!r}")

    @classmethod
    def baseline(cls) -> "LossWeights":
        return cls(lambda_h=0.02)

    @classmethod
    def aatracker(cls) -> "LossWeights":
        return cls(lambda_h=0.04, lambda_anat=6.0, lambda_recon=1.2)

    def with_(self, **kw) -> "LossWeights":
        return replace(self, **kw)

    @property
    def uses_anatomy(self) -> bool:
        return self.lambda_anat > 0 or self.lambda_recon > 0


def _region_mean(x: Tensor, region) -> Tensor:
    if region is None:
        return x.mean()
    r = np.broadcast_to(np.asarray(region, dtype=np.float64), x.shape)
    total = r.sum()
    if total <= 0:
        raise ValueError("empty evaluation region")
    return T.mul(x, Tensor(r)).sum() * (1.0 / total)


def residual(a, b, norm: str = "l1", region=None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")
    d = a - b
    return _region_mean(T.abs(d) if norm == "l1" else T.square(d), region)


def _check_grids(*items):
    grids = set()
    for x in items:
        grids.add(x.grid if isinstance(x, FlowField) else tuple(as_tensor(x).shape[-2:]))
    if len(grids) != 1:
        raise ValueError(f"grid mismatch among inputs: {sorted(grids)}")


def _check_mask(m) -> None:
    d = as_tensor(m).data
    if d.min() < 0 or d.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")


def consistency_loss(i1, i2, f12: FlowField, f21: FlowField, norm: str = "l1", region=None) -> Tensor:
    """|I1 - F21(x)I2| + |I2 - F12(x)I1|, each a mean over the grid."""
    _check_grids(i1, i2, f12, f21)
    i1w = warp(i1, f12).warped
    i2w = warp(i2, f21).warped
    return residual(i1, i2w, norm, region) + residual(i2, i1w, norm, region)


def huber_smoothness(flow: FlowField, delta: float = 1.0) -> Tensor:
    """Mean over pixels and components of huber(d/dx F) + huber(d/dy F).

    Forward differences are zero on the last row/column.
    """
    dx = T.huber(T.forward_diff(flow.data, axis=2), delta)
    dy = T.huber(T.forward_diff(flow.data, axis=1), delta)
    return (dx + dy).mean()


def baseline_objective(i1, i2, f12: FlowField, f21: FlowField, weights: LossWeights, region=None) -> Tensor:
    terms = objective_terms(i1, i2, f12, f21, weights, region=region)
    return combine(terms, weights)


def anatomy_loss(m1, m2, f12: FlowField, f21: FlowField, region=None) -> Tensor:
    """|M1 - F21(x)M2| + |M2 - F12(x)M1|, mean absolute differences."""
    _check_grids(m1, m2, f12, f21)
    _check_mask(m1)
    _check_mask(m2)
    m1w = warp(m1, f12).warped
    m2w = warp(m2, f21).warped
    return residual(m1, m2w, "l1", region) + residual(m2, m1w, "l1", region)


def vae_consistency_loss(m1_warped, m2_warped, m1_recon, m2_recon) -> Tensor:
    """|M1' - recon(M1')| + |M2' - recon(M2')|; reconstructions are constants."""
    _check_grids(m1_warped, m2_warped, m1_recon, m2_recon)
    r1 = Tensor(as_tensor(m1_recon).data)
    r2 = Tensor(as_tensor(m2_recon).data)
    return residual(m1_warped, r1) + residual(m2_warped, r2)


def objective_terms(
    i1, i2, f12: FlowField, f21: FlowField, weights: LossWeights,
    m1=None, m2=None, m1_recon=None, m2_recon=None, region=None,
) -> dict[str, Tensor]:
    """Individual terms of the anatomy-aware objective.

    Mask terms are only built when masks are given; ``recon`` additionally
    needs the reconstructions of the warped masks.
    """
    _check_grids(i1, i2, f12, f21)
    terms = {
        "cons": consistency_loss(i1, i2, f12, f21, weights.image_norm, region),
        "huber": huber_smoothness(f12, weights.huber_delta) + huber_smoothness(f21, weights.huber_delta),
    }
    if m1 is not None and m2 is not None:
        _check_grids(i1, m1, m2)
        _check_mask(m1)
        _check_mask(m2)
        m1w = warp(m1, f12).warped
        m2w = warp(m2, f21).warped
        terms["anat"] = residual(m1, m2w, "l1", region) + residual(m2, m1w, "l1", region)
        if m1_recon is not None and m2_recon is not None:
            terms["recon"] = vae_consistency_loss(m1w, m2w, m1_recon, m2_recon)
    return terms


def combine(terms: dict[str, Tensor], weights: LossWeights) -> Tensor:
    total = terms["cons"] + weights.lambda_h * terms["huber"]
    if "anat" in terms and weights.lambda_anat:
        total = total + weights.lambda_anat * terms["anat"]
    if "recon" in terms and weights.lambda_recon:
        total = total + weights.lambda_recon * terms["recon"]
    return total


def aatracker_objective(i1, i2, f12, f21, m1, m2, m1_recon, m2_recon, weights: LossWeights, region=None) -> Tensor:
    terms = objective_terms(i1, i2, f12, f21, weights, m1, m2, m1_recon, m2_recon, region=region)
    return combine(terms, weights)


def kld_loss(mu, logvar) -> Tensor:
    """-0.5 * sum(1 + logvar - mu^2 - exp(logvar)) per sample, averaged over the batch.

    1-D inputs count as a single sample.
    """
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ValueError(f"kld: shape mismatch {mu.shape} vs {logvar.shape}")
    batch = mu.shape[0] if mu.ndim > 1 else 1
    inner = (logvar + 1.0) - T.square(mu) - T.exp(logvar)
    return inner.sum() * (-0.5 / batch)
