"""Sequence-level myocardium tracking.

Motion is estimated only between neighbouring frames; composites are always
referred back to frame 0 (ED) and the ED annotation is warped by the final
composite, so binarisation error never accumulates across frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cine import CineSequence, normalize
from .estimator import AnatomyPrior, DivergenceError, EstimatorConfig, MotionPair, estimate_pair
from .flow import FlowField, composite_sequence, drift_compensate, warp
from .metrics import MetricReport, evaluate_masks


class TrackingError(RuntimeError):
    def __init__(self, frame: int, message: str):
        super().__init__(f"frame {frame}: {message}")
        self.frame = frame


@dataclass
class TrackingResult:
    pairwise: list[FlowField]
    composites: list[FlowField]
    compensated: list[FlowField] | None
    tracked_masks: list[np.ndarray]
    soft_masks: list[np.ndarray] = field(default_factory=list)
    pair_results: list[MotionPair] = field(default_factory=list)

    @property
    def final_flows(self) -> list[FlowField]:
        return self.compensated if self.compensated is not None else self.composites


def _estimate(i1, i2, config, anatomy, params, frame, single_scale=False) -> MotionPair:
    try:
        return estimate_pair(i1, i2, config, anatomy=anatomy, params=params, single_scale=single_scale)
    except DivergenceError as exc:
        raise TrackingError(frame, str(exc)) from exc


def track_sequence(
    cine: CineSequence,
    config: EstimatorConfig,
    params=None,
    compensate: bool = True,
    labels: list[np.ndarray] | None = None,
    vae=None,
) -> TrackingResult:
    """Track the ED mask through the cine.

    ``labels`` (one corrected mask per frame) switch the pairwise and
    compensation estimates to the anatomy-aware objective; ``vae`` enables the
    reconstruction term. Without labels the baseline objective is used.
    """
    if labels is not None and len(labels) != len(cine):
        raise ValueError("need one label mask per frame")
    frames = [normalize(f) for f in cine.frames]
    ed = cine.ed_mask.astype(np.float64)

    pair_results = []
    for n in range(1, len(frames)):
        anatomy = AnatomyPrior(labels[n - 1], labels[n], vae) if labels is not None else None
        pair_results.append(_estimate(frames[n - 1], frames[n], config, anatomy, params, n))
    pairwise = [p.f12 for p in pair_results]
    composites = composite_sequence(pairwise)

    compensated = None
    if compensate:
        compensated = []
        for n, comp in enumerate(composites, start=1):
            warped_ref = warp(frames[0], comp).warped.data
            anatomy = None
            if labels is not None:
                anatomy = AnatomyPrior(np.clip(warp(ed, comp).warped.data, 0, 1), labels[n], vae)
            delta = _estimate(warped_ref, frames[n], config, anatomy, params, n, single_scale=True)
            compensated.append(drift_compensate(comp, delta.f12))

    final = compensated if compensated is not None else composites
    soft = [ed] + [np.clip(warp(ed, f).warped.data, 0.0, 1.0) for f in final]
    masks = [s >= 0.5 for s in soft]
    return TrackingResult(pairwise, composites, compensated, masks, soft, pair_results)


def weak_labels_from_result(result: TrackingResult, vae) -> list[np.ndarray]:
    """VAE-corrected (soft) version of every tracked mask, frame 0 included."""
    from .shape_prior import vae_correct_batch

    return list(vae_correct_batch(vae, np.stack([m.astype(np.float64) for m in result.tracked_masks])))


def prepare_weak_labels(cines: list[CineSequence], config: EstimatorConfig, vae, params=None,
                        compensate: bool = True) -> list[list[np.ndarray]]:
    """Baseline-track each cine from its ED annotation and VAE-correct every tracked mask.

    Only frames and the ED mask are read; ground truth is stripped first.
    """
    base = config.with_(weights=config.weights.with_(lambda_anat=0.0, lambda_recon=0.0))
    out = []
    for cine in cines:
        res = track_sequence(cine.weak_view(), base, params=params, compensate=compensate)
        out.append(weak_labels_from_result(res, vae))
    return out


@dataclass
class MetricTable:
    cine_id: str
    frames: list[int]
    reports: list[MetricReport]

    def _col(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.reports])

    def mean(self) -> MetricReport:
        return MetricReport(*(float(self._col(k).mean()) for k in ("dsc", "hd_mm", "assd_mm")))

    def std(self) -> MetricReport:
        return MetricReport(*(float(self._col(k).std()) for k in ("dsc", "hd_mm", "assd_mm")))

    def summary(self) -> str:
        m, s = self.mean(), self.std()
        return f"{m.dsc:.3f} ({s.dsc:.3f}), {m.hd_mm:.3f} ({s.hd_mm:.3f}), {m.assd_mm:.3f} ({s.assd_mm:.3f})"

    @property
    def end(self) -> MetricReport:
        return self.reports[-1]


def evaluate_tracking(result: TrackingResult | list[np.ndarray], truth: list[np.ndarray], spacing: float,
                      cine_id: str = "cine", include_ed: bool = False) -> MetricTable:
    """Per-frame DSC/HD/ASSD against ground truth; the ED frame is skipped by default."""
    masks = result.tracked_masks if isinstance(result, TrackingResult) else result
    if len(masks) != len(truth):
        raise ValueError(f"frame-count mismatch: {len(masks)} tracked vs {len(truth)} truth")
    start = 0 if include_ed else 1
    idx = list(range(start, len(masks)))
    return MetricTable(cine_id, idx, [evaluate_masks(masks[i], truth[i], spacing) for i in idx])
