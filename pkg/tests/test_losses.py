import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aatrack import losses as L
from aatrack.flow import FlowField, warp
from aatrack.losses import LossWeights
from aatrack.synth import translation_pair
from aatrack.tensor import Tensor, gradient_check

from oracles import smooth_flow


def _flows(rng, h=16, w=16, amp=1.5):
    return FlowField.from_array(smooth_flow(rng, h, w, amp)), FlowField.from_array(smooth_flow(rng, h, w, amp))


def test_weights_defaults_and_validation():
    assert LossWeights.baseline().lambda_h == 0.02
    a = LossWeights.aatracker()
    assert (a.lambda_h, a.lambda_anat, a.lambda_recon) == (0.04, 6.0, 1.2)
    with pytest.raises(ValueError):
        LossWeights(lambda_anat=-1.0)
    with pytest.raises(ValueError):
        LossWeights(huber_delta=0.0)


def test_consistency_examples():
    img = np.random.default_rng(0).standard_normal((10, 10))
    z = FlowField.zeros(10, 10)
    assert L.consistency_loss(img, img, z, z).item() == 0.0
    assert L.consistency_loss(np.zeros((10, 10)), np.ones((10, 10)), z, z).item() == 2.0


def test_consistency_vanishes_for_true_translation():
    i1, i2, f12 = translation_pair(2.0, 3.0)
    f21 = FlowField.constant(64, 64, 3.0, 2.0)
    interior = np.zeros((64, 64))
    interior[6:-6, 6:-6] = 1.0
    assert L.consistency_loss(i1, i2, f12, f21, region=interior).item() < 1e-6


def test_huber_smoothness_examples():
    assert L.huber_smoothness(FlowField.constant(8, 8, 2.0, -1.0)).item() == 0.0
    # single difference of z in u along x on a 1x2 grid: 4 slots (2 comps x 2 dirs x 2 px) per pixel pair
    for z, expected in ((0.5, 0.125), (2.0, 1.5)):
        f = np.zeros((2, 1, 2))
        f[0, 0, 1] = z
        total = L.huber_smoothness(FlowField.from_array(f), 1.0).item() * f.size
        assert total == pytest.approx(expected)


def test_baseline_objective_examples():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((12, 12))
    z = FlowField.zeros(12, 12)
    w = LossWeights.baseline()
    assert L.baseline_objective(img, img, z, z, w).item() == 0.0
    c = FlowField.constant(12, 12, 1.0, 0.0)
    assert L.baseline_objective(img, img, c, c, w).item() == L.consistency_loss(img, img, c, c).item()
    f12, f21 = _flows(rng, 12, 12)
    i2 = rng.standard_normal((12, 12))
    assert (L.baseline_objective(img, i2, f12, f21, w.with_(lambda_h=0.0)).item()
            == L.consistency_loss(img, i2, f12, f21).item())


def test_anatomy_loss_examples():
    m = np.zeros((20, 20))
    m[5:12, 4:10] = 1.0
    z = FlowField.zeros(20, 20)
    assert L.anatomy_loss(m, m, z, z).item() == 0.0
    m2 = np.roll(m, 2, axis=1)  # m2(x) = m(x - (0, 2))
    f12, f21 = FlowField.constant(20, 20, -2.0, 0.0), FlowField.constant(20, 20, 2.0, 0.0)
    interior = np.zeros((20, 20))
    interior[3:-3, 3:-3] = 1.0
    assert L.anatomy_loss(m, m2, f12, f21, region=interior).item() < 1e-6
    other = np.zeros((20, 20))
    other[14:18, 14:18] = 1.0
    assert L.anatomy_loss(m, other, z, z).item() == pytest.approx(2 * np.abs(m - other).mean())
    with pytest.raises(ValueError):
        L.anatomy_loss(m * 2.0, m, z, z)
    with pytest.raises(ValueError):
        L.anatomy_loss(m, m[:-1], z, z)


def test_vae_consistency_examples():
    m = np.zeros((16, 16))
    m[4:12, 4:12] = 1.0
    assert L.vae_consistency_loss(m, m, m, m).item() == 0.0
    blob = m.copy()
    blob[0:2, 0:3] = 1.0
    one = L.vae_consistency_loss(blob, m, m, m).item()
    assert one == pytest.approx(6 / 256)
    assert L.vae_consistency_loss(blob, blob, m, m).item() == pytest.approx(2 * one)


def test_aatracker_objective_examples():
    rng = np.random.default_rng(2)
    i1, i2 = rng.standard_normal((2, 14, 14))
    m1, m2 = (rng.random((2, 14, 14)) > 0.5).astype(float)
    f12, f21 = _flows(rng, 14, 14)
    r1, r2 = rng.random((2, 14, 14))
    w0 = LossWeights(lambda_h=0.04)
    assert (L.aatracker_objective(i1, i2, f12, f21, m1, m2, r1, r2, w0).item()
            == L.baseline_objective(i1, i2, f12, f21, w0).item())
    w = LossWeights.aatracker()
    terms = L.objective_terms(i1, i2, f12, f21, w, m1, m2, r1, r2)
    hand = (terms["cons"].item() + 0.04 * terms["huber"].item() + 6.0 * terms["anat"].item()
            + 1.2 * terms["recon"].item())
    assert L.aatracker_objective(i1, i2, f12, f21, m1, m2, r1, r2, w).item() == pytest.approx(hand, rel=1e-14)


def test_aatracker_objective_consistent_case():
    i1, i2, f12 = translation_pair(0.0, 2.0)
    f21 = FlowField.constant(64, 64, 2.0, 0.0)
    m1 = np.zeros((64, 64))
    m1[20:40, 20:40] = 1.0
    m2 = warp(m1, f12).warped.data
    interior = np.zeros((64, 64))
    interior[6:-6, 6:-6] = 1.0
    m1w, m2w = warp(m1, f12).warped.data, warp(m2, f21).warped.data
    terms = L.objective_terms(i1, i2, f12, f21, LossWeights.aatracker(), m1, m2, m1w, m2w, region=interior)
    assert L.combine(terms, LossWeights.aatracker()).item() < 1e-6


def test_kld_examples():
    assert L.kld_loss(np.zeros(4), np.zeros(4)).item() == 0.0
    assert L.kld_loss(np.ones(1), np.zeros(1)).item() == 0.5
    with pytest.raises(ValueError):
        L.kld_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_kld_nonnegative(seed):
    rng = np.random.default_rng(seed)
    assert L.kld_loss(rng.normal(0, 2, (3, 5)), rng.normal(0, 2, (3, 5))).item() >= 0.0


def test_objectives_are_symmetric_under_swap():
    rng = np.random.default_rng(3)
    i1, i2 = rng.standard_normal((2, 12, 12))
    m1, m2 = rng.random((2, 12, 12))
    r1, r2 = rng.random((2, 12, 12))
    f12, f21 = _flows(rng, 12, 12)
    w = LossWeights.aatracker()
    a = L.aatracker_objective(i1, i2, f12, f21, m1, m2, r1, r2, w).item()
    b = L.aatracker_objective(i2, i1, f21, f12, m2, m1, r2, r1, w).item()
    assert a == pytest.approx(b, rel=1e-14)
    assert (L.baseline_objective(i1, i2, f12, f21, w).item()
            == pytest.approx(L.baseline_objective(i2, i1, f21, f12, w).item(), rel=1e-14))


def test_huber_invariant_to_constant_offset():
    f = smooth_flow(np.random.default_rng(4), 10, 10)
    a = L.huber_smoothness(FlowField.from_array(f)).item()
    b = L.huber_smoothness(FlowField.from_array(f + 3.7)).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_l2_image_norm_switch():
    z = FlowField.zeros(4, 4)
    w = LossWeights(lambda_h=0.0, image_norm="l2")
    assert L.baseline_objective(np.zeros((4, 4)), np.full((4, 4), 2.0), z, z, w).item() == 8.0


def test_loss_gradients():
    rng = np.random.default_rng(5)
    i1, i2 = rng.standard_normal((2, 12, 12))
    m1, m2 = rng.random((2, 12, 12))
    r1, r2 = rng.random((2, 12, 12))
    base = smooth_flow(rng, 12, 12) + 0.23
    other = FlowField.from_array(smooth_flow(rng, 12, 12) - 0.17)
    w = LossWeights.aatracker()
    rep = gradient_check(lambda t: L.aatracker_objective(i1, i2, FlowField(t), other, m1, m2, r1, r2, w), base)
    assert rep.passed, rep
    rep = gradient_check(lambda t: L.kld_loss(t[:2], t[2:]), rng.standard_normal((4, 30)))
    assert rep.passed, rep
