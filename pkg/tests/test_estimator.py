import numpy as np
import pytest

from aatrack.cine import normalize
from aatrack.estimator import AnatomyPrior, DivergenceError, EstimatorConfig, estimate_pair
from aatrack.flow import warp
from aatrack.losses import LossWeights
from aatrack.metrics import dice
from aatrack.synth import PhantomConfig, generate_phantom, translation_pair


def _epe(flow, truth, margin=8):
    d = (flow.numpy() - truth.numpy())[:, margin:-margin, margin:-margin]
    return np.sqrt((d * d).sum(0)).mean()


def test_identical_frames_give_near_zero_flow():
    img = normalize(generate_phantom(PhantomConfig(frames=2, seed=1)).cine.frames[0])
    r = estimate_pair(img, img, EstimatorConfig(iters_per_level=60))
    assert r.f12.magnitude().mean() < 0.05 and r.f21.magnitude().mean() < 0.05


@pytest.mark.parametrize("dy,dx", [(3.0, 2.0), (-1.0, 4.0)])
def test_translation_recovered(dy, dx):
    i1, i2, f12 = translation_pair(dy, dx)
    r = estimate_pair(normalize(i1), normalize(i2), EstimatorConfig())
    assert _epe(r.f12, f12) < 0.2
    # F21 is the inverse translation
    assert np.abs(r.f21.u[8:-8, 8:-8].mean() - dx) < 0.2 and np.abs(r.f21.v[8:-8, 8:-8].mean() - dy) < 0.2


def test_result_bookkeeping():
    i1, i2, _ = translation_pair(1.0, 1.0)
    r = estimate_pair(normalize(i1), normalize(i2), EstimatorConfig(levels=2, iters_per_level=30))
    assert r.iterations_run == 60 == len(r.history)
    assert {"level", "iteration", "loss", "cons", "huber"} <= set(r.history[0])
    assert np.isfinite(r.final_loss) and r.f12.grid == (64, 64)


def test_deterministic():
    i1, i2, _ = translation_pair(2.0, -1.0)
    cfg = EstimatorConfig(iters_per_level=40)
    a = estimate_pair(normalize(i1), normalize(i2), cfg)
    b = estimate_pair(normalize(i1), normalize(i2), cfg)
    assert np.array_equal(a.f12.numpy(), b.f12.numpy()) and a.final_loss == b.final_loss


def test_anatomy_term_resists_the_distractor():
    ph = generate_phantom(PhantomConfig(seed=0, frames=8, distractor=True, distractor_growth=3.0))
    a, b = normalize(ph.cine.frames[0]), normalize(ph.cine.frames[4])
    m0, m4 = ph.masks[0], ph.masks[4]
    base = estimate_pair(a, b, EstimatorConfig())
    cfg = EstimatorConfig(weights=LossWeights(lambda_h=0.04, lambda_anat=6.0))
    anat = estimate_pair(a, b, cfg, anatomy=AnatomyPrior(m0, m4))

    def score(r):
        return dice(warp(m0.astype(float), r.f12).warped.data >= 0.5, m4)

    assert score(anat) > score(base) + 0.1
    assert score(anat) > 0.9


def test_config_validation():
    for kw in ({"levels": 0}, {"iters_per_level": 0}, {"learning_rate": 0.0}, {"parameterization": "spline"},
               {"grad_smoothing": -1.0}, {"recon_every": 0}):
        with pytest.raises(ValueError):
            EstimatorConfig(**kw)


def test_input_validation():
    img = np.zeros((16, 16))
    with pytest.raises(ValueError):
        estimate_pair(img, np.zeros((16, 8)), EstimatorConfig())
    with pytest.raises(ValueError):
        estimate_pair(img, img, EstimatorConfig(), anatomy=AnatomyPrior(np.zeros((8, 8)), np.zeros((16, 16))))
    with pytest.raises(ValueError, match="network"):
        estimate_pair(img, img, EstimatorConfig(parameterization="siamese_net"))


def test_non_finite_input_diverges():
    i1, i2, _ = translation_pair(1.0, 0.0)
    bad = normalize(i1)
    bad[3, 3] = np.nan
    with pytest.raises(DivergenceError):
        estimate_pair(bad, normalize(i2), EstimatorConfig(iters_per_level=3))


def test_pyramid_depth_adapts_to_odd_grids():
    rng = np.random.default_rng(0)
    img = rng.standard_normal((18, 18))
    r = estimate_pair(img, img, EstimatorConfig(levels=3, iters_per_level=5))
    assert r.f12.grid == (18, 18) and {h["level"] for h in r.history} == {0, 1}
