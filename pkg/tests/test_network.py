import numpy as np
import pytest

from aatrack.cine import normalize
from aatrack.estimator import EstimatorConfig, estimate_pair
from aatrack.io import FormatError, write_checkpoint
from aatrack.losses import LossWeights
from aatrack.network import (build_siamese_net, forward, load_siamese, mean_objective, predict_pair,
                             refine_anatomy_aware, save_siamese, siamese_parameter_count, train_siamese)
from aatrack.synth import PhantomConfig, generate_phantom
from aatrack.tensor import Tensor, gradient_check

SMALL = EstimatorConfig(parameterization="siamese_net", channels=(4, 4, 4), epochs=3, batch_size=2,
                        net_learning_rate=2e-3)


def _pairs(n=4, size=32, seed=0):
    ph = generate_phantom(PhantomConfig(size=size, inner_radius=6, wall_thickness=3, frames=n + 1, seed=seed))
    f = [normalize(x) for x in ph.cine.frames]
    return [(f[k], f[k + 1]) for k in range(n)], ph


def test_parameter_count():
    # encoder 10368, fusion 27128, upsampling 10264, heads 1014
    assert siamese_parameter_count() == 48_774
    assert build_siamese_net(EstimatorConfig()).parameter_count() == 48_774
    assert build_siamese_net(SMALL).parameter_count() == siamese_parameter_count((4, 4, 4))


def test_forward_shapes_and_swap_symmetry():
    net = build_siamese_net(SMALL)
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 16, 24))
    f12, f21 = predict_pair(net, a, b)
    assert f12.grid == (16, 24) and np.isfinite(f12.numpy()).all()
    g12, g21 = predict_pair(net, b, a)
    assert np.array_equal(g12.numpy(), f21.numpy()) and np.array_equal(g21.numpy(), f12.numpy())


def test_forward_gradients():
    net = build_siamese_net(SMALL.with_(seed=3))
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 1, 8, 8))
    for name in ("enc2.w", "dec3.w", "up1.w", "head1.w"):
        def f(t, name=name):
            params = {k: (t if k == name else Tensor.wrap(p.data)) for k, p in net.params.items()}
            f12, f21 = forward(params, a, b)
            return (f12 * f12).sum() + f21.sum() * 0.3

        # heads start tiny, so lift them to get informative gradients
        x = net.params[name].data * (100.0 if name.startswith("head") else 1.0) + 0.011
        rep = gradient_check(f, x)
        assert rep.passed, (name, rep)


def test_identical_pairs_train_to_near_zero_flow():
    pairs, ph = _pairs()
    same = [(a, a) for a, _ in pairs]
    net = train_siamese(same, SMALL)
    f12, f21 = predict_pair(net, same[0][0], same[0][0])
    assert f12.magnitude().mean() < 0.1 and f21.magnitude().mean() < 0.1


def test_training_is_deterministic_and_lowers_the_objective():
    pairs, _ = _pairs(seed=2)
    cfg = SMALL.with_(epochs=30)
    a = train_siamese(pairs, cfg)
    b = train_siamese(pairs, cfg)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    untrained = build_siamese_net(SMALL)
    w = LossWeights.baseline()
    assert mean_objective(a, pairs, w)["loss"] < 0.7 * mean_objective(untrained, pairs, w)["loss"]


def test_refinement_keeps_the_original_and_lowers_the_anatomy_objective():
    pairs, ph = _pairs(seed=3)
    base = train_siamese(pairs, SMALL)
    samples = [(a, b, ph.masks[k].astype(float), ph.masks[k + 1].astype(float)) for k, (a, b) in enumerate(pairs)]
    cfg = SMALL.with_(weights=LossWeights(lambda_h=0.04, lambda_anat=6.0))
    refined = refine_anatomy_aware(base, samples, cfg)
    assert refined is not base and refined.params["enc1.w"] is not base.params["enc1.w"]
    before = mean_objective(base, samples, cfg.weights)
    after = mean_objective(refined, samples, cfg.weights)
    assert after["loss"] <= before["loss"]
    with pytest.raises(ValueError):
        refine_anatomy_aware(base, pairs, cfg)


def test_estimate_pair_runs_inference_only():
    pairs, _ = _pairs(n=2, seed=4)
    net = train_siamese(pairs, SMALL.with_(epochs=1))
    r = estimate_pair(pairs[0][0], pairs[0][1], SMALL, params=net)
    f12, _ = predict_pair(net, *pairs[0])
    assert r.iterations_run == 0 and np.array_equal(r.f12.numpy(), f12.numpy())


def test_training_input_validation():
    with pytest.raises(ValueError):
        train_siamese([], SMALL)
    with pytest.raises(ValueError):
        train_siamese([(np.zeros((8, 8)), np.zeros((8, 8))), (np.zeros((8, 8)), np.zeros((16, 8)))], SMALL)
    with pytest.raises(ValueError):
        build_siamese_net(SMALL.with_(channels=(4, 0, 4)))


def test_checkpoint_roundtrip(tmp_path):
    net = build_siamese_net(SMALL.with_(seed=5))
    save_siamese(net, tmp_path / "n.ckpt")
    back = load_siamese(tmp_path / "n.ckpt")
    assert back.channels == (4, 4, 4)
    for k, p in net.params.items():
        np.testing.assert_array_equal(back.params[k].data, p.data.astype(np.float32))
    write_checkpoint(tmp_path / "v.ckpt", {"a": np.zeros(1)}, {"kind": "vae"})
    with pytest.raises(FormatError):
        load_siamese(tmp_path / "v.ckpt")
