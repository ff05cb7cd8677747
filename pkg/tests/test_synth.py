import math

import numpy as np
import pytest

from aatrack.flow import warp
from aatrack.metrics import dice
from aatrack.synth import (MaskFamilyConfig, PhantomConfig, corrupt_mask, count_components, generate_mask_family,
                           generate_phantom, translation_pair)


def _interior_mae(a, b, margin=4):
    return np.abs(a - b)[margin:-margin, margin:-margin].mean()


def test_static_phantom():
    ph = generate_phantom(PhantomConfig(contraction_amplitude=0.0, drift=0.0, frames=5, seed=2))
    for f in ph.cine.frames[1:]:
        assert np.array_equal(f, ph.cine.frames[0])
    assert all(not f.numpy().any() for f in ph.pairwise_flows + ph.composite_flows)


def test_bookkeeping():
    ph = generate_phantom(PhantomConfig(frames=7, seed=1))
    assert len(ph.cine.frames) == len(ph.masks) == 7
    assert len(ph.pairwise_flows) == len(ph.composite_flows) == 6
    assert len(ph.cine.truth_flows) == 6
    assert np.array_equal(ph.cine.ed_mask, ph.masks[0])
    assert ph.gains == [1.01 ** n for n in range(7)]


def test_first_composite_is_first_pairwise():
    ph = generate_phantom(PhantomConfig(frames=4, seed=3))
    np.testing.assert_allclose(ph.composite_flows[0].numpy(), ph.pairwise_flows[0].numpy(), atol=1e-12)


def test_ground_truth_flows_reproduce_frames():
    ph = generate_phantom(PhantomConfig(seed=4))
    f, g = ph.cine.frames, ph.gains
    span = f[0].max() - f[0].min()
    for n in range(1, len(f)):
        comp = warp(f[0] / g[0], ph.composite_flows[n - 1]).warped.data
        pair = warp(f[n - 1] / g[n - 1], ph.pairwise_flows[n - 1]).warped.data
        assert _interior_mae(comp, f[n] / g[n]) < 0.02 * span
        assert _interior_mae(pair, f[n] / g[n]) < 0.02 * span


def test_masks_follow_the_motion():
    ph = generate_phantom(PhantomConfig(seed=5))
    mid = len(ph.masks) // 2
    warped = warp(ph.masks[0].astype(float), ph.composite_flows[mid - 1]).warped.data >= 0.5
    assert dice(warped, ph.masks[mid]) > 0.9  # binarised thin wall loses a few edge pixels
    assert dice(ph.masks[0], ph.masks[mid]) < 0.9  # the motion is not trivial


def test_seeded_generation_is_bit_identical():
    a = generate_phantom(PhantomConfig(seed=9, distractor=True))
    b = generate_phantom(PhantomConfig(seed=9, distractor=True))
    for x, y in zip(a.cine.frames, b.cine.frames):
        assert np.array_equal(x, y)
    c = generate_phantom(PhantomConfig(seed=10, distractor=True))
    assert not np.array_equal(a.cine.frames[0], c.cine.frames[0])


def test_distractor_changes_images_but_not_masks():
    plain = generate_phantom(PhantomConfig(seed=6, frames=6))
    busy = generate_phantom(PhantomConfig(seed=6, frames=6, distractor=True))
    for m1, m2 in zip(plain.masks, busy.masks):
        assert np.array_equal(m1, m2)
    diff = [np.abs(a - b).max() for a, b in zip(plain.cine.frames, busy.cine.frames)]
    assert min(diff) > 0.3
    # the disc grows with contraction: more pixels change at the peak than at ED
    changed = [(np.abs(a - b) > 0.1).sum() for a, b in zip(plain.cine.frames, busy.cine.frames)]
    assert max(changed) > 2 * changed[0]


def test_config_validation_names_the_constraint():
    with pytest.raises(ValueError, match="contraction_amplitude"):
        generate_phantom(PhantomConfig(contraction_amplitude=0.7))
    with pytest.raises(ValueError, match="25%"):
        generate_phantom(PhantomConfig(contraction_amplitude=0.5, distractor=True, distractor_follow=3.0))
    with pytest.raises(ValueError, match="frames"):
        generate_phantom(PhantomConfig(frames=1))


def test_translation_pair_is_exact():
    i1, i2, f12 = translation_pair(-2.0, 4.0)
    assert _interior_mae(warp(i1, f12).warped.data, i2, margin=6) == 0.0
    assert (f12.u == -4.0).all() and (f12.v == 2.0).all()


def test_corruptions():
    mask = generate_mask_family(1, seed=3)[0]
    blob = corrupt_mask(mask, "blob", seed=1)
    assert count_components(blob) == count_components(mask) + 1
    assert (blob >= mask).all()
    hole = corrupt_mask(mask, "hole", seed=1)
    assert 0.7 < dice(hole, mask) < 1.0
    noisy = corrupt_mask(mask, "boundary_noise", seed=1)
    assert dice(noisy, mask) < 1.0
    for kind in ("blob", "hole", "boundary_noise"):
        assert np.array_equal(corrupt_mask(mask, kind, seed=4), corrupt_mask(mask, kind, seed=4))
    with pytest.raises(ValueError):
        corrupt_mask(mask, "smudge")


def test_blob_adds_one_component_across_the_family():
    for i, m in enumerate(generate_mask_family(30, seed=11)):
        assert count_components(corrupt_mask(m, "blob", seed=i)) == 2


def test_mask_family():
    masks = generate_mask_family(100, seed=0)
    assert len(masks) == 100
    assert all(m.any() and count_components(m) == 1 for m in masks)
    flat = np.stack([m.reshape(-1) for m in masks])
    assert len({row.tobytes() for row in flat}) == 100
    assert all(dice(masks[i], masks[j]) < 1.0 for i in range(100) for j in range(i + 1, 100, 7))
    with pytest.raises(ValueError):
        generate_mask_family(0)


def test_mask_family_orientations_span_wide_range():
    # a C-shape's centroid sits away from its gap; use the offset from the box centre as orientation
    angles = []
    for m in generate_mask_family(100, MaskFamilyConfig(), seed=1):
        rows, cols = np.nonzero(m)
        cy, cx = (rows.min() + rows.max()) / 2, (cols.min() + cols.max()) / 2
        angles.append(math.degrees(math.atan2(cy - rows.mean(), cx - cols.mean())) % 360)
    a = np.sort(angles)
    largest_gap = max(np.diff(np.concatenate([a, [a[0] + 360]])))
    assert 360 - largest_gap >= 90
