import math

import numpy as np
import pytest
from scipy import ndimage as ndi

from vesselcfd._thinning import thin
from vesselcfd.errors import DegenerateTargetError
from vesselcfd.losses import (CLAMP_EPS, CandidateThresholds, ClDiceConfig, FocalConfig, clamp_probabilities,
                              count_ce_loss, dice_ce_loss, gaussian_heatmap, gradient_check, heatmap_focal_loss,
                              select_candidates, soft_skeleton, stage2_loss, stage2_signature)

LN2 = math.log(2.0)


def smooth_field(shape, seed, lo=0.05, hi=0.95):
    """Random field blurred and rescaled into [lo, hi]."""
    x = ndi.gaussian_filter(np.random.default_rng(seed).random(shape), 1.0)
    x = (x - x.min()) / (x.max() - x.min())
    return lo + (hi - lo) * x


def _tube(r=3, n=21, length=40):
    a = np.zeros((n, n, length))
    i, j = np.indices((n, n))
    a[(i - n // 2) ** 2 + (j - n // 2) ** 2 <= r * r] = 1
    a[:, :, :3] = a[:, :, -3:] = 0
    return a


def test_heatmap_peak_and_sigma():
    t = gaussian_heatmap([(5, 5, 5)], sigma=2.0, dims=(11, 11, 11)).t
    assert t[5, 5, 5] == 1.0
    assert t[7, 5, 5] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_heatmap_takes_max_not_sum():
    h = gaussian_heatmap([(3, 5, 5), (5, 5, 5)], sigma=3.0, dims=(11, 11, 11))
    assert h.t.max() == 1.0
    assert h.t[4, 5, 5] == pytest.approx(math.exp(-1 / 18))
    assert h.positives[3, 5, 5] and h.positives[5, 5, 5]


def test_heatmap_rejects_outside_centre():
    with pytest.raises(ValueError):
        gaussian_heatmap([(11, 0, 0)], 1.0, (11, 11, 11))
    with pytest.raises(ValueError):
        gaussian_heatmap([(1, 1, 1)], 0.0, (3, 3, 3))


def test_focal_goldens():
    t = np.ones((1, 1, 1))
    loss, _ = heatmap_focal_loss(np.full((1, 1, 1), 0.5), t)
    assert loss == pytest.approx(0.25 * LN2, abs=1e-12)
    t2 = np.array([1.0, 0.0]).reshape(2, 1, 1)
    loss2, _ = heatmap_focal_loss(np.full((2, 1, 1), 0.5), t2, FocalConfig(2, 4))
    assert loss2 - loss == pytest.approx(0.25 * LN2, abs=1e-12)


def test_focal_perfect_prediction_is_near_zero():
    h = gaussian_heatmap([(4, 4, 4)], 1.5, (9, 9, 9))
    p = clamp_probabilities(np.where(h.positives, 1.0, 0.0))
    loss, _ = heatmap_focal_loss(p, h)
    assert 0 <= loss < 1e-6


def test_focal_needs_positives_and_open_interval():
    with pytest.raises(DegenerateTargetError):
        heatmap_focal_loss(np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        heatmap_focal_loss(np.ones((1, 1, 1)), np.ones((1, 1, 1)))


def test_focal_permutation_invariant():
    h = gaussian_heatmap([(3, 3, 3)], 1.5, (7, 7, 7))
    p = smooth_field((7, 7, 7), 0)
    perm = np.random.default_rng(1).permutation(p.size)
    a, _ = heatmap_focal_loss(p, h)
    b, _ = heatmap_focal_loss(p.ravel()[perm].reshape(p.shape), h.t.ravel()[perm].reshape(p.shape))
    assert a == pytest.approx(b, rel=1e-12)


def test_count_ce():
    loss, grad = count_ce_loss(np.zeros(6), 3)
    assert loss == pytest.approx(math.log(6), abs=1e-12)
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)
    big = np.zeros(6)
    big[2] = 800.0
    assert count_ce_loss(big, 2)[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        count_ce_loss(np.zeros(6), 6)
    with pytest.raises(ValueError):
        count_ce_loss([0, 0, 0, 0, 0, np.inf], 1)


def test_soft_skeleton_zero_and_k():
    assert not soft_skeleton(np.zeros((5, 5, 5)), 3).any()
    with pytest.raises(ValueError):
        ClDiceConfig(iterations=0)


def test_soft_skeleton_concentrates_on_hard_skeleton():
    a = _tube(3)
    s = soft_skeleton(a, 5)
    near = ndi.binary_dilation(thin(a.astype(bool)), structure=np.ones((3, 3, 3), bool))
    assert s.any()
    assert not (s > 0)[~near].any()
    assert 0.0 <= s.min() and s.max() <= 1.0


def test_stage2_perfect_match_limit():
    g = _tube(2, 11, 16)
    p = clamp_probabilities(g, 1e-9)
    cfg = ClDiceConfig(lam=0.5)
    loss, _ = stage2_loss(p, g, cfg)
    assert loss == pytest.approx(-(1 + cfg.lam), abs=1e-4)


def test_stage2_lambda_zero_is_dice_ce():
    g = (smooth_field((8, 8, 8), 3) > 0.5).astype(float)
    p = smooth_field((8, 8, 8), 4)
    a = stage2_loss(p, g, ClDiceConfig(lam=0.0))
    b = dice_ce_loss(p, g, ClDiceConfig().eps)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_stage2_empty_label_and_prediction_is_finite():
    loss, grad = stage2_loss(np.full((4, 4, 4), CLAMP_EPS), np.zeros((4, 4, 4)))
    assert math.isfinite(loss) and np.isfinite(grad).all()


def test_label_must_be_binary():
    with pytest.raises(ValueError):
        stage2_loss(np.full((2, 2, 2), 0.5), np.full((2, 2, 2), 0.5))


def test_stage2_gradient():
    g = (smooth_field((8, 8, 8), 11) > 0.5).astype(float)
    p = smooth_field((8, 8, 8), 12)
    cfg = ClDiceConfig()
    rep = gradient_check(lambda x: stage2_loss(x, g, cfg), p, n_points=40, seed=2,
                         signature=lambda x: stage2_signature(x, cfg))
    assert rep.checked == 40
    assert rep.max_rel_error < 1e-4


def test_focal_and_count_gradients():
    h = gaussian_heatmap([(3, 4, 3)], 1.2, (8, 8, 8))
    p = smooth_field((8, 8, 8), 7)
    assert gradient_check(lambda x: heatmap_focal_loss(x, h), p, n_points=40).max_rel_error < 1e-4
    z = np.random.default_rng(0).normal(size=6)
    assert gradient_check(lambda x: count_ce_loss(x, 4), z, n_points=20).max_rel_error < 1e-4


def _blob(shape, centres, sigma=1.5):
    return gaussian_heatmap(centres, sigma, shape).t


def test_candidates_two_blobs():
    shape = (24, 12, 12)
    maps = _blob(shape, [(5, 6, 6), (18, 6, 6)])
    assert select_candidates(maps, maps) == [(5, 6, 6), (18, 6, 6)]


def test_candidates_capped_by_density_components():
    shape = (30, 12, 12)
    heat = _blob(shape, [(4, 6, 6), (14, 6, 6), (24, 6, 6)])
    heat[14, 6, 6] = 1.2  # global peak
    density = _blob(shape, [(14, 6, 6)])
    assert select_candidates(heat, density) == [(14, 6, 6)]


def test_candidates_empty_density():
    heat = _blob((8, 8, 8), [(4, 4, 4)])
    assert select_candidates(heat, np.zeros_like(heat)) == []


def test_candidate_count_never_exceeds_components():
    rng = np.random.default_rng(9)
    for _ in range(10):
        heat = smooth_field((16, 16, 16), int(rng.integers(1000)), 0.0, 1.0)
        dens = smooth_field((16, 16, 16), int(rng.integers(1000)), 0.0, 1.0)
        k = ndi.label(dens >= 0.5 * dens.max(), structure=np.ones((3, 3, 3)))[1]
        got = select_candidates(heat, dens, CandidateThresholds(nms_radius=2.0))
        assert len(got) <= k
