"""Normalization and loss closed forms."""

import numpy as np
import pytest

from versadepth.depth_math import (DepthMap, LossConfig, NormalizationStats,
                                   crde_loss, denormalize, normalize,
                                   silog_loss)
from versadepth.errors import DegenerateInputError, ShapeError
from versadepth.tensor import Tensor, grad_check


def full_map(values):
    arr = np.asarray(values, dtype=np.float64)
    return DepthMap(arr, np.ones_like(arr, dtype=bool))


# -- normalization ----------------------------------------------------------


def test_normalize_two_point():
    n, stats = normalize(full_map([[1.0, 3.0]]))
    assert stats.mean == 2.0 and stats.std == 1.0
    assert np.allclose(n, [[-1.0, 1.0]])


def test_normalize_idempotent_fixed_point():
    base = np.array([[-1.0, 1.0]])
    # already zero mean, unit population std: normalizing changes nothing
    dm = DepthMap(base, np.ones_like(base, dtype=bool))
    n, _ = normalize(dm)
    assert np.allclose(n, base, atol=1e-12)


def test_normalize_hand_values():
    n, stats = normalize(full_map([2.0, 4.0, 6.0, 8.0]))
    assert stats.mean == 5.0
    assert stats.std == pytest.approx(np.sqrt(5.0), abs=1e-12)
    assert np.allclose(n, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-4)


def test_normalize_population_invariant(np_rng):
    vals = np_rng.uniform(0.5, 9.0, size=(8, 8))
    mask = np_rng.uniform(size=(8, 8)) > 0.3
    dm = DepthMap(vals, mask)
    n, _ = normalize(dm)
    assert n[mask].mean() == pytest.approx(0.0, abs=1e-9)
    assert n[mask].std() == pytest.approx(1.0, abs=1e-9)
    assert np.all(n[~mask] == 0.0)


def test_denormalize_round_trip(np_rng):
    vals = np_rng.uniform(1.0, 5.0, size=(6, 6))
    dm = full_map(vals)
    n, stats = normalize(dm)
    assert np.allclose(denormalize(n, stats), vals, atol=1e-9)


def test_denormalize_zero_map():
    out = denormalize(np.zeros((2, 2)), NormalizationStats(5.0, 2.0))
    assert np.allclose(out, 5.0)


def test_denormalize_hand_inverse():
    n = np.array([-1.3416, -0.4472, 0.4472, 1.3416])
    out = denormalize(n, NormalizationStats(5.0, np.sqrt(5.0)))
    assert np.allclose(out, [2.0, 4.0, 6.0, 8.0], atol=1e-3)


def test_normalize_rejects_constant():
    with pytest.raises(DegenerateInputError):
        normalize(full_map([2.0, 2.0, 2.0]))


def test_normalize_needs_two_pixels():
    dm = DepthMap(np.array([[1.0, 2.0]]), np.array([[True, False]]))
    with pytest.raises(DegenerateInputError):
        normalize(dm)


# -- silog loss ----------------------------------------------------------------


def test_silog_zero_at_perfect(np_rng):
    d = np_rng.uniform(0.5, 5.0, size=(4, 4))
    loss = silog_loss(Tensor(d), full_map(d))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)


def test_silog_uniform_scale_closed_form(np_rng):
    d = np_rng.uniform(0.5, 5.0, size=(4, 4))
    loss = silog_loss(Tensor(np.e * d), full_map(d))
    assert float(loss.data) == pytest.approx(10.0 * np.sqrt(0.15), abs=1e-9)
    loss = silog_loss(Tensor(2.0 * d), full_map(d))
    assert float(loss.data) == pytest.approx(10.0 * np.sqrt(0.15) * np.log(2.0),
                                             abs=1e-9)


def test_silog_hand_case():
    pred = Tensor(np.array([1.0, np.e]))
    gt = full_map([1.0, 1.0])
    loss = silog_loss(pred, gt)
    assert float(loss.data) == pytest.approx(10.0 * np.sqrt(0.2875), abs=1e-9)


def test_silog_nonnegative(np_rng):
    for _ in range(20):
        d = np_rng.uniform(0.5, 5.0, size=(3, 3))
        p = d * np.exp(np_rng.normal(0, 0.5, size=(3, 3)))
        assert float(silog_loss(Tensor(p), full_map(d)).data) >= 0.0


def test_silog_respects_mask(np_rng):
    d = np_rng.uniform(1.0, 4.0, size=(3, 3))
    p = d.copy()
    p[0, 0] = 50.0
    mask = np.ones((3, 3), dtype=bool)
    mask[0, 0] = False
    loss = silog_loss(Tensor(p), DepthMap(d, mask))
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)


def test_silog_shape_mismatch():
    with pytest.raises(ShapeError):
        silog_loss(Tensor(np.ones((2, 2))), full_map(np.ones((3, 3))))


def test_silog_rejects_nonpositive_gt():
    dm = DepthMap(np.array([[1.0, -2.0]]), np.array([[True, True]]))
    with pytest.raises(DegenerateInputError):
        silog_loss(Tensor(np.ones((1, 2))), dm)


def test_silog_gradient(np_rng):
    d = np_rng.uniform(0.5, 5.0, size=(4, 4))
    p = Tensor(d * np.exp(np_rng.normal(0, 0.3, size=(4, 4))), requires_grad=True)
    err = grad_check(lambda: silog_loss(p, full_map(d)), [p])
    assert err <= 1e-4


# -- trunk loss -------------------------------------------------------------------


def test_crde_zero_at_perfect(np_rng):
    t = np_rng.normal(size=(4, 4))
    mask = np.ones((4, 4), dtype=bool)
    loss = crde_loss(Tensor(t), t, mask)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)


def test_crde_constant_shift_closed_form(np_rng):
    t = np_rng.normal(size=(5, 5))
    mask = np.ones((5, 5), dtype=bool)
    for c in (0.3, -1.7):
        loss = crde_loss(Tensor(t + c), t, mask)
        assert float(loss.data) == pytest.approx(10.0 * np.sqrt(0.15) * abs(c),
                                                 abs=1e-9)


def test_crde_target_affine_invariance(np_rng):
    # normalizing a*D+b gives the same target as normalizing D, so the
    # trunk loss cannot see the camera's metric scale
    d = np_rng.uniform(1.0, 7.0, size=(6, 6))
    pred = Tensor(np_rng.normal(size=(6, 6)))
    mask = np.ones((6, 6), dtype=bool)
    n1, _ = normalize(full_map(d))
    n2, _ = normalize(full_map(3.5 * d + 0.25))
    l1 = crde_loss(pred, n1, mask)
    l2 = crde_loss(pred, n2, mask)
    assert float(l1.data) == pytest.approx(float(l2.data), abs=1e-9)


def test_crde_log_mode_runs(np_rng):
    t = np_rng.normal(size=(4, 4))
    mask = np.ones((4, 4), dtype=bool)
    cfg = LossConfig(crde_mode="log")
    loss = crde_loss(Tensor(t), t, mask, cfg)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-9)


def test_crde_log_mode_shifts_positive(np_rng):
    t = np_rng.normal(size=(4, 4)) - 5.0
    mask = np.ones((4, 4), dtype=bool)
    cfg = LossConfig(crde_mode="log")
    loss = crde_loss(Tensor(t + 0.5), t, mask, cfg)
    assert np.isfinite(float(loss.data))


def test_crde_gradient(np_rng):
    t = np_rng.normal(size=(4, 4))
    p = Tensor(t + np_rng.normal(0, 0.3, size=(4, 4)), requires_grad=True)
    err = grad_check(lambda: crde_loss(p, t, np.ones((4, 4), dtype=bool)), [p])
    assert err <= 1e-4


def test_crde_unknown_mode():
    with pytest.raises(ValueError):
        crde_loss(Tensor(np.ones((2, 2))), np.ones((2, 2)),
                  np.ones((2, 2), dtype=bool), LossConfig(crde_mode="exp"))
