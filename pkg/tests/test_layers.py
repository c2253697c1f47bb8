import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from se3nets import tensor as T
from se3nets.layers import (SHARPEN_FLOOR, SharpeningSchedule, hard_assign, normalize_masks, sharpen_masks,
                            transform_layer)
from se3nets.se3 import exp_map


def pixel(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


def fixed(sigma, gamma):
    """A schedule already at its maximum from epoch 0."""
    return SharpeningSchedule(sigma_max=sigma, gamma_max=gamma, ramp_epochs=0)


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------- schedule


def test_schedule_ramp():
    s = SharpeningSchedule.for_training(epochs=60, sigma_max=0.1, gamma_max=4.0, ramp_fraction=0.5)
    assert s.sigma(0) == 0.0 and s.gamma(0) == 1.0
    assert s.sigma(15) == pytest.approx(0.05) and s.gamma(15) == pytest.approx(2.5)
    assert s.sigma(30) == 0.1 and s.gamma(30) == 4.0
    assert s.sigma(1000) == 0.1 and s.gamma(1000) == 4.0
    values = [(s.sigma(e), s.gamma(e)) for e in range(61)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_disabled_schedule_is_identity():
    m = normalize_masks(T.Tensor(np.random.default_rng(0).normal(size=(3, 4, 4))))
    out = sharpen_masks(m, SharpeningSchedule.disabled(), 10, rng_seed=1)
    np.testing.assert_allclose(out.data, m.data, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- sharpen


def test_sharpen_sigma0_gamma1_identity():
    m = pixel([0.8, 0.2])
    np.testing.assert_allclose(sharpen_masks(T.Tensor(m), fixed(0.0, 1.0), 0).data, m, atol=1e-15)


def test_sharpen_gamma2_hand_value():
    out = sharpen_masks(T.Tensor(pixel([0.8, 0.2])), fixed(0.0, 2.0), 0).data.ravel()
    np.testing.assert_allclose(out, [0.64 / 0.68, 0.04 / 0.68], atol=1e-15)
    assert out[0] == pytest.approx(0.9412, abs=1e-4)


def test_sharpen_limit_is_monotone_to_one_hot():
    tops = [sharpen_masks(T.Tensor(pixel([0.8, 0.2])), fixed(0.0, g), 0).data.ravel()[0] for g in (2, 4, 8, 16)]
    assert all(a < b for a, b in zip(tops, tops[1:]))
    assert tops[-1] > 1 - 1e-9


def test_sharpen_clamps_negative_bases():
    m = T.Tensor(pixel([0.999, 0.001]))
    out = sharpen_masks(m, fixed(0.5, 2.5), 0, rng_seed=3)
    assert np.isfinite(out.data).all() and (out.data >= 0).all()
    assert abs(out.data.sum() - 1) < 1e-12


def test_sharpen_deterministic_under_seed():
    m = normalize_masks(T.Tensor(np.random.default_rng(4).normal(size=(3, 5, 5))))
    a = sharpen_masks(m, fixed(0.1, 3.0), 0, rng_seed=9).data
    b = sharpen_masks(m, fixed(0.1, 3.0), 0, rng_seed=9).data
    c = sharpen_masks(m, fixed(0.1, 3.0), 0, rng_seed=10).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sharpen_eval_mode_drops_noise_keeps_exponent():
    m = normalize_masks(T.Tensor(np.random.default_rng(5).normal(size=(3, 4, 4))))
    ev = sharpen_masks(m, fixed(0.3, 3.0), 0, rng_seed=1, train_mode=False).data
    ref = m.data ** 3 / (m.data ** 3).sum(axis=0, keepdims=True)
    np.testing.assert_allclose(ev, ref, atol=1e-15)


def test_sharpen_noise_is_constant_in_backward():
    m = T.Tensor(pixel([0.6, 0.3, 0.1]) * np.ones((3, 2, 2)), requires_grad=True)
    r = np.random.default_rng(6).normal(size=(3, 2, 2))
    err = T.finite_diff_check(lambda p: T.sum(T.mul(sharpen_masks(p, fixed(0.05, 3.0), 0, rng_seed=2), T.Tensor(r))),
                              m)
    assert err < 1e-7


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 3, 3), elements=st.floats(-5, 5)), st.floats(1.0, 6.0), st.integers(0, 2 ** 31))
def test_mask_sums_after_normalize_and_sharpen(logits, gamma, seed):
    m = normalize_masks(T.Tensor(logits))
    assert np.abs(m.data.sum(axis=0) - 1).max() < 1e-9
    s = sharpen_masks(m, fixed(0.1, gamma), 0, rng_seed=seed).data
    assert np.abs(s.sum(axis=0) - 1).max() < 1e-9
    assert (s >= 0).all()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3,), elements=st.floats(-4, 4)))
def test_sharpening_monotonicity_sigma0(logits):
    m = normalize_masks(T.Tensor(logits.reshape(3, 1, 1))).data
    prev_top, prev_ent = m.max(), entropy(m.ravel())
    for g in (1.5, 2.0, 3.0, 5.0):
        s = sharpen_masks(T.Tensor(m), fixed(0.0, g), 0).data.ravel()
        assert s.max() >= prev_top - 1e-12
        assert entropy(s) <= prev_ent + 1e-12
        prev_top, prev_ent = s.max(), entropy(s)


def test_sharpen_floor_value():
    assert SHARPEN_FLOOR == 1e-6


# ---------------------------------------------------------- transform layer


def test_transform_layer_k1_identity():
    x = np.random.default_rng(7).normal(size=(3, 2, 3))
    y = transform_layer(x, np.ones((1, 2, 3)), np.zeros((1, 3)), np.zeros((1, 3)))
    np.testing.assert_array_equal(y.data, x)


def test_transform_layer_blend_of_translations():
    x = np.random.default_rng(8).normal(size=(3, 2, 2))
    y = transform_layer(x, np.full((2, 2, 2), 0.5), np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    np.testing.assert_allclose(y.data, x + np.array([0.5, 0.5, 0.0])[:, None, None], atol=1e-15)


def test_transform_layer_binary_mask_rotation():
    x = np.array([1.0, 0.0, 0.0]).reshape(3, 1, 1)
    masks = np.array([0.0, 1.0]).reshape(2, 1, 1)
    rot = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / 2]])
    trans = np.array([[5.0, 5.0, 5.0], [0.0, 0.0, 1.0]])
    y = transform_layer(x, masks, rot, trans)
    np.testing.assert_allclose(y.data.ravel(), [0.0, 1.0, 1.0], atol=1e-15)


def test_transform_layer_gradients_all_inputs():
    rng = np.random.default_rng(9)
    x = T.Tensor(rng.normal(size=(3, 2, 2)))
    logits = T.Tensor(rng.normal(size=(2, 2, 2)))
    a = T.Tensor(rng.normal(size=(2, 3)))
    t = T.Tensor(rng.normal(size=(2, 3)))
    r = T.Tensor(rng.normal(size=(3, 2, 2)))
    err = T.finite_diff_check(
        lambda *p: T.sum(T.mul(transform_layer(p[0], normalize_masks(p[1]), p[2], p[3]), r)), [x, logits, a, t])
    assert err < 1e-5


def test_transform_layer_k1_equals_rigid_transform_exactly():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 4, 5))
    a, t = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    y = transform_layer(x, np.ones((1, 4, 5)), a, t).data
    r = exp_map(a[0])
    ref = np.einsum("ab,bhw->ahw", r, x) + t[0][:, None, None]
    np.testing.assert_array_equal(y, ref)


def test_transform_layer_one_hot_preserves_segment_distances():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(3, 6, 6))
    labels = rng.integers(0, 3, size=(6, 6))
    masks = np.stack([(labels == i).astype(float) for i in range(3)])
    y = transform_layer(x, masks, rng.normal(size=(3, 3)), rng.normal(size=(3, 3))).data
    for i in range(3):
        p = x[:, labels == i].T
        q = y[:, labels == i].T
        dp = np.linalg.norm(p[:, None] - p[None], axis=-1)
        dq = np.linalg.norm(q[:, None] - q[None], axis=-1)
        assert np.abs(dp - dq).max() < 1e-9


def test_transform_layer_shape_errors():
    with pytest.raises(T.ShapeError):
        transform_layer(np.zeros((3, 2, 2)), np.ones((2, 3, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(T.ShapeError):
        transform_layer(np.zeros((3, 2, 2)), np.ones((2, 2, 2)), np.zeros((3, 3)), np.zeros((3, 3)))


# ------------------------------------------------------------- hard assign


def test_hard_assign_cases():
    onehot = np.zeros((3, 2, 2))
    onehot[1] = 1
    labels, hard = hard_assign(onehot)
    np.testing.assert_array_equal(hard, onehot)
    assert (labels == 1).all()
    tie_labels, _ = hard_assign(np.full((2, 1, 1), 0.5))
    assert tie_labels.item() == 0


def test_hard_assign_matches_naive_loop():
    m = np.random.default_rng(12).dirichlet(np.ones(4), size=(5, 6)).transpose(2, 0, 1)
    labels, hard = hard_assign(m)
    for i in range(5):
        for j in range(6):
            best = 0
            for c in range(1, 4):
                if m[c, i, j] > m[best, i, j]:
                    best = c
            assert labels[i, j] == best
            assert hard[best, i, j] == 1.0 and hard[:, i, j].sum() == 1.0
