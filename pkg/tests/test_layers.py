import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satmaml.errors import DimensionError, UsageError
from satmaml.layers import (RenormState, batchnorm_backward, batchnorm_forward, chunk_bounds,
                            lhuc_amplitude, lhuc_backward, lhuc_forward, renorm_backward,
                            renorm_forward_infer, renorm_forward_train, update_running_stats)

from conftest import central_diff, rel_err


def state(width, rng=None, eps=1e-5, momentum=0.01):
    if rng is None:
        return RenormState(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width), momentum, eps)
    return RenormState(rng.normal(1, 0.3, width), rng.normal(0, 0.3, width), rng.normal(0, 1, width),
                       rng.uniform(0.2, 3.0, width), momentum, eps)


# -- LHUC ---------------------------------------------------------------------


def test_lhuc_identity(rng):
    h = rng.normal(size=(5, 4))
    out, _ = lhuc_forward(h, np.zeros(4))
    assert lhuc_amplitude(0.0) == 1.0
    assert np.max(np.abs(out - h) / np.maximum(np.abs(h), 1e-300)) < 1e-15


def test_lhuc_hand_values(rng):
    h = rng.normal(size=(3, 2))
    out, _ = lhuc_forward(h, np.full(2, np.log(3.0)))
    np.testing.assert_allclose(out, 1.5 * h, rtol=1e-14)
    out, _ = lhuc_forward(h, np.full(2, 60.0))
    np.testing.assert_allclose(out, 2.0 * h, rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(-700, 700))
def test_lhuc_amplitude_bounds(r):
    a = lhuc_amplitude(r)
    assert 0.0 <= a <= 2.0
    if abs(r) < 30:
        assert 0.0 < a < 2.0


def test_lhuc_backward_fd(rng):
    h = rng.normal(size=(6, 4))
    r = rng.normal(size=4)
    go = rng.normal(size=(6, 4))
    _, cache = lhuc_forward(h, r)
    gh, gr = lhuc_backward(cache, go)

    def f():
        return float(np.sum(lhuc_forward(h, r)[0] * go))

    assert rel_err(gh, central_diff(f, h)) < 1e-6
    assert rel_err(gr, central_diff(f, r)) < 1e-6


def test_lhuc_width_mismatch():
    with pytest.raises(DimensionError):
        lhuc_forward(np.zeros((2, 3)), np.zeros(4))


# -- renorm -------------------------------------------------------------------


def test_matched_stats_reduce_to_batchnorm(rng):
    h = rng.normal(2.0, 1.5, size=(32, 3))
    mu, var = h.mean(0), h.var(0)
    s = RenormState(np.ones(3), np.zeros(3), mu.copy(), var.copy())
    _, cache = renorm_forward_train(h, s, update=False)
    np.testing.assert_allclose(cache.r, 1.0, atol=1e-15)
    np.testing.assert_allclose(cache.d, 0.0, atol=1e-15)
    bn, _ = batchnorm_forward(h, np.ones(3), np.zeros(3), s.epsilon)
    np.testing.assert_allclose(cache.xhat, bn, atol=1e-12)


def test_r_d_hand_values():
    # batch mean 2 and biased variance 3 for a two-frame batch: 2 +- sqrt(3)
    h = np.array([[2.0 - np.sqrt(3.0)], [2.0 + np.sqrt(3.0)]])
    s = RenormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), epsilon=0.0)
    _, cache = renorm_forward_train(h, s, update=False)
    assert cache.r[0] == pytest.approx(np.sqrt(3.0), rel=1e-14)
    assert cache.d[0] == pytest.approx(2.0, rel=1e-14)


def test_renorm_train_equals_infer_randomised():
    r = np.random.default_rng(7)
    for _ in range(100):
        width = int(r.integers(1, 9))
        n = int(r.integers(2, 40))
        s = state(width, r)
        h = r.normal(r.normal(0, 3), r.uniform(0.1, 5), size=(n, width))
        ref, _ = renorm_forward_infer(h, s)
        out, _ = renorm_forward_train(h, s, update=True)
        assert np.max(np.abs(out - ref)) < 1e-9


def test_renorm_infer_hand_values(rng):
    s = state(3, rng)
    out, _ = renorm_forward_infer(np.tile(s.mean, (2, 1)), s)
    np.testing.assert_allclose(out, np.tile(s.beta, (2, 1)), atol=1e-15)
    s0 = RenormState(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), epsilon=0.0)
    h = rng.normal(size=(4, 2))
    np.testing.assert_array_equal(renorm_forward_infer(h, s0)[0], h)
    s1 = RenormState(np.array([2.0]), np.array([1.0]), np.array([1.0]), np.array([4.0]), epsilon=0.0)
    assert renorm_forward_infer(np.array([[5.0]]), s1)[0][0, 0] == 5.0


def test_renorm_backward_cases(rng):
    s0 = RenormState(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), epsilon=0.0)
    h = rng.normal(size=(5, 3))
    go = rng.normal(size=(5, 3))
    _, cache = renorm_forward_train(h, s0, update=False)
    gh, gg, gb = renorm_backward(cache, go)
    np.testing.assert_array_equal(gh, go)
    np.testing.assert_allclose(gg, np.sum(go * cache.xhat, 0), rtol=1e-15)
    for g in renorm_backward(cache, np.zeros_like(go)):
        assert not g.any()


def test_renorm_backward_fd_and_proportionality(rng):
    s = state(4, rng)
    h = rng.normal(size=(7, 4))
    go = rng.normal(size=(7, 4))
    _, cache = renorm_forward_train(h, s, update=False)
    gh, gg, gb = renorm_backward(cache, go)

    def f():
        return float(np.sum(renorm_forward_infer(h, s)[0] * go))

    assert rel_err(gh, central_diff(f, h)) < 1e-6
    assert rel_err(gg, central_diff(f, s.gamma)) < 1e-6
    assert rel_err(gb, central_diff(f, s.beta)) < 1e-6
    scale = s.gamma * (1.0 / np.sqrt(s.var + s.epsilon))
    np.testing.assert_array_equal(gh, go * scale)


def test_renorm_small_batch_and_shapes(rng):
    with pytest.raises(UsageError):
        renorm_forward_train(np.zeros((1, 3)), state(3))
    with pytest.raises(DimensionError):
        renorm_forward_train(np.zeros((4, 2)), state(3))
    with pytest.raises(DimensionError):
        RenormState(np.ones(3), np.zeros(2), np.zeros(3), np.ones(3))
    with pytest.raises(ValueError):
        RenormState(np.ones(1), np.zeros(1), np.zeros(1), -np.ones(1))


def test_running_stats_updates():
    s = RenormState(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), momentum=1.0)
    update_running_stats(s, np.array([3.0, -1.0]), np.array([2.0, 0.5]))
    np.testing.assert_array_equal(s.mean, [3.0, -1.0])
    np.testing.assert_array_equal(s.var, [2.0, 0.5])
    s = RenormState(np.ones(1), np.zeros(1), np.array([0.7]), np.ones(1), momentum=0.3)
    update_running_stats(s, np.array([0.7]), np.ones(1))
    assert s.mean[0] == 0.7
    s = RenormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), momentum=0.1)
    update_running_stats(s, np.ones(1), np.ones(1))
    assert s.mean[0] == pytest.approx(0.1, abs=1e-15)
    s.momentum = 0.0
    with pytest.raises(ValueError):
        update_running_stats(s, np.ones(1), np.ones(1))


def test_running_mean_converges():
    r = np.random.default_rng(3)
    true_mean, sd, n = 1.7, 2.0, 64
    s = RenormState(np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), momentum=0.01)
    for _ in range(3000):
        renorm_forward_train(r.normal(true_mean, sd, size=(n, 1)), s)
    # stationary EMA of batch means: sd_ema = sd/sqrt(n) * sqrt(m / (2 - m))
    se = sd / np.sqrt(n) * np.sqrt(0.01 / 1.99)
    assert abs(s.mean[0] - true_mean) < 3 * se
    assert s.var[0] == pytest.approx(sd ** 2 * (n - 1) / n, rel=0.05)


# -- per-batch statistics ------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 500), st.integers(1, 100))
def test_chunk_bounds_partition(n, chunk):
    b = chunk_bounds(n, chunk)
    assert b[0][0] == 0 and b[-1][1] == n
    assert all(hi == lo2 for (_, hi), (lo2, _) in zip(b, b[1:]))
    if n >= chunk:
        assert all(hi - lo >= chunk for lo, hi in b)


def test_batchnorm_backward_fd(rng):
    h = rng.normal(size=(10, 3))
    gamma, beta = rng.normal(1, 0.2, 3), rng.normal(size=3)
    go = rng.normal(size=(10, 3))
    _, cache = batchnorm_forward(h, gamma, beta, 1e-5, chunk=4)
    gh, gg, gb = batchnorm_backward(cache, go)

    def f():
        return float(np.sum(batchnorm_forward(h, gamma, beta, 1e-5, chunk=4)[0] * go))

    assert rel_err(gh, central_diff(f, h)) < 1e-6
    assert rel_err(gg, central_diff(f, gamma)) < 1e-6
    assert rel_err(gb, central_diff(f, beta)) < 1e-6
