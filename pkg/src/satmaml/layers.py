"""LHUC amplitude scaling and batch renormalisation.

Batch renormalisation here is the unclamped form: the batch-statistics
correction factors ``r`` and ``d`` make the training output equal to the
running-statistics output, and they are held constant in the backward
pass. As a consequence the gradient of the training path is exactly the
gradient of the inference path with the running statistics frozen.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, UsageError

DEFAULT_EPSILON = 1e-5
DEFAULT_MOMENTUM = 0.01


def lhuc_amplitude(r):
    """Per-unit amplitude ``2 * sigmoid(r)``, written as ``1 + tanh(r / 2)``.

    The tanh form is overflow free and gives exactly 1.0 at ``r = 0``.
    """
    return 1.0 + np.tanh(0.5 * np.asarray(r, dtype=np.float64))


class LhucCache(NamedTuple):
    h: np.ndarray
    r: np.ndarray
    amplitude: np.ndarray


def lhuc_forward(h, r):
    if h.shape[-1] != r.shape[-1]:
        raise DimensionError(f"lhuc width mismatch: activations {h.shape} vs parameters {r.shape}")
    a = lhuc_amplitude(r)
    return h * a, LhucCache(h, r, a)


def lhuc_backward(cache, grad_out):
    """Return ``(grad_h, grad_r)``."""
    if cache is None:
        raise UsageError("lhuc_backward called without a forward trace")
    t = np.tanh(0.5 * cache.r)
    d_amp = 0.5 * (1.0 - t * t)
    grad_h = grad_out * cache.amplitude
    grad_r = np.sum(grad_out * cache.h, axis=0) * d_amp
    return grad_h, grad_r


@dataclass
class RenormState:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        width = self.gamma.shape
        for name in ("beta", "mean", "var"):
            if getattr(self, name).shape != width:
                raise DimensionError(
                    f"renorm {name} shape {getattr(self, name).shape} != gamma shape {width}"
                )
        if np.any(self.var < 0):
            raise ValueError("running variance must be non-negative")


class RenormCache(NamedTuple):
    xhat: np.ndarray        # normalised input before the affine scale/shift
    gamma: np.ndarray
    inv_std: np.ndarray     # 1 / sqrt(var_G + eps), the constant backward scale
    r: np.ndarray | None
    d: np.ndarray | None
    batch_mean: np.ndarray | None
    batch_var: np.ndarray | None


def batch_moments(h):
    """Batch mean and biased (1/N) variance over axis 0."""
    mu = h.mean(axis=0)
    var = np.mean((h - mu) ** 2, axis=0)
    return mu, var


def renorm_forward_train(h, state, update=True):
    """Training-path batch renormalisation.

    Normalises with batch statistics corrected by ``r`` and ``d``; then, if
    ``update`` is set, folds the batch statistics into ``state``. The
    correction uses the running statistics from *before* the update.
    """
    if h.ndim != 2 or h.shape[0] < 2:
        raise UsageError(f"batch renormalisation needs a batch of at least 2 frames, got shape {h.shape}")
    if h.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"renorm width mismatch: activations {h.shape} vs state {state.gamma.shape}")
    eps = state.epsilon
    mu_b, var_b = batch_moments(h)
    std_b = np.sqrt(var_b + eps)
    std_g = np.sqrt(state.var + eps)
    r = std_b / std_g
    d = (mu_b - state.mean) / std_g
    xhat = r * (h - mu_b) / std_b + d
    out = state.gamma * xhat + state.beta
    cache = RenormCache(xhat, state.gamma, 1.0 / std_g, r, d, mu_b, var_b)
    if update:
        update_running_stats(state, mu_b, var_b)
    return out, cache


def renorm_forward_infer(h, state):
    if h.shape[-1] != state.gamma.shape[0]:
        raise DimensionError(f"renorm width mismatch: activations {h.shape} vs state {state.gamma.shape}")
    inv_std = 1.0 / np.sqrt(state.var + state.epsilon)
    xhat = (h - state.mean) * inv_std
    out = state.gamma * xhat + state.beta
    return out, RenormCache(xhat, state.gamma, inv_std, None, None, None, None)


def renorm_backward(cache, grad_out):
    """Backward pass with ``r`` and ``d`` (equivalently the running stats) held constant."""
    if cache is None:
        raise UsageError("renorm_backward called without a forward trace")
    grad_h = grad_out * (cache.gamma * cache.inv_std)
    grad_gamma = np.sum(grad_out * cache.xhat, axis=0)
    grad_beta = np.sum(grad_out, axis=0)
    return grad_h, grad_gamma, grad_beta


def update_running_stats(state, batch_mean, batch_var):
    m = state.momentum
    if not 0.0 < m <= 1.0:
        raise ValueError(f"momentum must lie in (0, 1], got {m}")
    state.mean = (1.0 - m) * state.mean + m * batch_mean
    state.var = np.maximum((1.0 - m) * state.var + m * batch_var, 0.0)
    return state


def chunk_bounds(n, chunk):
    """Split ``n`` frames into consecutive normalisation batches of at least ``chunk`` frames.

    A short remainder is merged into the preceding batches, so no batch
    (other than a lone one when ``n < chunk``) is smaller than ``chunk``.
    """
    if chunk is None or chunk >= n:
        return [(0, n)]
    n_chunks = n // chunk
    sizes = np.full(n_chunks, n // n_chunks)
    sizes[: n % n_chunks] += 1
    ends = np.cumsum(sizes)
    return list(zip(np.concatenate([[0], ends[:-1]]).tolist(), ends.tolist()))


class BatchNormCache(NamedTuple):
    xhat: np.ndarray
    gamma: np.ndarray
    inv_std: np.ndarray     # per frame, broadcast from its normalisation batch
    bounds: list


def batchnorm_forward(h, gamma, beta, epsilon=DEFAULT_EPSILON, chunk=None):
    """Plain batch normalisation with the statistics of each normalisation batch.

    This is the "batch stats" evaluation mode: every block of ``chunk``
    consecutive frames is normalised by its own mean and variance.
    """
    bounds = chunk_bounds(h.shape[0], chunk)
    xhat = np.empty_like(h)
    inv_std = np.empty_like(h)
    for lo, hi in bounds:
        mu, var = batch_moments(h[lo:hi])
        s = 1.0 / np.sqrt(var + epsilon)
        xhat[lo:hi] = (h[lo:hi] - mu) * s
        inv_std[lo:hi] = s
    return gamma * xhat + beta, BatchNormCache(xhat, gamma, inv_std, bounds)


def batchnorm_backward(cache, grad_out):
    """Full batch-norm gradient, differentiating through the batch statistics."""
    grad_gamma = np.sum(grad_out * cache.xhat, axis=0)
    grad_beta = np.sum(grad_out, axis=0)
    g = grad_out * cache.gamma
    grad_h = np.empty_like(g)
    for lo, hi in cache.bounds:
        gx = g[lo:hi]
        xh = cache.xhat[lo:hi]
        grad_h[lo:hi] = cache.inv_std[lo:hi] * (
            gx - gx.mean(axis=0) - xh * np.mean(gx * xh, axis=0)
        )
    return grad_h, grad_gamma, grad_beta
