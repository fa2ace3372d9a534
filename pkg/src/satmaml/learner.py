"""Coordinate-wise recurrent meta-learner.

A small two-layer LSTM, shared by every adapted coordinate, reads
``(theta, loss, grad)`` for each coordinate and emits a forget gate ``f``
and an input gate ``i``; the coordinate then moves to
``f * theta - i * grad``. With ``f = 1`` and ``i = rate`` this is a plain
gradient step.

Per-coordinate recurrent state makes memory grow with the number of
adapted weights, so :func:`lstm_adapt` refuses more than
``MAX_COORDINATES`` of them.

The learner is trained by truncated backpropagation through the unrolled
updates, treating the loss gradients and the learner inputs as constants
(the usual first-order simplification for learned optimisers).
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .adaptation import Schedule, subset_keys
from .errors import AdaptationDeclined, CapacityError
from .nn import ParamStore
from .optim import Adam

MAX_COORDINATES = 100_000
N_INPUTS = 3


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class LearnerState:
    h: list
    c: list


class CoordinateLearner:
    def __init__(self, width=8, n_layers=2, rng=None, forced_gates=None):
        self.width = width
        self.n_layers = n_layers
        self.forced_gates = forced_gates
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights = {}
        n_in = N_INPUTS
        for k in range(n_layers):
            scale = 1.0 / np.sqrt(n_in + width)
            self.weights[f"lstm{k}.W"] = rng.normal(0.0, scale, (n_in + width, 4 * width))
            b = np.zeros(4 * width)
            b[width:2 * width] = 1.0
            self.weights[f"lstm{k}.b"] = b
            n_in = width
        self.weights["head.W"] = rng.normal(0.0, 0.1 / np.sqrt(width), (width, 2))
        # Start close to a small gradient step: f ~ 0.98, i ~ 0.12.
        self.weights["head.b"] = np.array([4.0, -2.0])

    @classmethod
    def forced(cls, f, i):
        """A learner whose gates are fixed; ``i`` may be a scalar or a :class:`Schedule`."""
        return cls(width=1, n_layers=1, forced_gates=(f, i))

    def initial_state(self, n_coords):
        z = [np.zeros((n_coords, self.width)) for _ in range(self.n_layers)]
        return LearnerState(z, [a.copy() for a in z])

    def gates(self, inputs, state, weights=None):
        """Return ``(f, i, new_state, cache)`` for per-coordinate ``inputs`` of shape (N, 3)."""
        w = self.weights if weights is None else weights
        x = inputs
        new_h, new_c, cells = [], [], []
        for k in range(self.n_layers):
            h, c, cell = _cell_forward(x, state.h[k], state.c[k], w[f"lstm{k}.W"], w[f"lstm{k}.b"])
            new_h.append(h)
            new_c.append(c)
            cells.append(cell)
            x = h
        a = x @ w["head.W"] + w["head.b"]
        f, i = _sigmoid(a[:, 0]), _sigmoid(a[:, 1])
        return f, i, LearnerState(new_h, new_c), (cells, x, f, i)


def _cell_forward(x, h_prev, c_prev, W, b):
    H = h_prev.shape[1]
    xh = np.concatenate([x, h_prev], axis=1)
    z = xh @ W + b
    i = _sigmoid(z[:, :H])
    f = _sigmoid(z[:, H:2 * H])
    o = _sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, c_prev, i, f, o, g, tc)


def _cell_backward(cache, dh, dc, W):
    xh, c_prev, i, f, o, g, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    dxh = dz @ W.T
    H = c_prev.shape[1]
    n_in = xh.shape[1] - H
    return dxh[:, :n_in], dxh[:, n_in:], dc * f, xh.T @ dz, dz.sum(axis=0)


def coordinate_update(theta, loss, grad, learner, state):
    """One learned update of every coordinate: ``f * theta - i * grad``.

    Returns ``(theta_next, state_next)``.
    """
    if learner.forced_gates is not None:
        f, i = learner.forced_gates
        return f * theta - i * grad, state
    inputs = np.stack([theta, np.full_like(theta, loss), grad], axis=1)
    f, i, state, _ = learner.gates(inputs, state)
    return f * theta - i * grad, state


def _flatten(params, keys):
    entries = params.entries if hasattr(params, "entries") else params
    return np.concatenate([entries[k].ravel() for k in keys]) if keys else np.zeros(0)


def _unflatten(params, keys, flat):
    out = ParamStore()
    out.entries = dict(params.entries)
    out.running = params.running
    pos = 0
    for k in keys:
        n = params.entries[k].size
        out.entries[k] = flat[pos:pos + n].reshape(params.entries[k].shape)
        pos += n
    out.zero_grad()
    return out


def lstm_adapt(model, params, data, learner, steps, subset, max_coordinates=MAX_COORDINATES):
    """Adapt the selected coordinates with ``steps`` learned updates."""
    keys = subset_keys(params, subset)
    n = sum(params.entries[k].size for k in keys)
    if n > max_coordinates:
        raise CapacityError(
            f"coordinate-wise learner limited to {max_coordinates} coordinates, subset has {n}"
        )
    x, y = data
    if len(y) == 0:
        warnings.warn("no adaptation frames; adaptation declined", AdaptationDeclined, stacklevel=2)
        return params
    if learner.forced_gates is not None and isinstance(learner.forced_gates[1], Schedule):
        sched = learner.forced_gates[1]
        rates = np.concatenate([np.full(params.entries[k].size, sched.rate_for(k)) for k in keys])
        learner = CoordinateLearner.forced(learner.forced_gates[0], rates)
    state = learner.initial_state(n) if learner.forced_gates is None else None
    theta = params
    for _ in range(steps):
        loss, grads = model.loss_and_grads(theta, x, y)
        flat, state = coordinate_update(_flatten(theta, keys), loss, _flatten(grads, keys), learner, state)
        theta = _unflatten(theta, keys, flat)
    return theta


# -- meta-training of the learner -----------------------------------------


def rollout(learner, objective, theta0, steps, weights=None, frozen_inputs=None):
    """Unroll ``steps`` learned updates on a flat objective ``theta -> (loss, grad)``.

    Returns ``(meta_loss, record)`` where the meta-loss is the sum of the
    losses after each update. ``frozen_inputs`` replaces the live learner
    inputs, which makes the meta-loss an exact function of the weights for
    gradient checking.
    """
    theta = np.array(theta0, dtype=np.float64)
    state = learner.initial_state(theta.size)
    loss, grad = objective(theta)
    thetas, grads, caches, inputs_seq = [theta], [grad], [], []
    meta = 0.0
    for t in range(steps):
        inputs = (np.stack([theta, np.full_like(theta, loss), grad], axis=1)
                  if frozen_inputs is None else frozen_inputs[t])
        f, i, state, cache = learner.gates(inputs, state, weights)
        theta = f * theta - i * grad
        loss, grad = objective(theta)
        meta += loss
        thetas.append(theta)
        grads.append(grad)
        caches.append(cache)
        inputs_seq.append(inputs)
    return meta, (thetas, grads, caches, inputs_seq)


def rollout_grads(learner, record, weights=None):
    """First-order gradient of the rollout meta-loss w.r.t. the learner weights."""
    w = learner.weights if weights is None else weights
    thetas, grads, caches, _ = record
    steps = len(caches)
    dw = {k: np.zeros_like(v) for k, v in w.items()}
    n = thetas[0].size
    dh = [np.zeros((n, learner.width)) for _ in range(learner.n_layers)]
    dc = [np.zeros((n, learner.width)) for _ in range(learner.n_layers)]
    d_theta = grads[steps].copy()
    for t in reversed(range(steps)):
        cells, top, f, i = caches[t]
        d_f = d_theta * thetas[t]
        d_i = -d_theta * grads[t]
        d_theta = d_theta * f + (grads[t] if t >= 1 else 0.0)
        da = np.stack([d_f * f * (1.0 - f), d_i * i * (1.0 - i)], axis=1)
        dw["head.W"] += top.T @ da
        dw["head.b"] += da.sum(axis=0)
        d_below = da @ w["head.W"].T
        for k in reversed(range(learner.n_layers)):
            dx, dh[k], dc[k], dW, db = _cell_backward(cells[k], d_below + dh[k], dc[k], w[f"lstm{k}.W"])
            dw[f"lstm{k}.W"] += dW
            dw[f"lstm{k}.b"] += db
            d_below = dx
    return dw


def train_learner(learner, sample_task, steps, iterations, lr=0.01, rng=None):
    """Fit the learner with Adam on tasks drawn by ``sample_task(rng) -> (objective, theta0)``.

    Returns the per-iteration meta-losses.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(lr=lr)
    history = []
    for _ in range(iterations):
        objective, theta0 = sample_task(rng)
        meta, record = rollout(learner, objective, theta0, steps)
        history.append(meta)
        learner.weights = opt.step(learner.weights, rollout_grads(learner, record))
    return history
