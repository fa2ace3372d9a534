"""Feed-forward acoustic model with hand-written reverse-mode gradients.

Every hidden layer applies ``dense -> ReLU -> batch renorm -> LHUC``; a
final dense layer produces class logits. Inputs are frames stacked with
``context_frames`` neighbours on each side.

Parameters live in a :class:`ParamStore` keyed by ``"<layer>.<role>"``
strings, e.g. ``"0.weight"`` or ``"1.lhuc"``. Running normalisation
statistics are kept apart from the trainable entries so that nothing
that iterates over parameters can touch them by accident.
"""

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import layers
from .errors import DataError, DimensionError, UsageError

ROLES = ("weight", "bias", "gamma", "beta", "lhuc")
HIDDEN_STACK = ("dense", "relu", "renorm", "lhuc")
MODES = ("train", "infer", "adapt", "batch")


def param_id(layer, role):
    return f"{layer}.{role}"


def split_id(key):
    layer, role = key.split(".", 1)
    return int(layer), role


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 20
    hidden: tuple = (32, 32)
    n_classes: int = 11
    context_frames: int = 2
    silence_class: int = 0
    epsilon: float = layers.DEFAULT_EPSILON
    momentum: float = layers.DEFAULT_MOMENTUM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if not 0 <= self.silence_class < self.n_classes:
            raise ValueError("silence_class must be a valid class index")
        if self.input_dim < 1 or self.context_frames < 0 or any(w < 1 for w in self.hidden):
            raise ValueError(f"invalid model sizes: {self}")

    @property
    def frame_dim(self):
        return self.input_dim * (2 * self.context_frames + 1)

    @property
    def n_layers(self):
        """Number of dense layers, including the output layer."""
        return len(self.hidden) + 1

    @property
    def layer_sequence(self):
        return tuple(HIDDEN_STACK for _ in self.hidden) + (("dense",),)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ParamStore:
    """Named float64 parameters with a parallel gradient map.

    ``running`` holds the batch renorm statistics (``"<layer>.mean"`` and
    ``"<layer>.var"``); they are state, not parameters, and have no grads.
    """

    def __init__(self, entries=None, running=None):
        self.entries = {}
        self.grads = {}
        self.running = {}
        for k, v in (entries or {}).items():
            self.add(k, v)
        for k, v in (running or {}).items():
            self.running[k] = np.array(v, dtype=np.float64)

    def add(self, key, value):
        value = np.array(value, dtype=np.float64)
        self.entries[key] = value
        self.grads[key] = np.zeros_like(value)

    def __getitem__(self, key):
        return self.entries[key]

    def __setitem__(self, key, value):
        if key not in self.entries:
            raise KeyError(key)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.entries[key].shape:
            raise DimensionError(f"{key}: shape {value.shape} != {self.entries[key].shape}")
        self.entries[key] = value

    def __contains__(self, key):
        return key in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def keys(self):
        return self.entries.keys()

    def items(self):
        return self.entries.items()

    def copy(self):
        out = ParamStore()
        out.entries = {k: v.copy() for k, v in self.entries.items()}
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        out.running = {k: v.copy() for k, v in self.running.items()}
        return out

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.entries.items()}

    def size(self):
        return int(sum(v.size for v in self.entries.values()))


def init_params(config, rng):
    """He-initialised weights, unit renorm scale, identity LHUC, unit running variance."""
    params = ParamStore()
    fan_in = config.frame_dim
    for layer, width in enumerate(config.hidden):
        params.add(param_id(layer, "weight"), rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width)))
        params.add(param_id(layer, "bias"), np.zeros(width))
        params.add(param_id(layer, "gamma"), np.ones(width))
        params.add(param_id(layer, "beta"), np.zeros(width))
        params.add(param_id(layer, "lhuc"), np.zeros(width))
        params.running[param_id(layer, "mean")] = np.zeros(width)
        params.running[param_id(layer, "var")] = np.ones(width)
        fan_in = width
    out = len(config.hidden)
    params.add(param_id(out, "weight"), rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, config.n_classes)))
    params.add(param_id(out, "bias"), np.zeros(config.n_classes))
    return params


# -- kernels ---------------------------------------------------------------


class DenseCache(NamedTuple):
    x: np.ndarray
    W: np.ndarray


def dense_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"dense shapes do not conform: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    return x @ W + b, DenseCache(x, W)


def dense_backward(cache, grad_out):
    """Return ``(grad_x, grad_W, grad_b)``."""
    if cache is None:
        raise UsageError("dense_backward called without a forward trace")
    return grad_out @ cache.W.T, cache.x.T @ grad_out, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(x, 0.0), x


def relu_backward(cache, grad_out):
    if cache is None:
        raise UsageError("relu_backward called without a forward trace")
    return np.where(cache > 0.0, grad_out, 0.0)


def log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_xent(logits, labels):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def frame_error_rate(logits, labels):
    labels = np.asarray(labels)
    if labels.size == 0:
        raise UsageError("frame_error_rate needs at least one frame")
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index.
    return float(np.mean(np.argmax(logits, axis=1) != labels))


# -- full model ------------------------------------------------------------


@dataclass
class ForwardTrace:
    mode: str
    layers: list = field(default_factory=list)


def _renorm_state(config, params, layer):
    return layers.RenormState(
        gamma=params[param_id(layer, "gamma")],
        beta=params[param_id(layer, "beta")],
        mean=params.running[param_id(layer, "mean")],
        var=params.running[param_id(layer, "var")],
        momentum=config.momentum,
        epsilon=config.epsilon,
    )


def model_forward(config, params, x, mode="infer", stats_batch=None):
    """Run the layer stack and return ``(logits, trace)``.

    Modes select the normalisation path:

    ``train``
        batch renormalisation; the running statistics in ``params`` are
        updated in place (single writer).
    ``infer`` / ``adapt``
        frozen running statistics. Both modes are the same computation.
    ``batch``
        plain batch normalisation over blocks of ``stats_batch`` frames
        (the whole input when ``stats_batch`` is None).
    """
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.frame_dim:
        raise DimensionError(
            f"input shape {x.shape} does not match frame dimension {config.frame_dim}"
        )
    trace = ForwardTrace(mode)
    h = x
    for layer in range(len(config.hidden)):
        z, dense_c = dense_forward(h, params[param_id(layer, "weight")], params[param_id(layer, "bias")])
        a, relu_c = relu(z)
        if mode == "batch":
            n, norm_c = layers.batchnorm_forward(
                a, params[param_id(layer, "gamma")], params[param_id(layer, "beta")],
                config.epsilon, stats_batch,
            )
        elif mode == "train":
            state = _renorm_state(config, params, layer)
            n, norm_c = layers.renorm_forward_train(a, state, update=True)
            params.running[param_id(layer, "mean")] = state.mean
            params.running[param_id(layer, "var")] = state.var
        else:
            n, norm_c = layers.renorm_forward_infer(a, _renorm_state(config, params, layer))
        h, lhuc_c = layers.lhuc_forward(n, params[param_id(layer, "lhuc")])
        trace.layers.append((dense_c, relu_c, norm_c, lhuc_c))
    out = len(config.hidden)
    logits, dense_c = dense_forward(h, params[param_id(out, "weight")], params[param_id(out, "bias")])
    trace.layers.append((dense_c,))
    return logits, trace


def model_backward(config, params, trace, grad_logits, input_grad=False, wanted=None):
    """Reverse pass. Writes a fresh gradient dict into ``params.grads``.

    ``wanted`` restricts the work to a set of parameter ids; the others get
    zero gradients and the pass stops below the lowest layer still needed.
    Returns the input gradient when ``input_grad`` is set, else None.
    """
    if trace is None or len(trace.layers) != config.n_layers:
        raise UsageError("trace does not belong to this model configuration")
    need = set(params.entries) if wanted is None else set(wanted)
    lowest = min((split_id(k)[0] for k in need), default=config.n_layers)
    if input_grad:
        lowest = -1
    grads = {}
    out = len(config.hidden)
    (dense_c,) = trace.layers[out]
    g = grad_logits
    if out >= lowest:
        grads[param_id(out, "weight")] = dense_c.x.T @ g
        grads[param_id(out, "bias")] = g.sum(axis=0)
        if out > lowest:
            g = g @ dense_c.W.T
    for layer in reversed(range(min(out, len(config.hidden)))):
        if layer < lowest:
            break
        dense_c, relu_c, norm_c, lhuc_c = trace.layers[layer]
        g, grads[param_id(layer, "lhuc")] = layers.lhuc_backward(lhuc_c, g)
        if layer == lowest and need.isdisjoint(
                {param_id(layer, r) for r in ("gamma", "beta", "weight", "bias")}):
            break
        if trace.mode == "batch":
            g, g_gamma, g_beta = layers.batchnorm_backward(norm_c, g)
        else:
            g, g_gamma, g_beta = layers.renorm_backward(norm_c, g)
        grads[param_id(layer, "gamma")] = g_gamma
        grads[param_id(layer, "beta")] = g_beta
        g = relu_backward(relu_c, g)
        grads[param_id(layer, "weight")] = dense_c.x.T @ g
        grads[param_id(layer, "bias")] = g.sum(axis=0)
        if layer > lowest:
            g = g @ dense_c.W.T
    params.grads = {k: grads[k] if k in grads and k in need else np.zeros_like(v)
                    for k, v in params.entries.items()}
    return g if input_grad else None


class Network:
    """Loss/gradient oracle over a fixed configuration.

    ``adapt_mode`` is the normalisation path used for adaptation and
    evaluation: ``"adapt"`` (global running stats) or ``"batch"``.
    """

    def __init__(self, config, adapt_mode="adapt", stats_batch=None):
        if adapt_mode not in ("adapt", "infer", "batch"):
            raise UsageError(f"adaptation mode must be 'adapt' or 'batch', got {adapt_mode!r}")
        self.config = config
        self.adapt_mode = adapt_mode
        self.stats_batch = stats_batch

    def logits(self, params, x, mode=None):
        return model_forward(self.config, params, x, mode or self.adapt_mode, self.stats_batch)[0]

    def loss_and_grads(self, params, x, y, mode=None, wanted=None):
        logits, trace = model_forward(self.config, params, x, mode or self.adapt_mode, self.stats_batch)
        loss, g = softmax_xent(logits, y)
        model_backward(self.config, params, trace, g, wanted=wanted)
        return loss, params.grads

    def loss(self, params, x, y, mode=None):
        return softmax_xent(self.logits(params, x, mode), y)[0]

    def error_rate(self, params, x, y, mode=None):
        return frame_error_rate(self.logits(params, x, mode), y)

    def predict(self, params, x, mode=None):
        return np.argmax(self.logits(params, x, mode), axis=1)
