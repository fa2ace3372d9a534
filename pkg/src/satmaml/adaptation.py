"""Gradient-descent adaptation with learned per-layer learning rates.

The adaptation function takes ``steps`` full-batch gradient steps on the
adaptation data, moving only the selected parameter subset, with one
learning rate per ``(layer, role group)``::

    theta_j = theta_{j-1} - rate[layer.group] * grad L(D_a; theta_{j-1})

Role groups are ``dense`` (weight, bias), ``norm`` (gamma, beta) and
``lhuc``. Running normalisation statistics are never adapted.
"""

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AdaptationDeclined, DataError, UsageError
from .nn import ParamStore, split_id

ROLE_GROUPS = {"weight": "dense", "bias": "dense", "gamma": "norm", "beta": "norm", "lhuc": "lhuc"}
SUBSETS = ("LHUC", "ALL")
DEFAULT_STEPS = 3
INITIAL_RATE = 0.001


def group_of(key):
    layer, role = split_id(key)
    return f"{layer}.{ROLE_GROUPS[role]}"


def check_subset(subset):
    subset = str(subset).upper()
    if subset not in SUBSETS:
        raise UsageError(f"unknown parameter subset {subset!r}; expected LHUC or ALL")
    return subset


def subset_keys(params, subset):
    """Parameter ids selected by ``subset``, in store order."""
    subset = check_subset(subset)
    if subset == "ALL":
        return list(params.keys())
    return [k for k in params.keys() if split_id(k)[1] == "lhuc"]


@dataclass
class Schedule:
    """Learning rate per ``"<layer>.<group>"`` plus the number of adaptation steps."""

    rates: dict = field(default_factory=dict)
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        self.rates = {k: float(v) for k, v in self.rates.items()}
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        bad = [k for k, v in self.rates.items() if not v >= 0.0]
        if bad:
            raise ValueError(f"learning rates must be non-negative: {bad}")

    @classmethod
    def initial(cls, params, subset, value=INITIAL_RATE, steps=DEFAULT_STEPS):
        rates = {}
        for key in subset_keys(params, subset):
            rates.setdefault(group_of(key), value)
        return cls(rates, steps)

    def rate_for(self, key):
        try:
            return self.rates[group_of(key)]
        except KeyError:
            raise UsageError(f"schedule has no learning rate for {group_of(key)} (parameter {key})") from None

    def scaled(self, factor):
        return Schedule({k: v * factor for k, v in self.rates.items()}, self.steps)

    def to_text(self, header=None):
        lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
        lines.append(f"steps = {self.steps}")
        lines += [f"{k} = {v!r}" for k, v in self.rates.items()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; returns ``(schedule, header)``."""
        rates, header, steps = {}, {}, None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            comment = line.startswith("#")
            body = line.lstrip("#").strip()
            if "=" not in body:
                if comment:
                    continue
                raise DataError(f"schedule line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in body.split("=", 1))
            if comment:
                header[key] = value
            elif key == "steps":
                steps = int(value)
            elif re.fullmatch(r"\d+\.(dense|norm|lhuc)", key):
                rates[key] = float(value)
            else:
                raise DataError(f"schedule line {lineno}: unknown key {key!r}")
        if steps is None:
            raise DataError("schedule file is missing 'steps'")
        return cls(rates, steps), header


@dataclass
class Episode:
    """Adaptation data ``(x_a, y_a)`` and unseen evaluation data ``(x_u, y_u)`` of one speaker."""

    speaker: str
    x_a: np.ndarray
    y_a: np.ndarray
    x_u: np.ndarray
    y_u: np.ndarray
    offset: int = 0

    @property
    def adaptation(self):
        return self.x_a, self.y_a

    @property
    def unseen(self):
        return self.x_u, self.y_u

    def with_adaptation(self, x_a, y_a):
        return Episode(self.speaker, x_a, y_a, self.x_u, self.y_u, self.offset)


def silence_filter(x, y, silence_class=0):
    keep = np.asarray(y) != silence_class
    return x[keep], np.asarray(y)[keep]


def adapt_step(params, grads, schedule, subset):
    """One gradient step on the selected tensors; everything else is shared unchanged."""
    out = ParamStore()
    out.entries = dict(params.entries)
    out.running = params.running
    for key in subset_keys(params, subset):
        if key not in grads:
            raise UsageError(f"no gradient for selected parameter {key}")
        out.entries[key] = params.entries[key] - schedule.rate_for(key) * grads[key]
    out.zero_grad()
    return out


def adapt_trajectory(model, params, data, schedule, subset):
    """Run the adaptation loop; returns ``(adapted, inner_grads, inner_losses)``.

    ``inner_grads[j]`` holds the subset gradients used at step ``j``.
    """
    x, y = data
    keys = subset_keys(params, subset)
    theta = params
    inner_grads, losses = [], []
    for _ in range(schedule.steps):
        loss, grads = model.loss_and_grads(theta, x, y, wanted=keys)
        inner_grads.append({k: grads[k] for k in keys})
        losses.append(loss)
        theta = adapt_step(theta, grads, schedule, subset)
    return theta, inner_grads, losses


def adapt(model, params, data, schedule, subset):
    """Adapt ``params`` to ``data = (x, y)``; returns new parameters.

    With no adaptation frames the call is declined: an
    :class:`AdaptationDeclined` warning is issued and ``params`` returned.
    """
    if len(data[1]) == 0:
        warnings.warn("no adaptation frames; adaptation declined", AdaptationDeclined, stacklevel=2)
        return params
    return adapt_trajectory(model, params, data, schedule, subset)[0]
