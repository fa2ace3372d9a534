"""Plain-text ``key = value`` experiment configuration.

A config file must list every key of :class:`ExperimentConfig` (write one
with ``satmaml init-config``); missing or unknown keys are errors. Lists
are comma separated. ``#`` starts a comment.
"""

from dataclasses import dataclass, fields

from .data import CorpusConfig
from .errors import ConfigError
from .metatrain import TrainHyper
from .nn import ModelConfig


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # corpus
    n_speakers: int = 30
    frames_per_speaker: int = 4000
    heldout_frames_per_speaker: int = 12000
    feature_dim: int = 20
    n_classes: int = 11
    spread: float = 0.7
    silence_fraction: float = 0.15
    class_std: float = 1.0
    noise_correlation: float = 0.95
    min_duration: int = 6
    max_duration: int = 24
    split_fractions: tuple = (2 / 3, 1 / 6, 1 / 6)
    # model
    hidden: tuple = (32, 32)
    context_frames: int = 2
    epsilon: float = 1e-5
    momentum: float = 0.01
    # training
    iterations: int = 20
    batches_per_iteration: int = 40
    batch_size: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    si_probability: float = 0.5
    labeller_seed_offset: int = 1000
    # meta-learning
    maml_iterations: int = 10
    meta_batches_per_iteration: int = 8
    speakers_per_batch: int = 4
    adapt_budget: int = 1000
    adapt_steps: int = 3
    unadapted_weight: float = 0.5
    fit_iterations: int = 16
    fit_lr: float = 0.1
    fit_episodes_per_speaker: int = 1
    # evaluation
    frames_per_second: int = 100
    budgets: tuple = (1000, 3000, 6000)
    eval_frames: int = 4000
    stats_batch_frames: int = 64
    fixed_lhuc_rate: float = 0.7

    def corpus_config(self):
        return CorpusConfig(
            n_speakers=self.n_speakers, frames_per_speaker=self.frames_per_speaker,
            heldout_frames_per_speaker=self.heldout_frames_per_speaker,
            feature_dim=self.feature_dim, n_classes=self.n_classes, spread=self.spread,
            silence_fraction=self.silence_fraction, class_std=self.class_std,
            noise_correlation=self.noise_correlation, min_duration=self.min_duration,
            max_duration=self.max_duration,
            split_fractions=self.split_fractions,
        )

    def model_config(self):
        return ModelConfig(input_dim=self.feature_dim, hidden=self.hidden, n_classes=self.n_classes,
                           context_frames=self.context_frames, epsilon=self.epsilon,
                           momentum=self.momentum)

    def train_hyper(self, seed=None, iterations=None):
        return TrainHyper(
            iterations=self.iterations if iterations is None else iterations,
            batches_per_iteration=self.batches_per_iteration, batch_size=self.batch_size,
            lr=self.lr, val_fraction=self.val_fraction,
            seed=self.seed if seed is None else seed,
            speakers_per_batch=self.speakers_per_batch,
            meta_batches_per_iteration=self.meta_batches_per_iteration,
            adapt_budget=self.adapt_budget, adapt_steps=self.adapt_steps,
            unadapted_weight=self.unadapted_weight, fit_iterations=self.fit_iterations,
            fit_lr=self.fit_lr, fit_episodes_per_speaker=self.fit_episodes_per_speaker,
        )

    def budget_label(self, budget):
        seconds = budget / self.frames_per_second
        return f"{seconds:g}s"


def _parse(kind, value, key):
    try:
        if kind is tuple:
            return tuple(float(v) if "." in v or "e" in v.lower() else int(v)
                         for v in (s.strip() for s in value.split(",")) if v)
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {value!r}") from None


def _format(value):
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_config(text):
    types = {f.name: f.type if isinstance(f.type, type) else eval(f.type) for f in fields(ExperimentConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        values[key] = _parse(types[key], value, key)
    missing = [k for k in types if k not in values]
    if missing:
        raise ConfigError(f"missing config key: {missing[0]}")
    return ExperimentConfig(**values)


def format_config(config):
    return "".join(f"{f.name} = {_format(getattr(config, f.name))}\n" for f in fields(config))


def load_config(path):
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
