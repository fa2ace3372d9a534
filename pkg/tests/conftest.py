import numpy as np
import pytest

from satmaml.nn import ModelConfig, init_params


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def random_model(rng, hidden=(8, 8), input_dim=3, n_classes=4, context=1, perturb=True):
    """Small model with non-trivial renorm, LHUC and running statistics."""
    config = ModelConfig(input_dim=input_dim, hidden=hidden, n_classes=n_classes, context_frames=context)
    params = init_params(config, rng)
    if perturb:
        for k in params.keys():
            params[k] = params[k] + 0.3 * rng.normal(size=params[k].shape)
        for k in list(params.running):
            if k.endswith("var"):
                params.running[k] = rng.uniform(0.5, 2.0, params.running[k].shape)
            else:
                params.running[k] = rng.normal(0.0, 0.3, params.running[k].shape)
    return config, params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_corpus(seed=0, **kw):
    from satmaml.data import CorpusConfig, build_corpus
    cfg = dict(n_speakers=9, frames_per_speaker=600, heldout_frames_per_speaker=800, feature_dim=3,
               n_classes=4, split_fractions=(5 / 9, 2 / 9, 2 / 9))
    cfg.update(kw)
    return build_corpus(CorpusConfig(**cfg), seed)


def tiny_hyper(**kw):
    from satmaml.metatrain import TrainHyper
    h = dict(iterations=3, batches_per_iteration=4, batch_size=32, speakers_per_batch=3,
             meta_batches_per_iteration=2, adapt_budget=100, fit_iterations=5)
    h.update(kw)
    return TrainHyper(**h)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
