"""Trainers: baseline, SAT-LHUC, SAT-MAML, and test-time schedule fitting.

All trainers use Adam and early stopping on a validation criterion that is
evaluated once per iteration; the returned parameters are the best
snapshot seen (iteration 0, the initialisation, included).

Meta-learning uses first-order gradients. For an episode with adaptation
data ``D_a``, unseen data ``D_u`` and mixing weight ``lam``::

    J_e        = lam * L(D_u; theta) + (1 - lam) * L(D_u; theta')
    dJ/dtheta  = lam * grad L(D_u; theta) + (1 - lam) * grad L(D_u; theta')
    dJ/drate_g = -(1 - lam) * sum_j < grad L(D_u; theta')[g], g_j[g] >

where ``theta'`` is the adapted point and ``g_j`` the inner-step
gradients, all treated as constants.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .adaptation import (Episode, Schedule, adapt_trajectory, check_subset, group_of,
                         silence_filter)
from .data import sample_episode, speaker_frames
from .errors import DataError, UsageError
from .nn import Network, ParamStore, init_params, model_forward, split_id
from .optim import Adam

log = logging.getLogger(__name__)

SI_PROBABILITY = 0.5
SPEAKERS_PER_BATCH = 4


@dataclass
class TrainHyper:
    iterations: int = 20
    batches_per_iteration: int = 40
    batch_size: int = 256
    chunk_frames: int = 8
    lr: float = 1e-3
    val_fraction: float = 0.1
    seed: int = 0
    # meta-learning
    speakers_per_batch: int = SPEAKERS_PER_BATCH
    meta_batches_per_iteration: int = 10
    adapt_budget: int = 1000
    adapt_steps: int = 3
    unadapted_weight: float = 0.5
    # schedule fitting
    fit_iterations: int = 40
    fit_lr: float = 0.02
    fit_episodes_per_speaker: int = 1


@dataclass
class TrainResult:
    params: ParamStore
    history: list = field(default_factory=list)
    best_iteration: int = 0
    final: ParamStore = None
    snapshots: dict = field(default_factory=dict)
    schedule: Schedule = None
    bank: dict = None

    def log_lines(self):
        return [" ".join(f"{k}={_fmt(v)}" for k, v in row.items()) for row in self.history]


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def streams(seed):
    """Independent generators for initialisation, data order, SAT coins and meta sampling."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def train_region(corpus, speaker_id, val_fraction):
    n = corpus[speaker_id].n_frames
    return n - int(round(n * val_fraction))


class BatchSampler:
    """Single-speaker mini-batches built from contiguous chunks of frames."""

    def __init__(self, corpus, context, hyper):
        self.corpus = corpus
        self.context = context
        self.hyper = hyper
        self.speakers = corpus.ids("train")
        if not self.speakers:
            raise UsageError("corpus has no training speakers")
        self.limits = {s: train_region(corpus, s, hyper.val_fraction) for s in self.speakers}

    def sample(self, rng):
        from .data import stack_context

        sid = self.speakers[int(rng.integers(len(self.speakers)))]
        chunk = self.hyper.chunk_frames
        n_chunks = max(1, self.hyper.batch_size // chunk)
        starts = rng.integers(0, self.limits[sid] - chunk + 1, size=n_chunks)
        idx = (starts[:, None] + np.arange(chunk)).ravel()
        spk = self.corpus[sid]
        return sid, stack_context(spk.frames, idx, self.context), spk.labels[idx]

    def validation_set(self):
        xs, ys = [], []
        for s in self.speakers:
            x, y = speaker_frames(self.corpus, s, self.limits[s], self.corpus[s].n_frames, self.context)
            xs.append(x)
            ys.append(y)
        return np.concatenate(xs), np.concatenate(ys)


def _frozen_lhuc(params):
    return {k for k in params.keys() if split_id(k)[1] == "lhuc"}


def baseline_train(config, corpus, hyper, init=None, snapshot_at=(), val_set=None):
    """Mini-batch cross-entropy training with Adam and per-iteration early stopping.

    LHUC amplitudes stay at identity; they are only used for adaptation.
    ``snapshot_at`` lists iterations whose current (not best) parameters
    are kept in ``result.snapshots``.
    """
    r_init, r_data, _, _ = streams(hyper.seed)
    params = init.copy() if init is not None else init_params(config, r_init)
    sampler = BatchSampler(corpus, config.context_frames, hyper)
    net = Network(config)
    x_val, y_val = val_set if val_set is not None else sampler.validation_set()
    trainable = [k for k in params.keys() if k not in _frozen_lhuc(params)]
    opt = Adam(hyper.lr)
    best, best_val, best_it = params.copy(), net.loss(params, x_val, y_val, "infer"), 0
    result = TrainResult(best)
    if 0 in snapshot_at:
        result.snapshots[0] = params.copy()
    for it in range(1, hyper.iterations + 1):
        losses = []
        for _ in range(hyper.batches_per_iteration):
            _, x, y = sampler.sample(r_data)
            loss, grads = net.loss_and_grads(params, x, y, mode="train")
            params.entries = opt.step(params.entries, grads, trainable)
            losses.append(loss)
        val = net.loss(params, x_val, y_val, "infer")
        result.history.append({"iter": it, "train_loss": float(np.mean(losses)), "val_loss": val})
        if val < best_val:
            best, best_val, best_it = params.copy(), val, it
        if it in snapshot_at:
            result.snapshots[it] = params.copy()
    result.params, result.best_iteration, result.final = best, best_it, params
    return result


# -- SAT-LHUC --------------------------------------------------------------


def draw_si_coins(rng, n, probability=SI_PROBABILITY):
    """True where the speaker-independent LHUC vector is used."""
    return rng.random(n) < probability


@dataclass
class SpeakerLhucBank:
    """Per-training-speaker LHUC vectors plus the shared speaker-independent one.

    The speaker-independent vector is the identity (zeros) and is not
    trained, so a model that always draws it trains exactly like the
    baseline.
    """

    vectors: dict
    independent: dict

    @classmethod
    def create(cls, params, speakers):
        keys = sorted(_frozen_lhuc(params), key=lambda k: split_id(k)[0])
        independent = {k: params[k].copy() for k in keys}
        return cls({s: {k: v.copy() for k, v in independent.items()} for s in speakers}, independent)


def sat_lhuc_step(net, params, bank, opt, speaker, x, y, use_si, trainable):
    if speaker not in bank.vectors:
        raise DataError(f"speaker {speaker!r} has no LHUC vector in the bank")
    lhuc = bank.independent if use_si else bank.vectors[speaker]
    params.entries.update(lhuc)
    loss, grads = net.loss_and_grads(params, x, y, mode="train")
    params.entries = opt.step(params.entries, grads, trainable)
    if not use_si:
        sd = {f"{speaker}/{k}": v for k, v in lhuc.items()}
        sd_grads = {f"{speaker}/{k}": grads[k] for k in lhuc}
        sd = opt.step(sd, sd_grads)
        bank.vectors[speaker] = {k: sd[f"{speaker}/{k}"] for k in lhuc}
    params.entries.update(bank.independent)
    return loss


def sat_lhuc_train(config, corpus, hyper, si_probability=SI_PROBABILITY, init=None, val_set=None):
    """Speaker adaptive training with per-speaker LHUC vectors.

    Every mini-batch comes from one speaker; a coin decides whether it uses
    the speaker-independent vector (probability ``si_probability``) or the
    speaker's own one. Coins come from their own random stream, so data
    order matches :func:`baseline_train` for the same seed.
    """
    r_init, r_data, r_coin, _ = streams(hyper.seed)
    params = init.copy() if init is not None else init_params(config, r_init)
    sampler = BatchSampler(corpus, config.context_frames, hyper)
    bank = SpeakerLhucBank.create(params, sampler.speakers)
    net = Network(config)
    x_val, y_val = val_set if val_set is not None else sampler.validation_set()
    trainable = [k for k in params.keys() if k not in _frozen_lhuc(params)]
    opt = Adam(hyper.lr)
    best, best_val, best_it = params.copy(), net.loss(params, x_val, y_val, "infer"), 0
    result = TrainResult(best, bank=bank)
    si_count = 0
    for it in range(1, hyper.iterations + 1):
        losses = []
        coins = draw_si_coins(r_coin, hyper.batches_per_iteration, si_probability)
        for use_si in coins:
            sid, x, y = sampler.sample(r_data)
            losses.append(sat_lhuc_step(net, params, bank, opt, sid, x, y, bool(use_si), trainable))
        si_count += int(coins.sum())
        val = net.loss(params, x_val, y_val, "infer")
        result.history.append({"iter": it, "train_loss": float(np.mean(losses)), "val_loss": val,
                               "si_fraction": float(coins.mean())})
        if val < best_val:
            best, best_val, best_it = params.copy(), val, it
    result.params, result.best_iteration, result.final = best, best_it, params
    return result


# -- meta-learning ---------------------------------------------------------


class MetaBatch(list):
    """Episodes of distinct speakers."""

    def __init__(self, episodes):
        super().__init__(episodes)
        speakers = [e.speaker for e in self]
        if len(set(speakers)) != len(speakers):
            raise UsageError(f"meta-batch speakers must be distinct, got {speakers}")


@dataclass(frozen=True)
class LossCombo:
    unadapted_weight: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.unadapted_weight <= 1.0:
            raise ValueError("unadapted_weight must lie in [0, 1]")


class MetaGrads(NamedTuple):
    loss: float
    theta: dict
    phi: dict


def _episode_terms(model, params, schedule, subset, combo, episode, need_theta=True):
    lam = combo.unadapted_weight
    wanted = None if need_theta else [k for k in params.keys() if group_of(k) in schedule.rates]
    theta = {}
    loss = 0.0
    if lam > 0.0:
        l0, g0 = model.loss_and_grads(params, episode.x_u, episode.y_u)
        loss += lam * l0
        theta = {k: lam * g for k, g in g0.items()}
    phi = {g: 0.0 for g in schedule.rates}
    if lam < 1.0:
        if len(episode.y_a):
            adapted, inner, _ = adapt_trajectory(model, params, episode.adaptation, schedule, subset)
        else:
            adapted, inner = params, []
        l1, g1 = model.loss_and_grads(adapted, episode.x_u, episode.y_u, wanted=wanted)
        loss += (1.0 - lam) * l1
        for k, g in g1.items():
            theta[k] = theta[k] + (1.0 - lam) * g if k in theta else (1.0 - lam) * g
        for step_grads in inner:
            for k, g in step_grads.items():
                phi[group_of(k)] -= (1.0 - lam) * float(np.vdot(g1[k], g))
    return loss, theta, phi


def fomaml_grads(model, params, schedule, meta_batch, combo, subset, map_fn=map, need_theta=True):
    """Meta-loss and first-order gradients w.r.t. ``theta`` and the schedule rates.

    Episodes may be evaluated by any ordered ``map_fn`` (e.g. a thread pool's
    ``map``); the reduction always runs in episode order. With
    ``need_theta=False`` only the schedule gradient is computed and the
    ``theta`` entries are zero.
    """
    subset = check_subset(subset)
    terms = list(map_fn(lambda e: _episode_terms(model, params, schedule, subset, combo, e, need_theta),
                        meta_batch))
    loss = 0.0
    theta = {k: np.zeros_like(v) for k, v in params.items()}
    phi = {g: 0.0 for g in schedule.rates}
    for l, t, p in terms:
        loss += l
        for k, g in t.items():
            theta[k] = theta[k] + g
        for g, v in p.items():
            phi[g] += v
    return MetaGrads(loss, theta, phi)


def meta_loss(model, params, schedule, meta_batch, combo, subset):
    """Sum over episodes of the combined unadapted/adapted loss on unseen data."""
    subset = check_subset(subset)
    lam = combo.unadapted_weight
    total = 0.0
    for e in meta_batch:
        if lam > 0.0:
            total += lam * model.loss(params, e.x_u, e.y_u)
        if lam < 1.0:
            adapted = (adapt_trajectory(model, params, e.adaptation, schedule, subset)[0]
                       if len(e.y_a) else params)
            total += (1.0 - lam) * model.loss(adapted, e.x_u, e.y_u)
    return total


def filtered(episode, silence_class=0):
    return episode.with_adaptation(*silence_filter(episode.x_a, episode.y_a, silence_class))


def assert_speaker_disjoint(a, b):
    common = set(a) & set(b)
    if common:
        raise UsageError(f"meta splits share speakers: {sorted(common)}")


def _clamp(rates):
    return {k: max(0.0, float(v)) for k, v in rates.items()}


def sat_maml_train(config, corpus, hyper, warm_start, subset, combo=None, val_speakers=None, map_fn=map):
    """Joint first-order meta-training of the weights and the adaptation schedule.

    Starts from the ``warm_start`` parameters and a schedule of 0.001 per
    group. Each iteration runs ``meta_batches_per_iteration`` updates on
    episodes from ``speakers_per_batch`` distinct training speakers, then
    scores the meta-validation speakers; the best snapshot is returned.
    """
    subset = check_subset(subset)
    combo = combo or LossCombo(hyper.unadapted_weight)
    train_speakers = corpus.ids("train")
    val_speakers = corpus.ids("meta-val") if val_speakers is None else val_speakers
    if not train_speakers or not val_speakers:
        raise UsageError("SAT-MAML needs non-empty meta-train and meta-validation speaker sets")
    assert_speaker_disjoint(train_speakers, val_speakers)
    if hyper.speakers_per_batch > len(train_speakers):
        raise UsageError("speakers_per_batch exceeds the number of training speakers")
    _, _, _, r_meta = streams(hyper.seed)
    net = Network(config)
    sil = config.silence_class
    params = warm_start.copy()
    schedule = Schedule.initial(params, subset, steps=hyper.adapt_steps)
    budget = hyper.adapt_budget
    limits = {s: train_region(corpus, s, hyper.val_fraction) for s in train_speakers}
    for s, n in limits.items():
        if n < 2 * budget:
            raise UsageError(f"training speaker {s} has {n} frames, fewer than two budgets of {budget}")
    val_batch = MetaBatch([filtered(sample_episode(corpus, s, budget, 0, config.context_frames), sil)
                           for s in val_speakers])
    opt_theta, opt_phi = Adam(hyper.lr), Adam(hyper.lr)

    def validate(p, sch):
        return meta_loss(net, p, sch, val_batch, combo, subset)

    best = (params.copy(), Schedule(dict(schedule.rates), schedule.steps))
    best_val, best_it = validate(params, schedule), 0
    result = TrainResult(best[0])
    for it in range(1, hyper.iterations + 1):
        losses = []
        for _ in range(hyper.meta_batches_per_iteration):
            chosen = r_meta.choice(len(train_speakers), size=hyper.speakers_per_batch, replace=False)
            episodes = []
            for j in chosen:
                s = train_speakers[int(j)]
                offset = int(r_meta.integers(0, limits[s] - 2 * budget + 1))
                episodes.append(filtered(sample_episode(corpus, s, budget, offset, config.context_frames), sil))
            batch = MetaBatch(episodes)
            mg = fomaml_grads(net, params, schedule, batch, combo, subset, map_fn)
            params.entries = opt_theta.step(params.entries, mg.theta)
            schedule = Schedule(_clamp(opt_phi.step(schedule.rates, mg.phi)), schedule.steps)
            # Running statistics follow the unadapted model on the pooled unseen frames.
            model_forward(config, params, np.concatenate([e.x_u for e in batch]), mode="train")
            losses.append(mg.loss)
        val = validate(params, schedule)
        result.history.append({"iter": it, "train_loss": float(np.mean(losses)), "val_loss": val})
        if val < best_val:
            best = (params.copy(), Schedule(dict(schedule.rates), schedule.steps))
            best_val, best_it = val, it
    result.params, result.schedule = best
    result.best_iteration, result.final = best_it, params
    return result


@dataclass
class FitResult:
    schedule: Schedule
    best_loss: float
    initial_loss: float
    history: list
    reference_losses: list = field(default_factory=list)


def schedule_episodes(corpus, speakers, budget, per_speaker, context, silence_class=0, labeller=None):
    """Fixed, evenly spaced episodes for schedule fitting."""
    episodes = []
    for s in speakers:
        room = corpus[s].n_frames - 2 * budget
        offsets = [0] if per_speaker <= 1 else np.linspace(0, max(room, 0), per_speaker).astype(int).tolist()
        for off in offsets:
            e = sample_episode(corpus, s, budget, int(off), context)
            if labeller is not None:
                e = e.with_adaptation(e.x_a, labeller(e.x_a))
            episodes.append(filtered(e, silence_class))
    return episodes


def fit_adaptation_schedule(model, params, episodes, subset, hyper, initial=None, candidates=(),
                            map_fn=map):
    """Fit the schedule rates on fixed episodes with the weights frozen.

    Minimises the adapted-model loss (``unadapted_weight = 0``) with Adam on
    the raw rates, clamping at zero after every update. Returns the
    best-loss schedule seen, the initial schedule included. Extra
    ``candidates`` are scored once and compete for the best as well; their
    losses are returned in ``reference_losses``.
    """
    subset = check_subset(subset)
    combo = LossCombo(0.0)
    schedule = initial or Schedule.initial(params, subset, steps=hyper.adapt_steps)
    opt = Adam(hyper.fit_lr)
    history = []
    best, best_loss, initial_loss = schedule, None, None
    reference_losses = []
    for cand in candidates:
        loss = meta_loss(model, params, cand, episodes, combo, subset)
        reference_losses.append(loss)
        if best_loss is None or loss < best_loss:
            best, best_loss = cand, loss
    for it in range(hyper.fit_iterations + 1):
        mg = fomaml_grads(model, params, schedule, episodes, combo, subset, map_fn, need_theta=False)
        history.append({"iter": it, "meta_loss": mg.loss, **{k: v for k, v in schedule.rates.items()}})
        if initial_loss is None:
            initial_loss = mg.loss
        if best_loss is None or mg.loss < best_loss:
            best, best_loss = schedule, mg.loss
        if it == hyper.fit_iterations:
            break
        schedule = Schedule(_clamp(opt.step(schedule.rates, mg.phi)), schedule.steps)
    return FitResult(best, best_loss, initial_loss, history, reference_losses)
