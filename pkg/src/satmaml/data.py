"""Synthetic multi-speaker frame corpus.

Each speaker reads a sequence of phone segments. A frame of class ``c`` is
drawn around the class centroid in a canonical feature space and then
distorted by the speaker's affine transform ``x = A v + b``. ``spread``
controls how far ``A`` and ``b`` stray from the identity; at zero every
speaker is the same.

The deviation from the centroid is isotropic Gaussian with standard
deviation ``class_std`` for every frame, but successive frames of a speaker
are AR(1) correlated with coefficient ``noise_correlation``, as neighbouring
10 ms speech frames are. Correlation leaves each frame's distribution
unchanged and lowers the information per frame, so adaptation keeps
improving over budgets of thousands of frames.

Class 0 is silence. Segment durations do not depend on the class, so the
expected fraction of silent frames equals ``silence_fraction``.
"""

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .adaptation import Episode
from .errors import ConfigError, DataError, SamplingError

SPLITS = ("train", "meta-val", "test")
MAGIC = b"SATMCORP"
VERSION = 1


@dataclass(frozen=True)
class CorpusConfig:
    n_speakers: int = 30
    frames_per_speaker: int = 4000
    heldout_frames_per_speaker: int = 12000
    feature_dim: int = 20
    n_classes: int = 11
    spread: float = 0.7
    silence_fraction: float = 0.15
    class_std: float = 1.0
    centroid_scale: float = 1.0
    offset_scale: float = 1.0
    min_duration: int = 6
    max_duration: int = 24
    condition_cap: float = 10.0
    noise_correlation: float = 0.95
    split_fractions: tuple = (2 / 3, 1 / 6, 1 / 6)

    def __post_init__(self):
        object.__setattr__(self, "split_fractions", tuple(float(f) for f in self.split_fractions))
        if self.n_classes < 2 or self.feature_dim < 1 or self.n_speakers < 1:
            raise ConfigError(f"invalid corpus sizes: n_classes={self.n_classes}, "
                              f"feature_dim={self.feature_dim}, n_speakers={self.n_speakers}")
        if self.frames_per_speaker < 1 or self.heldout_frames_per_speaker < 1:
            raise ConfigError("frames per speaker must be positive")
        if self.spread < 0 or not 0 <= self.silence_fraction <= 1:
            raise ConfigError("spread must be >= 0 and silence_fraction in [0, 1]")
        if not 0.0 <= self.noise_correlation < 1.0:
            raise ConfigError("noise_correlation must lie in [0, 1)")
        if not 1 <= self.min_duration <= self.max_duration:
            raise ConfigError("segment durations must satisfy 1 <= min <= max")


@dataclass
class Speaker:
    id: str
    split: str
    A: np.ndarray
    b: np.ndarray
    frames: np.ndarray
    labels: np.ndarray

    @property
    def n_frames(self):
        return len(self.labels)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    centroids: np.ndarray
    speakers: dict = field(default_factory=dict)

    def ids(self, split=None):
        return [s.id for s in self.speakers.values() if split is None or s.split == split]

    def __getitem__(self, speaker_id):
        try:
            return self.speakers[speaker_id]
        except KeyError:
            raise DataError(f"unknown speaker id {speaker_id!r}") from None


def speaker_name(k):
    return f"spk{k:03d}"


def draw_transform(rng, d, spread, offset_scale=1.0, condition_cap=10.0):
    for _ in range(100):
        A = np.eye(d) + spread * rng.normal(size=(d, d)) / np.sqrt(d)
        if np.linalg.cond(A) <= condition_cap:
            break
    else:
        raise ConfigError(f"could not draw a speaker transform with condition number <= {condition_cap}")
    b = spread * offset_scale * rng.normal(size=d)
    return A, b


def draw_labels(rng, n, n_classes, silence_fraction, min_duration, max_duration, silence_class=0):
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    while pos < n:
        dur = int(rng.integers(min_duration, max_duration + 1))
        if rng.random() < silence_fraction:
            c = silence_class
        else:
            c = int(rng.integers(1, n_classes))
        labels[pos:pos + dur] = c
        pos += dur
    return labels


def correlated_noise(rng, n, d, rho):
    """Stationary AR(1) noise along time with unit marginal variance.

    ``rho = 0`` gives i.i.d. standard normals.
    """
    xi = rng.normal(size=(n, d))
    if rho == 0.0 or n == 0:
        return xi
    out = np.empty_like(xi)
    out[0] = xi[0]
    scale = np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + scale * xi[t]
    return out


def generate_corpus(seed, n_speakers=None, frames_per_speaker=None, d=None, C=None, spread=None,
                    config=None, splits=None):
    """Generate a corpus, deterministic in ``seed`` and the configuration.

    Keyword sizes override ``config``. ``splits`` maps speaker id to split
    tag; speakers outside the training split get
    ``heldout_frames_per_speaker`` frames. Without ``splits`` everything is
    ``train``.
    """
    overrides = {k: v for k, v in dict(n_speakers=n_speakers, frames_per_speaker=frames_per_speaker,
                                       feature_dim=d, n_classes=C, spread=spread).items() if v is not None}
    config = CorpusConfig(**{**asdict(config or CorpusConfig()), **overrides})
    root = np.random.SeedSequence(seed)
    children = root.spawn(config.n_speakers + 1)
    inv_rng = np.random.default_rng(children[0])
    centroids = inv_rng.normal(0.0, config.centroid_scale, (config.n_classes, config.feature_dim))
    corpus = Corpus(config, seed, centroids)
    for k in range(config.n_speakers):
        sid = speaker_name(k)
        split = (splits or {}).get(sid, "train")
        n = config.frames_per_speaker if split == "train" else config.heldout_frames_per_speaker
        rng = np.random.default_rng(children[k + 1])
        A, b = draw_transform(rng, config.feature_dim, config.spread, config.offset_scale,
                              config.condition_cap)
        labels = draw_labels(rng, n, config.n_classes, config.silence_fraction,
                             config.min_duration, config.max_duration)
        v = centroids[labels] + config.class_std * correlated_noise(rng, n, config.feature_dim,
                                                                    config.noise_correlation)
        corpus.speakers[sid] = Speaker(sid, split, A, b, v @ A.T + b, labels)
    return corpus


def split_meta_sets(speaker_ids, fractions, seed):
    """Partition speakers (not frames) into train / meta-val / test.

    Returns ``{speaker_id: split}``. Counts are floor(fraction * n) with the
    remainder handed out by largest fractional part.
    """
    ids = list(speaker_ids.ids() if isinstance(speaker_ids, Corpus) else speaker_ids)
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(ids)
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    for j in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[j] += 1
    for name, f, c in zip(SPLITS, fr, counts):
        if f > 0 and c == 0:
            raise ConfigError(f"split {name} receives zero speakers")
    order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(n)
    tags = {}
    start = 0
    for name, c in zip(SPLITS, counts):
        for j in order[start:start + c]:
            tags[ids[j]] = name
        start += c
    return {sid: tags[sid] for sid in ids}


def build_corpus(config, seed):
    """Split speakers first, then generate with per-split frame counts."""
    tags = split_meta_sets([speaker_name(k) for k in range(config.n_speakers)], config.split_fractions, seed)
    return generate_corpus(seed, config=config, splits=tags)


def stack_context(frames, index, context):
    """Frames at ``index`` with ``context`` neighbours on each side, edges clamped."""
    offsets = np.arange(-context, context + 1)
    ix = np.clip(np.asarray(index)[:, None] + offsets, 0, len(frames) - 1)
    return frames[ix].reshape(len(ix), -1)


def speaker_frames(corpus, speaker_id, start, stop, context):
    spk = corpus[speaker_id]
    idx = np.arange(start, stop)
    return stack_context(spk.frames, idx, context), spk.labels[start:stop]


def sample_episode(corpus, speaker_id, budget_frames, offset=0, context=2):
    """Adaptation frames ``[offset, offset + budget)`` and the following ``budget`` as unseen data."""
    spk = corpus[speaker_id]
    if budget_frames < 1 or offset < 0 or offset + 2 * budget_frames > spk.n_frames:
        raise SamplingError(
            f"speaker {speaker_id} has {spk.n_frames} frames; cannot take an episode of "
            f"budget {budget_frames} at offset {offset}"
        )
    x_a, y_a = speaker_frames(corpus, speaker_id, offset, offset + budget_frames, context)
    x_u, y_u = speaker_frames(corpus, speaker_id, offset + budget_frames, offset + 2 * budget_frames, context)
    return Episode(speaker_id, x_a, y_a, x_u, y_u, offset)


def evaluation_episode(corpus, speaker_id, budget_frames, eval_frames, context=2):
    """Adaptation frames from the start of the speaker, evaluation on a fixed tail window.

    The evaluation window is the same for every budget so that budgets are
    compared on identical frames.
    """
    spk = corpus[speaker_id]
    if budget_frames + eval_frames > spk.n_frames:
        raise SamplingError(
            f"speaker {speaker_id} has {spk.n_frames} frames; budget {budget_frames} plus "
            f"evaluation window {eval_frames} does not fit"
        )
    x_a, y_a = speaker_frames(corpus, speaker_id, 0, budget_frames, context)
    x_u, y_u = speaker_frames(corpus, speaker_id, spk.n_frames - eval_frames, spk.n_frames, context)
    return Episode(speaker_id, x_a, y_a, x_u, y_u, 0)


def pseudo_label(model, params, x):
    """Per-frame argmax of a labelling model on the frozen-statistics path."""
    return model.predict(params, x, mode="infer")


# -- serialisation ---------------------------------------------------------


def dumps(corpus):
    """Binary container: magic, uint32 version, uint32 header length, JSON header, blocks.

    Per speaker, in header order: A '<f8' [d, d], b '<f8' [d],
    frames '<f8' [n, d], labels '<i4' [n]. The centroid table '<f8' [C, d]
    comes first.
    """
    cfg = asdict(corpus.config)
    cfg["split_fractions"] = list(cfg["split_fractions"])
    header = json.dumps({
        "config": cfg, "seed": corpus.seed,
        "speakers": [{"id": s.id, "split": s.split, "n_frames": s.n_frames} for s in corpus.speakers.values()],
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [np.ascontiguousarray(corpus.centroids, "<f8").tobytes()]
    for s in corpus.speakers.values():
        blobs += [np.ascontiguousarray(a, "<f8").tobytes() for a in (s.A, s.b, s.frames)]
        blobs.append(np.ascontiguousarray(s.labels, "<i4").tobytes())
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)


def loads(data):
    if data[:8] != MAGIC:
        raise DataError("not a corpus file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DataError(f"unsupported corpus version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    config = CorpusConfig(**header["config"])
    d, C = config.feature_dim, config.n_classes
    pos = 16 + hlen

    def take(dtype, shape):
        nonlocal pos
        n = int(np.prod(shape))
        size = np.dtype(dtype).itemsize * n
        if pos + size > len(data):
            raise DataError("corpus file truncated")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape)
        pos += size
        return arr

    corpus = Corpus(config, header["seed"], take("<f8", (C, d)).astype(np.float64))
    for s in header["speakers"]:
        n = s["n_frames"]
        A = take("<f8", (d, d)).astype(np.float64)
        b = take("<f8", (d,)).astype(np.float64)
        frames = take("<f8", (n, d)).astype(np.float64)
        labels = take("<i4", (n,)).astype(np.int64)
        corpus.speakers[s["id"]] = Speaker(s["id"], s["split"], A, b, frames, labels)
    if pos != len(data):
        raise DataError("trailing bytes after corpus payload")
    return corpus


def save(path, corpus):
    with open(path, "wb") as f:
        f.write(dumps(corpus))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def export_text(corpus, out):
    """Debug export: one frame per line, ``speaker label f1 ... fd``."""
    for s in corpus.speakers.values():
        for label, row in zip(s.labels, s.frames):
            out.write(f"{s.id} {int(label)} " + " ".join(repr(float(v)) for v in row) + "\n")
