"""Experiment harness: artifact layout, the evaluation grid, CSV results and reports.

All artifacts of one run live in a work directory::

    corpus.bin                  synthetic corpus
    <name>.ckpt / <name>.log    checkpoints and per-iteration training logs
    baseline-warm.ckpt          baseline at half the iteration budget (SAT-MAML warm start)
    labeller.ckpt               separately trained baseline used for pseudo-labels
    schedules/<column>-<budget>.txt
    results.csv, report.txt
"""

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint, data
from .adaptation import Schedule, adapt, silence_filter
from .errors import AggregationError, DataError, UsageError
from .metatrain import (assert_speaker_disjoint, baseline_train, fit_adaptation_schedule,
                        sat_lhuc_train, sat_maml_train, schedule_episodes)
from .nn import Network

VARIANTS = ("baseline", "sat-lhuc", "maml-lhuc", "maml-all")
# Table column order: (column name, checkpoint variant, adapted subset)
COLUMNS = (
    ("Baseline-LHUC", "baseline", "LHUC"),
    ("Baseline-ALL", "baseline", "ALL"),
    ("SAT-LHUC", "sat-lhuc", "LHUC"),
    ("MAML-LHUC", "maml-lhuc", "LHUC"),
    ("MAML-ALL", "maml-all", "ALL"),
)
COLUMN_ORDER = [c[0] for c in COLUMNS]


def column_name(variant, subset):
    for name, v, s in COLUMNS:
        if v == variant and s == subset:
            return name
    raise UsageError(f"no result column for variant {variant!r} with subset {subset!r}")


class Workdir:
    def __init__(self, root):
        self.root = root

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    @property
    def corpus(self):
        return self.path("corpus.bin")

    def checkpoint(self, name):
        return self.path(f"{name}.ckpt")

    def log(self, name):
        return self.path(f"{name}.log")

    def schedule(self, column, budget):
        return self.path("schedules", f"{column.lower()}-{budget}.txt")

    @property
    def results(self):
        return self.path("results.csv")

    @property
    def report(self):
        return self.path("report.txt")


def _check_writable(path, overwrite):
    if os.path.exists(path) and not overwrite:
        raise UsageError(f"refusing to overwrite existing {path} (pass --overwrite)")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)


def _require(paths):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise DataError("missing artifacts: " + ", ".join(missing))


def _write_bytes(path, payload, overwrite):
    _check_writable(path, overwrite)
    with open(path, "wb") as f:
        f.write(payload)


# -- commands ----------------------------------------------------------------


def generate_data(config, workdir, overwrite=False):
    _check_writable(workdir.corpus, overwrite)
    corpus = data.build_corpus(config.corpus_config(), config.seed)
    data.save(workdir.corpus, corpus)
    return corpus


def _load_corpus(workdir):
    _require([workdir.corpus])
    return data.load(workdir.corpus)


def train_variant(variant, config, workdir, warm_start=None, name=None, iterations=None,
                  overwrite=False, seed=None):
    """Train one model variant and write ``<name>.ckpt`` plus ``<name>.log``.

    The baseline additionally writes ``<name>-warm.ckpt``, its parameters at
    half the iteration budget, which the MAML variants start from.
    """
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant.startswith("maml") and warm_start is None:
        raise UsageError(f"{variant} needs a warm-start baseline checkpoint (--warm-start)")
    name = name or variant
    seed = config.seed if seed is None else seed
    out = workdir.checkpoint(name)
    _check_writable(out, overwrite)
    corpus = _load_corpus(workdir)
    mc = config.model_config()
    meta = {"variant": variant, "seed": seed}
    if variant == "baseline":
        its = config.iterations if iterations is None else iterations
        hyper = config.train_hyper(seed, its)
        half = its // 2
        result = baseline_train(mc, corpus, hyper, snapshot_at=(half,))
        _write_bytes(workdir.checkpoint(f"{name}-warm"),
                     checkpoint.dumps(mc, result.snapshots[half], {**meta, "iteration": half}), overwrite)
    elif variant == "sat-lhuc":
        hyper = config.train_hyper(seed, config.iterations if iterations is None else iterations)
        result = sat_lhuc_train(mc, corpus, hyper, config.si_probability)
    else:
        _require([warm_start])
        warm_cfg, warm_params, _ = checkpoint.load(warm_start)
        if warm_cfg != mc:
            raise UsageError(f"warm start {warm_start} was trained with a different model configuration")
        hyper = config.train_hyper(seed, config.maml_iterations if iterations is None else iterations)
        subset = "LHUC" if variant == "maml-lhuc" else "ALL"
        result = sat_maml_train(mc, corpus, hyper, warm_params, subset)
        meta["schedule"] = result.schedule.to_text()
    meta["best_iteration"] = result.best_iteration
    _write_bytes(out, checkpoint.dumps(mc, result.params, meta), overwrite)
    with open(workdir.log(name), "w") as f:
        f.write("".join(line + "\n" for line in result.log_lines()))
    return result


def fit_schedule(config, workdir, checkpoint_path, budget, subset, column, overwrite=False):
    """Fit per-layer rates on the meta-validation speakers for one adaptation budget."""
    out = workdir.schedule(column, budget)
    _check_writable(out, overwrite)
    corpus = _load_corpus(workdir)
    _require([checkpoint_path])
    mc, params, meta = checkpoint.load(checkpoint_path)
    val_speakers = corpus.ids("meta-val")
    if not val_speakers:
        raise UsageError("corpus has no meta-validation speakers")
    assert_speaker_disjoint(corpus.ids("train"), val_speakers)
    episodes = schedule_episodes(corpus, val_speakers, budget, config.fit_episodes_per_speaker,
                                 mc.context_frames, mc.silence_class)
    hyper = config.train_hyper()
    net = Network(mc)
    reference = Schedule.initial(params, subset, steps=config.adapt_steps)
    start = None
    if "schedule" in meta:
        learned, _ = Schedule.from_text(meta["schedule"])
        if set(learned.rates) == set(reference.rates):
            start = learned
    fit = fit_adaptation_schedule(net, params, episodes, subset, hyper, initial=start,
                                  candidates=[reference])
    header = {
        "checkpoint": os.path.basename(checkpoint_path), "subset": subset, "budget": budget,
        "meta_val_J_initial": repr(fit.reference_losses[0]), "meta_val_J_fitted": repr(fit.best_loss),
    }
    _write_bytes(out, fit.schedule.to_text(header).encode(), overwrite)
    return fit


# -- evaluation grid -----------------------------------------------------------


@dataclass(frozen=True)
class PlanCell:
    variant: str
    subset: str
    stats: str = "global"
    supervision: str = "supervised"
    schedule: str = "fitted"

    @property
    def column(self):
        return column_name(self.variant, self.subset)


@dataclass
class ExperimentPlan:
    cells: list
    budgets: tuple
    seeds: tuple

    @classmethod
    def default(cls, config, seeds=None):
        cells = [PlanCell(v, s, "global", sup, "fitted")
                 for sup in ("supervised", "unsupervised") for _, v, s in COLUMNS]
        # Global vs batch statistics with a fixed hand-set LHUC rate.
        cells += [PlanCell("baseline", "LHUC", stats, "supervised", "fixed") for stats in ("global", "batch")]
        return cls(cells, tuple(config.budgets), tuple(seeds or (config.seed,)))


RESULT_FIELDS = ("seed", "variant", "column", "subset", "stats", "supervision", "schedule", "budget",
                 "episodes", "unadapted_fer", "adapted_fer", "mean_improvement", "improved_fraction")


@dataclass
class ResultRow:
    seed: int
    variant: str
    column: str
    subset: str
    stats: str
    supervision: str
    schedule: str
    budget: str
    episodes: int
    unadapted_fer: float
    adapted_fer: float
    mean_improvement: float
    improved_fraction: float

    def cell_key(self):
        return (self.variant, self.subset, self.stats, self.supervision, self.schedule, self.budget)


def _required_artifacts(plan, workdir):
    paths = [workdir.corpus, workdir.checkpoint("labeller")]
    for cell in plan.cells:
        paths.append(workdir.checkpoint(cell.variant))
        if cell.schedule == "fitted":
            paths += [workdir.schedule(cell.column, b) for b in plan.budgets]
    return list(dict.fromkeys(paths))


class _Evaluator:
    def __init__(self, config, workdir):
        self.config = config
        self.workdir = workdir
        self.corpus = data.load(workdir.corpus)
        self.models = {}
        _, lab_params, _ = checkpoint.load(workdir.checkpoint("labeller"))
        self.labeller = (Network(config.model_config()), lab_params)

    def params(self, variant):
        if variant not in self.models:
            self.models[variant] = checkpoint.load(self.workdir.checkpoint(variant))
        return self.models[variant]

    def run_cell(self, cell, budgets, seed):
        mc, params, _ = self.params(cell.variant)
        net = Network(mc, "adapt" if cell.stats == "global" else "batch", self.config.stats_batch_frames)
        speakers = self.corpus.ids("test")
        if not speakers:
            raise DataError("corpus has no test speakers")
        base = dict(seed=seed, variant=cell.variant, column=cell.column, subset=cell.subset,
                    stats=cell.stats, supervision=cell.supervision, schedule=cell.schedule)
        unadapted = {}
        per_budget = []
        for budget in budgets:
            if cell.schedule == "fitted":
                with open(self.workdir.schedule(cell.column, budget)) as f:
                    schedule, _ = Schedule.from_text(f.read())
            else:
                schedule = Schedule.initial(params, cell.subset, self.config.fixed_lhuc_rate,
                                            self.config.adapt_steps)
            before, after = [], []
            for s in speakers:
                e = data.evaluation_episode(self.corpus, s, budget, self.config.eval_frames, mc.context_frames)
                if s not in unadapted:
                    unadapted[s] = net.error_rate(params, e.x_u, e.y_u)
                y_a = e.y_a if cell.supervision == "supervised" else data.pseudo_label(
                    self.labeller[0], self.labeller[1], e.x_a)
                x_a, y_a = silence_filter(e.x_a, y_a, mc.silence_class)
                adapted = adapt(net, params, (x_a, y_a), schedule, cell.subset)
                before.append(unadapted[s])
                after.append(net.error_rate(adapted, e.x_u, e.y_u))
            per_budget.append((budget, np.array(before), np.array(after)))
        rows = []
        orig = np.array([unadapted[s] for s in speakers])
        rows.append(ResultRow(**base, budget="original", episodes=len(speakers),
                              unadapted_fer=float(orig.mean()), adapted_fer=float(orig.mean()),
                              mean_improvement=0.0, improved_fraction=0.0))
        for budget, before, after in per_budget:
            rows.append(ResultRow(**base, budget=str(budget), episodes=len(speakers),
                                  unadapted_fer=float(before.mean()), adapted_fer=float(after.mean()),
                                  mean_improvement=float(np.mean(before - after)),
                                  improved_fraction=float(np.mean(after < before))))
        return rows


def adapt_eval(config, workdir, plan=None, threads=1, overwrite=False):
    """Adapt and score every plan cell on the test speakers; writes ``results.csv``.

    Cells are independent and may run on several threads; rows are written
    in plan order.
    """
    plan = plan or ExperimentPlan.default(config)
    _require(_required_artifacts(plan, workdir))
    _check_writable(workdir.results, overwrite)
    ev = _Evaluator(config, workdir)
    for v in {c.variant for c in plan.cells}:
        ev.params(v)
    seed = plan.seeds[0]

    def run(cell):
        return ev.run_cell(cell, plan.budgets, seed)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            blocks = list(pool.map(run, plan.cells))
    else:
        blocks = [run(c) for c in plan.cells]
    rows = [r for block in blocks for r in block]
    with open(workdir.results, "w", newline="") as f:
        f.write(format_results(rows))
    return rows


def format_results(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        d = asdict(r)
        w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in RESULT_FIELDS])
    return buf.getvalue()


def read_results(path):
    types = {f.name: f.type for f in fields(ResultRow)}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
            raise DataError(f"{path}: unexpected results header {reader.fieldnames}")
        return [ResultRow(**{k: (int(v) if types[k] in (int, "int") else
                                 float(v) if types[k] in (float, "float") else v)
                             for k, v in row.items()}) for row in reader]


# -- report --------------------------------------------------------------------


def aggregate(result_sets):
    """Mean and population std of adapted FER per plan cell across result sets (seeds)."""
    keysets = [sorted({r.cell_key() for r in rows}) for rows in result_sets]
    if not keysets:
        raise AggregationError("no results to aggregate")
    for ks in keysets[1:]:
        if ks != keysets[0]:
            raise AggregationError("result files do not cover the same plan cells")
    table = {}
    for key in keysets[0]:
        vals = np.array([next(r.adapted_fer for r in rows if r.cell_key() == key) for rows in result_sets])
        table[key] = (float(vals.mean()), float(vals.std()))
    return table


def format_report(table, frames_per_second=100):
    def label(budget):
        return "original" if budget == "original" else f"{int(budget) / frames_per_second:g}s"

    blocks = sorted({k[2:5] for k in table}, key=lambda b: (b[2] != "fitted", b[1] != "supervised", b[0]))
    out = []
    for stats, supervision, schedule in blocks:
        keys = [k for k in table if k[2:5] == (stats, supervision, schedule)]
        columns = [c for c in COLUMN_ORDER if any(column_name(k[0], k[1]) == c for k in keys)]
        budgets = sorted({k[5] for k in keys}, key=lambda b: -1 if b == "original" else int(b))
        out.append(f"FER (%) {supervision}, {stats} stats, {schedule} schedule")
        out.append("".join([f"{'':<10}"] + [f"{c:>18}" for c in columns]))
        for b in budgets:
            cells = []
            for c in columns:
                key = next((k for k in keys if column_name(k[0], k[1]) == c and k[5] == b), None)
                if key is None:
                    cells.append(f"{'-':>18}")
                else:
                    mean, std = table[key]
                    cells.append(f"{100 * mean:>11.2f} ± {100 * std:4.2f}")
            out.append("".join([f"{label(b):<10}"] + cells))
        out.append("")
    return "\n".join(out)


def report(paths, frames_per_second=100):
    _require(paths)
    return format_report(aggregate([read_results(p) for p in paths]), frames_per_second)


# -- full pipeline -------------------------------------------------------------


def run_pipeline(config, workdir, threads=1, overwrite=False, log=print):
    """generate -> baseline (+labeller) -> sat-lhuc -> maml x2 -> schedules -> adapt-eval -> report."""
    os.makedirs(workdir.root, exist_ok=True)
    log("generate-data")
    generate_data(config, workdir, overwrite)
    for variant, kwargs in (("baseline", {}),
                            ("baseline", {"name": "labeller", "seed": config.seed + config.labeller_seed_offset}),
                            ("sat-lhuc", {}),
                            ("maml-lhuc", {"warm_start": workdir.checkpoint("baseline-warm")}),
                            ("maml-all", {"warm_start": workdir.checkpoint("baseline-warm")})):
        log(f"train {kwargs.get('name', variant)}")
        train_variant(variant, config, workdir, overwrite=overwrite, **kwargs)
    for column, variant, subset in COLUMNS:
        for budget in config.budgets:
            log(f"fit-schedule {column} {budget}")
            fit_schedule(config, workdir, workdir.checkpoint(variant), budget, subset, column, overwrite)
    log("adapt-eval")
    adapt_eval(config, workdir, threads=threads, overwrite=overwrite)
    text = report([workdir.results], config.frames_per_second)
    _check_writable(workdir.report, overwrite)
    with open(workdir.report, "w") as f:
        f.write(text)
    return text
