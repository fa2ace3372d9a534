"""``satmaml`` command-line interface.

Every failure prints one line ``error <CODE>: <message>`` to stderr and exits
with 2 (usage/config), 3 (data) or 4 (capacity).
"""

import argparse
import dataclasses
import sys

from . import experiment
from .config import ExperimentConfig, format_config, load_config
from .errors import SatError, UsageError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--config", help="key = value config file (default: built-in defaults)")
    common.add_argument("--out", default=".", help="work directory for all artifacts")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("--threads", type=int, default=1, help="worker threads for adapt-eval")

    p = _Parser(prog="satmaml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("init-config", parents=[common], help="print the default config")
    sub.add_parser("generate-data", parents=[common], help="write corpus.bin")

    t = sub.add_parser("train", parents=[common], help="train one model variant")
    t.add_argument("variant", choices=experiment.VARIANTS)
    t.add_argument("--warm-start", help="baseline checkpoint for the maml variants")
    t.add_argument("--iterations", type=int)
    t.add_argument("--name", help="checkpoint name (default: the variant)")

    f = sub.add_parser("fit-schedule", parents=[common], help="fit per-layer rates for one budget")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--budget", type=int, required=True)
    f.add_argument("--subset", choices=("LHUC", "ALL"), required=True)
    f.add_argument("--column", help="result column name (default: derived from the checkpoint variant)")

    sub.add_parser("adapt-eval", parents=[common], help="evaluate the default plan; write results.csv")
    r = sub.add_parser("report", parents=[common], help="aggregate results CSVs into a table")
    r.add_argument("results", nargs="*", help="results files (default: <out>/results.csv)")
    sub.add_parser("pipeline", parents=[common], help="run every step for one seed")
    return p


def _config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def run(argv=None, stdout=None):
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be at least 1")
    config = _config(args)
    wd = experiment.Workdir(args.out)
    if args.command == "init-config":
        stdout.write(format_config(config))
    elif args.command == "generate-data":
        experiment.generate_data(config, wd, args.overwrite)
    elif args.command == "train":
        if args.iterations is not None and args.iterations < 0:
            raise UsageError("--iterations must be non-negative")
        experiment.train_variant(args.variant, config, wd, args.warm_start, args.name,
                                 args.iterations, args.overwrite)
    elif args.command == "fit-schedule":
        from . import checkpoint
        column = args.column
        if column is None:
            experiment._require([args.checkpoint])
            _, _, meta = checkpoint.load(args.checkpoint)
            column = experiment.column_name(meta.get("variant", "baseline"), args.subset)
        experiment.fit_schedule(config, wd, args.checkpoint, args.budget, args.subset, column,
                                args.overwrite)
    elif args.command == "adapt-eval":
        experiment.adapt_eval(config, wd, threads=args.threads, overwrite=args.overwrite)
    elif args.command == "report":
        stdout.write(experiment.report(args.results or [wd.results], config.frames_per_second))
    elif args.command == "pipeline":
        stdout.write(experiment.run_pipeline(config, wd, args.threads, args.overwrite,
                                             log=lambda m: print(m, file=sys.stderr)))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except SatError as e:
        msg = " ".join(str(e).split())
        print(f"error {e.code}: {msg}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
