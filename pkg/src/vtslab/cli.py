"""Command-line entry point: ``vtslab {train|eval|sweep|ablate|gradcheck|groundft}``.

Settings resolve in this order, later winning: built-in defaults, the YAML
file given by ``--config``, ``--set key=value`` overrides, then the dedicated
``--seed`` and ``--out`` flags.

Exit codes: 0 success, 1 usage error (bad flags, missing checkpoint),
2 validation error (bad config or input data), 3 a failed check (gradcheck
tolerance breach).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import sys
from pathlib import Path

from . import experiments as ex
from . import gradcheck, groundft
from .errors import UsageError, VtsLabError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_CHECK = 0, 1, 2, 3
ABLATIONS = {"stage": "stage_ablation", "sampler": "sampler_ablation", "pe": "pe_ablation"}

log = logging.getLogger("vtslab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with ExperimentConfig fields")
    p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    p.add_argument("--out", help="results root (default: results_dir from the config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; task fields as task.NAME (repeatable)")
    p.add_argument("--run-name", help="output folder name instead of a UTC timestamp")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vtslab", description="Visual token sampling experiments on a synthetic grounding task.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train the configured models and store their checkpoints")
    _common(p)
    p = sub.add_parser("eval", help="evaluate stored checkpoints")
    _common(p)
    p = sub.add_parser("sweep", help="density sweep: token-level vs uniform across the rho grid")
    _common(p)
    p = sub.add_parser("ablate", help="stage, sampler or positional-encoding ablation")
    p.add_argument("kind", nargs="?", choices=sorted(ABLATIONS), help="defaults to the config's experiment")
    p.add_argument("--train-missing", action="store_true", help="train absent checkpoints instead of failing")
    _common(p)
    p = sub.add_parser("gradcheck", help="finite-difference audit of every component")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=gradcheck.TOLERANCE)

    p = sub.add_parser("groundft", help="instruction-record conversion")
    gsub = p.add_subparsers(dest="action", parser_class=_Parser)
    gsub.required = True
    c = gsub.add_parser("convert", help="raw MR or HD annotations to conversational records")
    c.add_argument("--task", required=True, choices=("mr", "hd"))
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args, experiment: str) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if args.config else ex.ExperimentConfig()
    overrides = list(args.set) + [f"experiment={experiment}"]
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    if args.out is not None:
        overrides.append(f"results_dir={args.out}")
    return cfg.with_overrides(overrides)


def _run_dir(cfg: ex.ExperimentConfig, run_name: str | None) -> Path:
    base = Path(cfg.results_dir) / cfg.experiment
    name = run_name or _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    path, n = base / name, 1
    while run_name is None and path.exists():
        path, n = base / f"{name}-{n}", n + 1
    return path


def _finish(rows, cfg, args) -> int:
    out = ex.write_results(rows, cfg, _run_dir(cfg, args.run_name))
    print(ex.aggregate_to_csv(rows), end="")
    print(f"wrote {out / 'rows.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args, "train")
    store = ex.CheckpointStore(cfg.checkpoint_dir)
    for seed in cfg.seeds:
        for name in cfg.models:
            ex.train_model(cfg, seed, name, store)
            print(f"seed {seed}: {name} -> {store.path(seed, name)}")
    return _finish(ex.run_eval(cfg, store), cfg, args)


def _run(args, experiment: str, train_missing: bool = False) -> int:
    cfg = resolve_config(args, experiment)
    store = ex.CheckpointStore(cfg.checkpoint_dir)
    if train_missing:
        for seed in cfg.seeds:
            for name in ex.required_models(experiment, cfg):
                ex.train_model(cfg, seed, name, store)
    ex.check_checkpoints(experiment, cfg, store)
    return _finish(ex.RUNNERS[experiment](cfg, store), cfg, args)


def cmd_ablate(args) -> int:
    kind = args.kind
    if kind is None:
        if not args.config:
            raise UsageError("ablate needs a kind (stage, sampler, pe) or a config whose experiment is an ablation")
        experiment = ex.load_config(args.config).experiment
        if experiment not in ABLATIONS.values():
            raise UsageError(f"config experiment {experiment!r} is not an ablation; pass a kind")
    else:
        experiment = ABLATIONS[kind]
    return _run(args, experiment, args.train_missing)


def cmd_gradcheck(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    results = gradcheck.run_gradcheck(args.seed, args.instances)
    results = [gradcheck.ComponentResult(r.component, r.max_rel_error, r.instances, args.tolerance) for r in results]
    print(gradcheck.format_report(results), end="")
    return EXIT_OK if all(r.ok for r in results) else EXIT_CHECK


def cmd_groundft(args) -> int:
    anns = groundft.read_annotations(args.input, args.task)
    instances = groundft.convert_all(anns, args.task, args.seed)
    groundft.emit_dataset(instances, args.out)
    print(f"converted {len(instances)} {args.task} annotations -> {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {
        "train": cmd_train,
        "eval": lambda a: _run(a, "eval"),
        "sweep": lambda a: _run(a, "density_sweep"),
        "ablate": cmd_ablate,
        "gradcheck": cmd_gradcheck,
        "groundft": cmd_groundft,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VtsLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
