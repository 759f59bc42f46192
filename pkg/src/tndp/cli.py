"""``tndp`` command line: train, eval, plot, timing, gen-benchmark, serve.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numerical error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Optional

import numpy as np

from tndp.config import ConfigError, RunConfig, load_config
from tndp.runs import RunDirectory, output_root

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("tndp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _config(args) -> RunConfig:
    cfg = load_config(args.config, seed=args.seed, task=getattr(args, "task", None))
    if getattr(args, "episodes", None) is not None:
        cfg.eval["episodes"] = args.episodes
    if getattr(args, "methods", None):
        cfg.eval["methods"] = args.methods
    return cfg


def cmd_train(args) -> int:
    from tndp.tasks import model_config_for, training_env_factory
    from tndp.trainer import TrainConfig, train

    cfg = _config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    tc = TrainConfig(horizon=cfg.task_opts["horizon"], seed=cfg.seed, **cfg.train)
    mc = model_config_for(cfg.task, cfg.task_opts, cfg.model)
    if args.resume:
        if not args.checkpoint or not os.path.exists(args.checkpoint):
            raise ConfigError(f"--resume needs an existing --checkpoint (got {args.checkpoint!r})")
        run = RunDirectory.open(os.path.dirname(os.path.abspath(args.checkpoint)))
        run.manifest.status = "running"
        run.manifest.command = list(sys.argv)
        run.save()
    else:
        run = RunDirectory.create(output_root(args.out), cfg.seed, cfg.digest(),
                                  extra={"task": cfg.task, "kind": "train"})
        with open(run.path("config.ini"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_ini())

    def progress(row):
        e = int(row["epoch"])
        if e % 100 == 0:
            log.info("epoch %d loss_p %.4g loss_q %.4g utility %.4g", e, float(row["loss_p"]),
                     float(row["loss_q"]), float(row["mean_terminal_utility"]))

    try:
        ckpt = train(tc, mc, training_env_factory(cfg.task, cfg.task_opts), run.root, resume=args.resume,
                     max_epochs=args.max_epochs, progress=progress)
    except BaseException:
        run.finalize("failed")
        raise
    run.finalize("ok")
    print(ckpt)
    return EXIT_OK


def _write_episode_rows(results, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "episode", "group", "step", "utility", "design", "target"])
        for m in sorted(results):
            for r in results[m]:
                tgt = "" if r.target is None else " ".join(repr(float(v)) for v in r.target)
                for step, u in enumerate(r.utilities):
                    x = r.chosen_x[step - 1] if step >= 1 else None
                    xs = "" if x is None else " ".join(repr(float(v)) for v in np.atleast_1d(x))
                    w.writerow([m, r.episode, r.group, step, repr(float(u)), xs, tgt])


def cmd_eval(args) -> int:
    from tndp.evaluation import evaluate, utility_curves, validate_methods, write_curves_csv

    cfg = _config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    methods = validate_methods(cfg.methods, cfg.task)
    if args.checkpoint and not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    run = RunDirectory.create(output_root(args.out), cfg.seed, cfg.digest(),
                              extra={"task": cfg.task, "kind": "eval", "checkpoint": args.checkpoint})
    try:
        with open(run.path("config.ini"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_ini())
        workers = args.workers if args.workers is not None else cfg.eval["workers"]
        results = evaluate(cfg, methods, args.checkpoint, workers=workers)
        write_curves_csv(utility_curves(results), run.path("utility_curves.csv"))
        groups = sorted({r.group for rs in results.values() for r in rs})
        if len(groups) > 1:
            for g in groups:
                write_curves_csv(utility_curves(results, group=g), run.path(f"utility_curves_{g}.csv"))
        _write_episode_rows(results, run.path("episodes.csv"))
    except BaseException:
        run.finalize("failed")
        raise
    run.finalize("ok")
    print(run.path("utility_curves.csv"))
    return EXIT_OK


def cmd_plot(args) -> int:
    from tndp.plotting import merge_curves, plot_curves

    for p in args.csv:
        if not os.path.exists(p):
            raise ConfigError(f"no such file: {p}")
    try:
        curves = merge_curves(args.csv)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run = RunDirectory.create(output_root(args.out), args.seed or 0, "", extra={"kind": "plot",
                                                                              "inputs": list(args.csv)})
    plot_curves(curves, run.path(args.name), title=args.title or "", ylabel=args.ylabel)
    run.finalize("ok")
    print(run.path(args.name))
    return EXIT_OK


def cmd_timing(args) -> int:
    from tndp.evaluation import timing_table, validate_methods, write_timing_csv

    cfg = _config(args)
    if args.print_config:
        sys.stdout.write(cfg.to_ini())
        return EXIT_OK
    methods = validate_methods(cfg.methods, cfg.task)
    repeats = args.repeats if args.repeats is not None else cfg.eval["timing_repeats"]
    if repeats < 1:
        raise ConfigError("--repeats must be >= 1")
    run = RunDirectory.create(output_root(args.out), cfg.seed, cfg.digest(),
                              extra={"task": cfg.task, "kind": "timing", "checkpoint": args.checkpoint})
    rows = timing_table(cfg, methods, args.checkpoint, repeats)
    write_timing_csv(rows, run.path("timing.csv"))
    run.finalize("ok")
    for r in rows:
        print(f"{r.method:8s} {r.acq_mean:.6f} s/design (sd {r.acq_std:.6f})  {r.total_mean:.4f} s/episode")
    return EXIT_OK


def cmd_gen_benchmark(args) -> int:
    from tndp.tasks import generate_synthetic_benchmark

    if args.d_x < 1 or args.rows < 2 or args.tables < 1:
        raise ConfigError("need --d-x >= 1, --rows >= 2, --tables >= 1")
    seed = args.seed or 0
    run = RunDirectory.create(output_root(args.out), seed, "", extra={"kind": "gen-benchmark"})
    paths = []
    for j in range(args.tables):
        name = f"{args.name}{j}" if args.tables > 1 else args.name
        path = run.path(f"{name}.csv")
        generate_synthetic_benchmark(args.d_x, args.rows, np.random.default_rng([seed, j]), path, name=name)
        paths.append(path)
    run.finalize("ok")
    print("\n".join(paths))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from tndp.service.app import create_app

    if not os.path.exists(args.checkpoint):
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    uvicorn.run(create_app(args.checkpoint), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tndp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI config file (defaults are used when omitted)")
            sp.add_argument("--task", choices=("toy", "decision_al", "topk"),
                            help="task whose defaults to use when no --config is given")
            sp.add_argument("--print-config", action="store_true", help="print the merged config and exit")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output root (default: $TNDP_OUTPUT_ROOT or ./runs)")

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--checkpoint", help="checkpoint to resume from (with --resume)")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--max-epochs", type=int, help="stop after this many epochs (schedule is unchanged)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate TNDP and GP baselines on paired episodes")
    common(sp)
    sp.add_argument("--checkpoint", help="trained weights or training checkpoint (needed for TNDP methods)")
    sp.add_argument("--methods", help="comma-separated subset of " + ",".join(
        ("TNDP", "TNDP-RS", "GP-RS", "GP-US", "GP-DUS", "GP-UCB", "GP-EI", "GP-PI")))
    sp.add_argument("--episodes", type=int, help="evaluation episodes (topk: splits per table)")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("plot", help="plot utility curves from one or more eval CSVs")
    sp.add_argument("csv", nargs="+")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="output root (default: $TNDP_OUTPUT_ROOT or ./runs)")
    sp.add_argument("--name", default="utility_curves.png", help="image file name inside the run directory")
    sp.add_argument("--title")
    sp.add_argument("--ylabel", default="utility")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("timing", help="per-design acquisition time of each method")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--methods")
    sp.add_argument("--repeats", type=int, help="episodes timed per method")
    sp.add_argument("--episodes", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_timing)

    sp = sub.add_parser("gen-benchmark", help="write synthetic tabular benchmark files")
    common(sp, config=False)
    sp.add_argument("--d-x", type=int, default=6)
    sp.add_argument("--rows", type=int, default=500)
    sp.add_argument("--tables", type=int, default=1)
    sp.add_argument("--name", default="synthetic")
    sp.set_defaults(func=cmd_gen_benchmark)

    sp = sub.add_parser("serve", help="run the HTTP design service for a trained model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8000)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    from tndp.model import CheckpointError
    from tndp.tasks.benchmark import BenchmarkFormatError

    try:
        return args.func(args)
    except (ConfigError, BenchmarkFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # numerical failures, diverged training, ...
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
