"""Command-line entry point: train, grad-check, compare, plot, gen-tasks.

Exit codes: 0 success, 1 usage error, 2 run collapse (train), 3 verdict or
check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .metrics import MetricsError, compare_runs, emit_plot_data, load_run
from .tasks import TaskEnv, TaskKind, TaskSpec, save_tasks
from .trainer import PRESETS, RunConfig, grad_check, preset, train

EXIT_OK, EXIT_USAGE, EXIT_COLLAPSE, EXIT_VERDICT = 0, 1, 2, 3
METHOD_ALIASES = {"grpo": "grpo_only", "grpo_only": "grpo_only", "repo": "repo", "luffy": "luffy"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else preset(args.preset)
    if getattr(args, "method", None):
        cfg = replace(cfg, method=METHOD_ALIASES[args.method])
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.method.value}_seed{cfg.seed}"
    record = train(cfg, out)
    last = record.metrics[-1] if record.metrics else None
    print(f"{cfg.method.value} seed={cfg.seed}: {len(record.metrics)}/{cfg.steps} steps -> {out}")
    if last is not None:
        print(f"  final mean_reward={last.mean_reward:.4f} entropy={last.mean_entropy:.4f} grad_norm={last.grad_norm:.4g}")
    if record.halted:
        print(f"  COLLAPSE at step {record.collapse_step}", file=sys.stderr)
        return EXIT_COLLAPSE
    return EXIT_OK


def _cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    report = grad_check(cfg, instances=args.instances)
    print(f"grad-check: {len(report.errors)} instances on a {report.n_params}-parameter net")
    for i, err in enumerate(report.errors):
        print(f"  {i:3d}  relative error {err:.3e}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g}): {verdict}")
    return EXIT_OK if report.passed else EXIT_VERDICT


def _cmd_compare(args: argparse.Namespace) -> int:
    report = compare_runs([load_run(d) for d in args.runs])
    Path(args.report).write_text(report.to_json() + "\n")
    for v in report.verdicts:
        print(f"{v['name']:20s} seed={v['seed']} value={v['value']} holds={v['holds']}")
    if args.assert_ and report.failed:
        print(f"{len(report.failed)} expected verdict(s) did not hold", file=sys.stderr)
        return EXIT_VERDICT
    return EXIT_OK


def _cmd_plot(args: argparse.Namespace) -> int:
    for path in emit_plot_data([load_run(d) for d in args.runs], args.quantity, args.out):
        print(path)
    return EXIT_OK


def _parse_task(text: str) -> TaskSpec:
    kind, _, difficulty = text.partition(":")
    try:
        return TaskSpec(TaskKind(kind), difficulty or "hard")
    except ValueError as exc:
        raise UsageError(f"bad task spec {text!r} (want kind[:easy|hard]): {exc}") from None


def _cmd_gen_tasks(args: argparse.Namespace) -> int:
    env = TaskEnv(_parse_task(args.task))
    rng = np.random.default_rng(args.seed)
    save_tasks((env.sample(rng) for _ in range(args.count)), env, args.out)
    print(f"wrote {args.count} {env.spec.kind.value} tasks to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rephrasepo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat YAML key/value config file")
        p.add_argument("--preset", default="desk", choices=sorted(PRESETS))

    p = sub.add_parser("train", help="run one training job")
    config_args(p)
    p.add_argument("--method", choices=sorted(METHOD_ALIASES))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("grad-check", help="analytic vs finite-difference objective gradients")
    config_args(p)
    p.add_argument("--instances", type=int, default=50)
    p.set_defaults(func=_cmd_grad_check)

    p = sub.add_parser("compare", help="summaries and directional verdicts over run directories")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--assert", dest="assert_", action="store_true", help="exit 3 if an expected verdict fails")
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("plot", help="per-run CSV tables plus an SVG overlay")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--quantity", required=True, choices=["reward", "entropy", "grad_norm"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("gen-tasks", help="write a replayable task file")
    p.add_argument("--task", required=True, help="kind[:easy|hard], e.g. reverse_sequence:hard")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_tasks)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
