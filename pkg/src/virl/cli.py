"""Command line entry point: ``virl run | infer | report | gen-experts``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, preset_names, resolve
from .container import ContainerError

OUTPUT_ROOT_ENV = "VIRL_OUTPUT_ROOT"


def _output_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", help=f"named preset ({', '.join(preset_names())})")
    p.add_argument("--config", help="YAML config file, layered over --preset when both are given")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. mlp.epochs=20; repeatable")
    p.add_argument("--seed", type=int, action="append",
                   help="trial seed; repeatable; defaults to the config's seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a method on a task for each seed")
    _add_config_args(run)
    run.add_argument("--iterations", type=int, help="override the iteration count")
    run.add_argument("--out", help=f"output root (default ${OUTPUT_ROOT_ENV} or ./runs)")

    infer = sub.add_parser("infer", help="train a fresh policy on a stored reward bundle")
    infer.add_argument("bundle", help="reward.bin from a run")
    infer.add_argument("--components", "-K", type=int, default=10)
    infer.add_argument("--steps", type=int, default=200)
    infer.add_argument("--seed", type=int, default=0)
    infer.add_argument("--eval-samples", type=int, default=10_000)
    infer.add_argument("--restarts", type=int, default=5, help="fresh policies trained; the best ELBO is kept")
    infer.add_argument("--out", help="output directory (default: <bundle dir>/inference_K<K>_seed<seed>)")

    report = sub.add_parser("report", help="aggregate metric files into a summary table")
    report.add_argument("paths", nargs="+", help="run directories or metrics.csv files")
    report.add_argument("--out", help="summary CSV path (default: stdout)")

    gen = sub.add_parser("gen-experts", help="write the expert set a run would use")
    _add_config_args(gen)
    gen.add_argument("--n", type=int, help="number of samples (default: config n_experts)")
    gen.add_argument("--out", help="CSV path or directory (default: <output root>/<name>/seed_<s>/experts.csv)")
    return parser


def _resolve(args, extra_overrides=()):
    return resolve(args.preset, args.config, list(args.override) + list(extra_overrides))


def cmd_run(args) -> int:
    from .experiment import TrialError, run_trial, trial_dir

    extra = [f"iterations={args.iterations}"] if args.iterations is not None else []
    cfg = _resolve(args, extra)
    root = _output_root(args.out)
    status = 0
    for seed in args.seed or cfg.seeds:
        out = trial_dir(root, cfg, seed)
        try:
            result = run_trial(cfg, seed, out)
        except TrialError as exc:
            print(f"error: {exc}", file=sys.stderr)
            status = 3
            continue
        print(f"{cfg.name} seed {seed}: {len(result.run.records)} iterations -> {out}")
    return status


def cmd_infer(args) -> int:
    from .experiment import run_inference

    bundle = Path(args.bundle)
    out = Path(args.out) if args.out else bundle.parent / f"inference_K{args.components}_seed{args.seed}"
    _, rows = run_inference(bundle, args.components, args.steps, args.seed, out, args.eval_samples,
                            args.restarts)
    for row in rows:
        print(f"{row['metric']} {row['value']:.6g} +- {row['mc_stderr']:.2g}")
    print(f"policy -> {out / 'policy.bin'}")
    return 0


def cmd_report(args) -> int:
    from .experiment import read_metric_rows, summarize, write_summary

    for p in args.paths:
        if not Path(p).exists():
            raise FileNotFoundError(p)
    summary = summarize(read_metric_rows(args.paths))
    if args.out:
        write_summary(args.out, summary)
    for row in summary:
        print(f"{row['method']:5s} {row['task']} size={row['size']} K={row['K']} "
              f"{row['metric']} {row['mean']:.4f} +- {row['std']:.4f} (n={row['n_trials']})")
    return 0


def cmd_gen_experts(args) -> int:
    from .experiment import generate_experts, trial_dir

    cfg = _resolve(args)
    seeds = args.seed or [cfg.seeds[0]]
    for seed in seeds:
        if args.out:
            out = Path(args.out)
            if out.suffix != ".csv":
                out = out / f"experts_seed{seed}.csv"
        else:
            out = trial_dir(_output_root(None), cfg, seed) / "experts.csv"
        experts = generate_experts(cfg, seed, out, args.n)
        print(f"{len(experts)} samples -> {out}")
    return 0


COMMANDS = {"run": cmd_run, "infer": cmd_infer, "report": cmd_report, "gen-experts": cmd_gen_experts}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
