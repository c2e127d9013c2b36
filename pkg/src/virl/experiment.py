"""Seeded trial execution, artifact persistence and metric export.

A trial directory holds::

    experts.csv, experts.csv.json   expert set and its provenance
    reward.bin                      recovered reward bundle
    policy.bin                      final sampling policy
    metrics.jsonl                   one record per evaluated iteration
    metrics.csv                     the same values in long format
    mode_representation.json        grid walker only
    manifest.json                   resolved config, artifact digests, versions, wall clock

Metric files contain no timing information so equal seeds give equal bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .evaluation import (aggregate_trials, explored_modes, mode_representation, neg_elbo,
                         reverse_kl_estimate, task_log_normalizer)
from .policy import GmmPolicy, fit_inference_policy
from .prob import RngStream
from .reward import METHODS, load_reward_bundle, make_prior, save_reward_bundle
from .tasks import ExpertSet, GridWalkerTask, make_expert_set, task_from_spec

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "task", "size", "K", "seed", "iteration", "metric", "value", "mc_stderr")
# metric that picks the best iteration when aggregating, per task kind
AGGREGATION_METRIC = {"random_gaussians": "reverse_kl", "grid_walker": "neg_elbo"}


class TrialError(RuntimeError):
    """A trial failed mid-run; partial artifacts and ``error.json`` were written."""


@dataclass
class TrialResult:
    seed: int
    rows: list[dict]
    run: object | None
    out_dir: Path | None
    extras: dict = field(default_factory=dict)


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return ""
    return repr(float(value))


def metric_rows(identity: dict, iteration: int, metrics: dict) -> list[dict]:
    """Long-format rows, metrics in sorted name order."""
    rows = []
    for name in sorted(metrics):
        value, stderr = metrics[name]
        rows.append({**identity, "iteration": iteration, "metric": name, "value": value, "mc_stderr": stderr})
    return rows


def write_metrics(out_dir: Path, rows: list[dict]) -> None:
    """``metrics.jsonl`` groups rows per iteration; ``metrics.csv`` keeps them long."""
    out_dir = Path(out_dir)
    by_iter: dict[int, list[dict]] = {}
    for row in rows:
        by_iter.setdefault(row["iteration"], []).append(row)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for it in sorted(by_iter):
            first = by_iter[it][0]
            record = {k: first[k] for k in ("method", "task", "size", "K", "seed")}
            record["iteration"] = it
            record["metrics"] = {r["metric"]: {"value": _json_num(r["value"]), "mc_stderr": _json_num(r["mc_stderr"])}
                                 for r in by_iter[it]}
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([row["method"], row["task"], row["size"], row["K"], row["seed"], row["iteration"],
                         row["metric"], _fmt(row["value"]), _fmt(row["mc_stderr"])])
    (out_dir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")


def _json_num(value):
    if value is None or not math.isfinite(float(value)):
        return None
    return float(value)


def read_metric_rows(paths) -> list[dict]:
    """Collect rows from ``metrics.csv`` files found under each path."""
    rows = []
    for path in paths:
        path = Path(path)
        files = [path] if path.is_file() else sorted(path.rglob("metrics.csv"))
        for f in files:
            with open(f, newline="", encoding="utf-8") as fh:
                for row in csv.DictReader(fh):
                    rows.append({"method": row["method"], "task": row["task"], "size": int(row["size"]),
                                 "K": int(row["K"]), "seed": int(row["seed"]),
                                 "iteration": int(row["iteration"]), "metric": row["metric"],
                                 "value": float(row["value"]) if row["value"] else math.nan,
                                 "mc_stderr": float(row["mc_stderr"]) if row["mc_stderr"] else math.nan})
    return rows


def summarize(rows: list[dict]) -> list[dict]:
    """One row per (method, task, size, K): best-to-final aggregation over seeds."""
    if not rows:
        raise ValueError("no metric records")
    kinds = {r["task"] for r in rows}
    if len(kinds) > 1:
        raise ValueError(f"cannot summarize mixed task kinds: {sorted(kinds)}")
    metric = AGGREGATION_METRIC.get(kinds.pop(), "reverse_kl")
    traces: dict[tuple, dict[int, list[tuple[int, float]]]] = {}
    for r in rows:
        if r["metric"] != metric:
            continue
        cell = (r["method"], r["task"], r["size"], r["K"])
        traces.setdefault(cell, {}).setdefault(r["seed"], []).append((r["iteration"], r["value"]))
    if not traces:
        raise ValueError(f"no metric records for {metric!r}")
    out = []
    for cell in sorted(traces):
        per_seed = traces[cell]
        seeds = sorted(per_seed)
        summary = aggregate_trials([[v for _, v in sorted(per_seed[s])] for s in seeds])
        out.append({"method": cell[0], "task": cell[1], "size": cell[2], "K": cell[3], "metric": metric,
                    "mean": summary["mean"], "std": summary["std"], "n_trials": summary["n_trials"],
                    "seeds": " ".join(str(s) for s in seeds)})
    return out


def write_summary(path, summary: list[dict]) -> None:
    cols = ("method", "task", "size", "K", "metric", "mean", "std", "n_trials", "seeds")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in summary:
        writer.writerow([_fmt(row[c]) if c in ("mean", "std") else row[c] for c in cols])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def trial_dir(root, cfg: ExperimentConfig, seed: int) -> Path:
    return Path(root) / cfg.name / f"seed_{seed}"


def run_trial(cfg: ExperimentConfig, seed: int, out_dir=None) -> TrialResult:
    """Generate experts, train ``cfg.method``, evaluate and persist one seeded trial.

    Random streams are split from ``RngStream(seed)`` in a fixed order:
    experts, training, evaluation.
    """
    started = time.time()
    root = RngStream(seed)
    expert_rng, train_rng, eval_rng = root.spawn(), root.spawn(), root.spawn()
    task = cfg.make_task(seed)
    experts = make_expert_set(task, cfg.n_experts, expert_rng)
    log_z = task_log_normalizer(task, experts.samples, eval_rng.spawn(), cfg.evaluation.normalizer_samples)
    identity = {"method": cfg.method, "task": cfg.task_kind, "size": cfg.task_size,
                "K": cfg.n_components, "seed": seed}
    ev = cfg.evaluation
    rows: list[dict] = []
    latest: dict = {}

    def evaluate(t, policy, reward):
        latest.update(policy=policy, reward=reward, iteration=t)
        if t % ev.every and t != cfg.iterations:
            return {}
        kl, kl_se = reverse_kl_estimate(policy, task.expert_log_density, ev.n_samples, eval_rng,
                                        log_normalizer=log_z, return_stderr=True)
        ne, ne_se = neg_elbo(policy, reward, ev.n_samples, eval_rng, return_stderr=True)
        metrics = {"reverse_kl": (kl, kl_se), "neg_elbo": (ne, ne_se)}
        rows.extend(metric_rows(identity, t, metrics))
        return metrics

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        experts.save(out / "experts.csv")
    train_cfg = cfg.train_config()
    try:
        run = METHODS[cfg.method](experts.samples, train_cfg, train_rng, evaluate)
    except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
        if out is not None:
            write_metrics(out, rows)
            if "policy" in latest:
                (out / "policy.bin").write_bytes(latest["policy"].to_bytes())
            (out / "error.json").write_text(json.dumps(
                {"error": type(exc).__name__, "message": str(exc), "last_iteration": latest.get("iteration", 0)},
                sort_keys=True, indent=1))
        raise TrialError(f"seed {seed}: {type(exc).__name__}: {exc}") from exc

    # per-iteration training diagnostics join the evaluated metrics
    for rec in run.records:
        diag = {"convergence": (rec.convergence, None),
                "discriminator_loss": (rec.loss_trace[-1] if rec.loss_trace else math.nan, None)}
        if math.isfinite(rec.ess):
            diag["importance_ess"] = (rec.ess, None)
        rows.extend(metric_rows(identity, rec.iteration, diag))
    rows.sort(key=lambda r: (r["iteration"], r["metric"]))

    extras: dict = {}
    if isinstance(task, GridWalkerTask):
        mode = mode_representation(run.reward, task, ev.mode_negatives, eval_rng)
        extras["mode_representation"] = {**mode.to_dict(),
                                         "explored": explored_modes(run.policy, task).tolist()}

    if out is not None:
        write_metrics(out, rows)
        meta = {"task": task.spec(), "method": cfg.method, "seed": seed, "log_normalizer": log_z,
                "iterations": cfg.iterations, "config_name": cfg.name}
        save_reward_bundle(out / "reward.bin", run.reward, run.prior, meta)
        (out / "policy.bin").write_bytes(run.policy.to_bytes())
        if "mode_representation" in extras:
            (out / "mode_representation.json").write_text(
                json.dumps(extras["mode_representation"], sort_keys=True, indent=1))
        write_manifest(out, cfg.to_dict(), seed, time.time() - started)
    return TrialResult(seed, rows, run, out, extras)


def write_manifest(out: Path, config: dict, seed: int, wall_clock: float, extra: dict | None = None) -> None:
    artifacts = {p.name: _sha256(p) for p in sorted(out.iterdir())
                 if p.is_file() and p.name != "manifest.json"}
    manifest = {"config": config, "seed": seed, "artifacts": artifacts, "version": __version__,
                "python": platform.python_version(), "numpy": np.__version__,
                "wall_clock_seconds": round(wall_clock, 3), **(extra or {})}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def run_experiment(cfg: ExperimentConfig, out_root, seeds=None) -> list[TrialResult]:
    return [run_trial(cfg, s, trial_dir(out_root, cfg, s)) for s in (seeds if seeds is not None else cfg.seeds)]


def run_inference(bundle_path, n_components: int, steps: int, seed: int, out_dir=None,
                  eval_samples: int = 10_000, restarts: int = 5) -> tuple[GmmPolicy, list[dict]]:
    """Train a fresh policy on a stored reward and evaluate it against the bundle's task."""
    started = time.time()
    reward, init_prior, meta = load_reward_bundle(bundle_path)
    rng = RngStream(seed)
    train_rng, eval_rng = rng.spawn(), rng.spawn()
    policy = fit_inference_policy(reward, n_components, steps, train_rng, init_prior, restarts=restarts)
    rows: list[dict] = []
    if "task" in meta:
        task = task_from_spec(meta["task"])
        identity = {"method": "inference", "task": task.kind, "size": task.size,
                    "K": n_components, "seed": seed}
        kl, kl_se = reverse_kl_estimate(policy, task.expert_log_density, eval_samples, eval_rng,
                                        log_normalizer=meta.get("log_normalizer", 0.0), return_stderr=True)
        ne, ne_se = neg_elbo(policy, reward, eval_samples, eval_rng, return_stderr=True)
        rows = metric_rows(identity, steps, {"reverse_kl": (kl, kl_se), "neg_elbo": (ne, ne_se)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "policy.bin").write_bytes(policy.to_bytes())
        write_metrics(out, rows)
        write_manifest(out, {"bundle": str(bundle_path), "n_components": n_components, "steps": steps,
                        "restarts": restarts},
                       seed, time.time() - started, {"bundle_sha256": _sha256(Path(bundle_path))})
    return policy, rows


def generate_experts(cfg: ExperimentConfig, seed: int, path, n: int | None = None) -> ExpertSet:
    """Expert set exactly as ``run_trial`` would draw it for ``seed``."""
    root = RngStream(seed)
    experts = make_expert_set(cfg.make_task(seed), n or cfg.n_experts, root.spawn())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    experts.save(path)
    return experts
