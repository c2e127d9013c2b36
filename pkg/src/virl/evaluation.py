"""Evaluation protocol: reverse KL, negative ELBO, mode representation, trial aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .prob import Gaussian, Kde, RngStream, kde_fit, logsumexp
from .tasks import GridWalkerTask, RandomGaussiansTask


@dataclass
class MetricSnapshot:
    iteration: int
    reverse_kl: float
    reverse_kl_stderr: float
    neg_elbo: float
    neg_elbo_stderr: float
    effective_sample_size: float = math.nan
    mode_score: dict | None = None
    flagged: bool = field(init=False)

    def __post_init__(self):
        # Monte Carlo noise may push tiny KLs slightly below zero
        self.flagged = self.reverse_kl < 0
        if self.reverse_kl < -0.05:
            raise ValueError(f"reverse KL estimate {self.reverse_kl:.4f} is implausibly negative")


@dataclass(frozen=True)
class DefensiveProposal:
    """``0.9 * KDE + 0.1 * broad Gaussian``; used to estimate normalizers."""

    kde: Kde
    broad: Gaussian
    kde_share: float = 0.9

    def log_pdf(self, x):
        return np.logaddexp(math.log(self.kde_share) + self.kde.log_pdf(x),
                            math.log1p(-self.kde_share) + self.broad.log_pdf(x))

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        n_kde = int(round(self.kde_share * n))
        return np.concatenate([self.kde.sample(rng, n_kde), self.broad.sample(rng, n - n_kde)])


def estimate_log_normalizer(log_density: Callable, proposal, n: int, rng: RngStream) -> tuple[float, float]:
    """Importance-sampling estimate of ``log Z`` and its delta-method standard error."""
    x = proposal.sample(rng, n)
    log_w = np.asarray(log_density(x), dtype=float) - np.asarray(proposal.log_pdf(x), dtype=float)
    log_z = logsumexp(log_w) - math.log(n)
    w = np.exp(log_w - log_z)
    stderr = float(np.std(w) / math.sqrt(n))
    return float(log_z), stderr


def task_log_normalizer(task, expert: np.ndarray, rng: RngStream, n: int = 100_000) -> float:
    """Per-task-instance ``log Z`` of the expert density, shared by every method."""
    if isinstance(task, RandomGaussiansTask):
        return 0.0
    if isinstance(task, GridWalkerTask):
        support = np.atleast_2d(expert)[:2000]
        kde = kde_fit(support, 0.25 * kde_fit(support).bandwidth)
        proposal = DefensiveProposal(kde, task.angle_prior())
        log_z, _ = estimate_log_normalizer(task.expert_log_density, proposal, n, rng)
        return log_z
    raise TypeError(f"unsupported task {type(task).__name__}")


def reverse_kl_estimate(policy, true_log_density: Callable, n: int, rng: RngStream,
                        log_normalizer: float | None = None, kde: Kde | None = None,
                        return_stderr: bool = False):
    """Monte Carlo ``KL(policy || p)`` for a possibly unnormalized ``p``.

    Without ``log_normalizer``, ``log Z`` is estimated by importance sampling
    from the equal fusion of the policy and ``kde`` (policy alone if no KDE).
    """
    if n < 1000:
        raise ValueError("reverse KL estimate needs n >= 1000")
    x = policy.sample(rng, n)
    diff = np.asarray(policy.log_pdf(x), dtype=float) - np.asarray(true_log_density(x), dtype=float)
    if log_normalizer is None:
        if kde is not None:
            from .reward import FusionDistribution
            proposal = FusionDistribution(policy, kde)
        else:
            proposal = policy
        log_normalizer, _ = estimate_log_normalizer(true_log_density, proposal, n, rng)
    kl = float(np.mean(diff) + log_normalizer)
    stderr = float(np.std(diff) / math.sqrt(n))
    if not math.isfinite(kl):
        raise FloatingPointError("non-finite reverse KL estimate")
    return (kl, stderr) if return_stderr else kl


def neg_elbo(policy, reward: Callable, n: int, rng: RngStream, return_stderr: bool = False):
    """``-E_q[reward(x) - log q(x)]``."""
    if n < 1000:
        raise ValueError("negative ELBO needs n >= 1000")
    x = policy.sample(rng, n)
    vals = np.asarray(reward(x), dtype=float) - np.asarray(policy.log_pdf(x), dtype=float)
    value = float(-np.mean(vals))
    if not math.isfinite(value):
        raise FloatingPointError("non-finite negative ELBO")
    stderr = float(np.std(vals) / math.sqrt(n))
    return (value, stderr) if return_stderr else value


@dataclass
class ModeRepresentation:
    mode_center_scores: np.ndarray
    negative_sample_scores: np.ndarray
    raw_min: float
    raw_max: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {"mode_center_scores": self.mode_center_scores.tolist(),
                "negative_sample_scores": self.negative_sample_scores.tolist(),
                "raw_min": self.raw_min, "raw_max": self.raw_max, "degenerate": self.degenerate}


def mode_representation(reward: Callable, task: GridWalkerTask, n_negatives: int = 100,
                        rng: RngStream | None = None) -> ModeRepresentation:
    """Reward at all mode centers and at uniform draws from the angle box, min-max normalized jointly."""
    rng = rng or RngStream(0)
    centers = task.mode_centers()
    lo, hi = task.angle_box
    negatives = rng.uniform(lo, hi, (n_negatives, task.d))
    raw_c = np.asarray(reward(centers), dtype=float)
    raw_n = np.asarray(reward(negatives), dtype=float)
    both = np.concatenate([raw_c, raw_n])
    r_min, r_max = float(both.min()), float(both.max())
    degenerate = not r_max > r_min
    if degenerate:
        norm_c, norm_n = np.full_like(raw_c, 0.5), np.full_like(raw_n, 0.5)
    else:
        norm_c = (raw_c - r_min) / (r_max - r_min)
        norm_n = (raw_n - r_min) / (r_max - r_min)
    return ModeRepresentation(norm_c, norm_n, r_min, r_max, degenerate)


def explored_modes(policy, task: GridWalkerTask, min_weight: float | None = None) -> np.ndarray:
    """Boolean mask over mode centers that host the nearest-center of some policy component."""
    mix = policy.mixture if hasattr(policy, "mixture") else policy
    if min_weight is None:
        min_weight = 0.5 / mix.n_components
    keep = mix.weights >= min_weight
    mask = np.zeros(2**task.d, dtype=bool)
    mask[task.nearest_mode(mix.means[keep])] = True
    return mask


def aggregate_trials(traces: Sequence[Sequence[float]]) -> dict:
    """Per trial, mean of the metric from its best (minimum) iteration to the last; then mean/std over trials."""
    if len(traces) == 0:
        raise ValueError("aggregate_trials needs at least one trial")
    per_trial = []
    for trace in traces:
        trace = np.asarray(trace, dtype=float)
        if trace.size == 0:
            raise ValueError("empty metric trace")
        best = int(np.argmin(trace))
        per_trial.append(float(np.mean(trace[best:])))
    # fsum keeps the summary exactly invariant to trial order
    n = len(per_trial)
    mean = math.fsum(per_trial) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in per_trial) / (n - 1)) if n > 1 else 0.0
    return {"mean": mean, "std": std, "n_trials": n, "per_trial": per_trial}
