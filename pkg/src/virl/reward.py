"""Cumulative rewards, the fusion sampler, and the three training loops.

``virl_run`` recovers the reward as a prior log-density plus a growing
stack of density-ratio discriminators. ``geim_run`` trains one persistent
reward network through the structured logit ``R(x) - log mu(x)``.
``eim_run`` is the behavioral-cloning baseline whose reward is the
log-density of its own policy.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from . import container
from .discriminator import Discriminator, MlpConfig, fit
from .policy import (GmmPolicy, TrustRegionConfig, initial_policy, mixture_from_arrays,
                     mixture_to_arrays, policy_update_step)
from .prob import Gaussian, Kde, Mixture, RngStream, kde_fit, logsumexp

log = logging.getLogger(__name__)

LOG_HALF = math.log(0.5)


@dataclass(frozen=True)
class TrainConfig:
    """Settings shared by the V-IRL, G-EIM and EIM loops."""

    iterations: int = 40
    n_components: int = 10
    policy_update_steps: int = 1
    mlp: MlpConfig = field(default_factory=MlpConfig)
    trust_region: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    bandwidth: float | str = "silverman"
    n_negatives: int | None = None
    min_ess: float = 0.0
    holdout_fraction: float = 0.1
    prior_scale: float = 2.0
    geim_sampler: str = "fusion"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if not 0 <= self.policy_update_steps <= 200:
            raise ValueError("policy_update_steps must lie in [0, 200]")
        if not isinstance(self.bandwidth, str) and not 0 < self.bandwidth <= 1:
            raise ValueError("bandwidth must lie in (0, 1] or be 'silverman'")
        if not 0 <= self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        if self.geim_sampler not in ("fusion", "policy"):
            raise ValueError("geim_sampler must be 'fusion' or 'policy'")


def make_prior(expert: np.ndarray, scale: float = 2.0) -> Gaussian:
    """Broad zero-mean isotropic Gaussian, std ``scale`` times the expert spread."""
    expert = np.atleast_2d(expert)
    spread = float(np.mean(np.std(expert, axis=0))) if len(expert) > 1 else 1.0
    return Gaussian.standard(expert.shape[1], scale * max(spread, 1e-3))


@dataclass(frozen=True)
class CumulativeReward:
    """``R(x) = log prior(x) + sum_i phi_i(x)``, summed front to back."""

    prior: Gaussian | Mixture
    stack: tuple[Discriminator, ...] = ()

    kind = "cumulative"

    @property
    def dim(self) -> int:
        return self.prior.dim

    def push(self, disc: Discriminator) -> "CumulativeReward":
        if disc.training:
            raise ValueError("only eval-mode discriminators may join the reward stack")
        return CumulativeReward(self.prior, self.stack + (disc,))

    def logits(self, x) -> np.ndarray:
        """Per-discriminator logits, shape ``(len(stack), n)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.stack:
            return np.zeros((0, len(x)))
        return np.stack([disc(x) for disc in self.stack])

    def evaluate(self, x):
        x = np.asarray(x, dtype=float)
        out = self.prior.log_pdf(x)
        for disc in self.stack:
            out = out + disc(x)
        return out

    __call__ = evaluate

    def to_parts(self):
        meta = {"prior": "gaussian" if isinstance(self.prior, Gaussian) else "mixture", "stack": []}
        if isinstance(self.prior, Gaussian):
            arrays = {"prior/mean": self.prior.mean, "prior/chol": self.prior.covariance_factor}
        else:
            arrays = {f"prior/{k}": v for k, v in mixture_to_arrays(self.prior).items()}
        for j, disc in enumerate(self.stack):
            dmeta, darrays = disc.to_parts()
            meta["stack"].append(dmeta)
            arrays.update({f"stack{j}/{k}": v for k, v in darrays.items()})
        return meta, arrays

    @classmethod
    def from_parts(cls, meta, arrays):
        if meta["prior"] == "gaussian":
            prior = Gaussian(arrays["prior/mean"], arrays["prior/chol"])
        else:
            prior = mixture_from_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("prior/")})
        stack = []
        for j, dmeta in enumerate(meta["stack"]):
            prefix = f"stack{j}/"
            darrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
            stack.append(Discriminator.from_parts(dmeta, darrays))
        return cls(prior, tuple(stack))


@dataclass(frozen=True)
class NetworkReward:
    """A single reward network, as learned by G-EIM."""

    net: Discriminator

    kind = "network"

    @property
    def dim(self) -> int:
        return self.net.dim

    def evaluate(self, x):
        return self.net(x)

    __call__ = evaluate

    def to_parts(self):
        dmeta, arrays = self.net.to_parts()
        return {"net": dmeta}, arrays

    @classmethod
    def from_parts(cls, meta, arrays):
        return cls(Discriminator.from_parts(meta["net"], arrays))


@dataclass(frozen=True)
class PolicyReward:
    """Surrogate reward equal to a policy's log-density (EIM)."""

    mixture: Mixture

    kind = "policy"

    @property
    def dim(self) -> int:
        return self.mixture.dim

    def evaluate(self, x):
        return self.mixture.log_pdf(x)

    __call__ = evaluate

    def to_parts(self):
        return {}, mixture_to_arrays(self.mixture)

    @classmethod
    def from_parts(cls, meta, arrays):
        return cls(mixture_from_arrays(arrays))


REWARD_KINDS = {cls.kind: cls for cls in (CumulativeReward, NetworkReward, PolicyReward)}


def save_reward_bundle(path, reward, init_prior: Gaussian, meta: dict | None = None) -> None:
    """Persist a recovered reward with the prior used to initialize inference policies."""
    rmeta, arrays = reward.to_parts()
    arrays = {f"reward/{k}": v for k, v in arrays.items()}
    arrays["init_prior/mean"] = init_prior.mean
    arrays["init_prior/chol"] = init_prior.covariance_factor
    container.write(path, "reward_bundle", {"reward_kind": reward.kind, "reward": rmeta, **(meta or {})}, arrays)


def load_reward_bundle(path):
    """Returns ``(reward, init_prior, meta)``; raises ``ContainerError`` on corruption."""
    meta, arrays = container.read(path, "reward_bundle")
    cls = REWARD_KINDS[meta["reward_kind"]]
    rarrays = {k[7:]: v for k, v in arrays.items() if k.startswith("reward/")}
    reward = cls.from_parts(meta["reward"], rarrays)
    init_prior = Gaussian(arrays["init_prior/mean"], arrays["init_prior/chol"])
    return reward, init_prior, meta


def reward_evaluate(r: CumulativeReward, x):
    return r.evaluate(x)


@dataclass(frozen=True)
class FusionDistribution:
    """Equal mixture of the sampling policy and the expert KDE."""

    policy: GmmPolicy
    kde: Kde

    def log_pdf(self, x):
        return np.logaddexp(LOG_HALF + self.policy.log_pdf(x), LOG_HALF + self.kde.log_pdf(x))

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        """Stratified: ``n // 2`` policy draws followed by KDE draws."""
        n_policy = n // 2
        parts = [self.kde.sample(rng, n - n_policy)]
        if n_policy:
            parts.insert(0, self.policy.sample(rng, n_policy))
        return np.concatenate(parts, axis=0)


@dataclass(frozen=True)
class ImportanceWeights:
    log_weights: np.ndarray
    weights: np.ndarray

    @property
    def ess(self) -> float:
        """Effective sample size ``1 / sum w^2``."""
        return float(1.0 / np.sum(self.weights**2))


def importance_weights(reward: Callable, sampler_log_pdf: Callable, negatives) -> ImportanceWeights:
    """Self-normalized weights ``exp(R(x) - log sampler(x))``."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=float))
    if len(negatives) == 0:
        raise ValueError("importance weights need at least one negative")
    log_w = np.asarray(reward(negatives), dtype=float) - np.asarray(sampler_log_pdf(negatives), dtype=float)
    log_w = np.where(np.isnan(log_w), -np.inf, log_w)
    if not np.any(np.isfinite(log_w)):
        raise FloatingPointError("all importance log-weights are -inf")
    w = np.exp(log_w - logsumexp(log_w))
    return ImportanceWeights(log_w, w / w.sum())


@dataclass
class IterationRecord:
    iteration: int
    loss_trace: list[float]
    convergence: float
    ess: float = math.nan
    fallback: bool = False
    policy: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


@dataclass
class VirlState:
    reward: CumulativeReward
    policy: GmmPolicy
    kde: Kde
    last: Discriminator | None = None


@dataclass
class RunResult:
    reward: object
    policy: GmmPolicy
    records: list[IterationRecord]
    prior: Gaussian
    kde: Kde | None = None


def split_expert(expert: np.ndarray, holdout_fraction: float, rng: RngStream):
    expert = np.atleast_2d(expert)
    n_hold = int(round(holdout_fraction * len(expert)))
    if n_hold == 0 or n_hold >= len(expert):
        return expert, expert
    order = rng.permutation(len(expert))
    return expert[order[n_hold:]], expert[order[:n_hold]]


def _policy_steps(policy, target, steps, trc, rng):
    diag = {}
    kls, wkls, elbos = [], [], []
    for _ in range(steps):
        policy, d = policy_update_step(policy, target, trc, rng)
        kls.append(float(np.max(d["component_kl"])))
        wkls.append(d["weight_kl"])
        elbos.append(d["elbo"])
    if steps:
        diag = {"max_component_kl": max(kls), "max_weight_kl": max(wkls), "elbo": elbos[-1]}
    return policy, diag


def virl_iteration(state: VirlState, expert: np.ndarray, holdout: np.ndarray, cfg: TrainConfig,
                   rng: RngStream, t: int = 0) -> tuple[VirlState, IterationRecord]:
    """Train one discriminator against importance-weighted fusion samples, stack it, move the policy."""
    n_neg = cfg.n_negatives or len(expert)
    fusion = FusionDistribution(state.policy, state.kde)
    negatives = fusion.sample(rng, n_neg)
    iw = importance_weights(state.reward, fusion.log_pdf, negatives)
    fallback = False
    if iw.ess < cfg.min_ess:
        log.warning("iteration %d: importance ESS %.1f below %.1f, using KDE-only negatives", t, iw.ess, cfg.min_ess)
        negatives = state.kde.sample(rng, n_neg)
        iw = importance_weights(state.reward, state.kde.log_pdf, negatives)
        fallback = True

    if cfg.mlp.warm_start == "reuse" and state.last is not None:
        # hidden features carry over; the zero head keeps each new stack term at phi = 0
        disc = state.last.with_zero_head()
    else:
        disc = Discriminator(expert.shape[1], cfg.mlp, rng)
    fit(disc, expert, negatives, iw.weights, rng=rng)
    reward = state.reward.push(disc)
    convergence = float(np.mean(np.abs(disc(holdout))))

    policy, diag = _policy_steps(state.policy, reward, cfg.policy_update_steps, cfg.trust_region, rng)
    record = IterationRecord(t, list(disc.loss_trace), convergence, iw.ess, fallback, diag)
    return VirlState(reward, policy, state.kde, disc), record


def _setup(expert, cfg: TrainConfig, rng: RngStream):
    expert = np.atleast_2d(np.asarray(expert, dtype=float))
    train, holdout = split_expert(expert, cfg.holdout_fraction, rng)
    prior = make_prior(expert, cfg.prior_scale)
    policy = initial_policy(prior, cfg.n_components, rng)
    return train, holdout, prior, policy


def virl_run(expert, cfg: TrainConfig, rng: RngStream, evaluate: Callable | None = None) -> RunResult:
    """Iterate V-IRL for ``cfg.iterations`` rounds.

    ``evaluate(t, policy, reward)`` may return a metrics dict stored on each
    iteration record.
    """
    train, holdout, prior, policy = _setup(expert, cfg, rng)
    kde = kde_fit(train, cfg.bandwidth)
    state = VirlState(CumulativeReward(prior), policy, kde)
    records = []
    for t in range(1, cfg.iterations + 1):
        state, record = virl_iteration(state, train, holdout, cfg, rng, t)
        if evaluate is not None:
            record.metrics = evaluate(t, state.policy, state.reward)
        records.append(record)
    return RunResult(state.reward, state.policy, records, prior, kde)


def geim_run(expert, cfg: TrainConfig, rng: RngStream, evaluate: Callable | None = None) -> RunResult:
    """Generative EIM: one reward network ``R`` with discriminator logit ``R(x) - log sampler(x)``."""
    train, holdout, prior, policy = _setup(expert, cfg, rng)
    kde = kde_fit(train, cfg.bandwidth)
    net = Discriminator(train.shape[1], cfg.mlp, rng).eval()
    n_neg = cfg.n_negatives or len(train)
    records = []
    for t in range(1, cfg.iterations + 1):
        if cfg.geim_sampler == "fusion":
            sampler = FusionDistribution(policy, kde)
        else:
            sampler = policy
        negatives = sampler.sample(rng, n_neg)
        fit(net, train, negatives, None, rng=rng,
            positive_offsets=-sampler.log_pdf(train), negative_offsets=-sampler.log_pdf(negatives))
        convergence = float(np.mean(np.abs(net(holdout) - sampler.log_pdf(holdout))))
        reward = NetworkReward(net.copy())
        policy, diag = _policy_steps(policy, reward, cfg.policy_update_steps, cfg.trust_region, rng)
        record = IterationRecord(t, list(net.loss_trace), convergence, policy=diag)
        if evaluate is not None:
            record.metrics = evaluate(t, policy, reward)
        records.append(record)
    return RunResult(NetworkReward(net.copy()), policy, records, prior, kde)


def eim_run(expert, cfg: TrainConfig, rng: RngStream, evaluate: Callable | None = None) -> RunResult:
    """EIM baseline: density ratio between expert and current policy drives the policy directly."""
    train, holdout, prior, policy = _setup(expert, cfg, rng)
    n_neg = cfg.n_negatives or len(train)
    phi = Discriminator(train.shape[1], cfg.mlp, rng).eval()
    records = []
    for t in range(1, cfg.iterations + 1):
        negatives = policy.sample(rng, n_neg)
        if cfg.mlp.warm_start == "fresh":
            phi = Discriminator(train.shape[1], cfg.mlp, rng)
        fit(phi, train, negatives, None, rng=rng)
        convergence = float(np.mean(np.abs(phi(holdout))))
        frozen_policy, frozen_phi = policy, phi.copy()

        def target(x, q=frozen_policy, f=frozen_phi):
            return q.log_pdf(x) + f(x)

        policy, diag = _policy_steps(policy, target, cfg.policy_update_steps, cfg.trust_region, rng)
        record = IterationRecord(t, list(phi.loss_trace), convergence, policy=diag)
        if evaluate is not None:
            record.metrics = evaluate(t, policy, PolicyReward(policy.mixture))
        records.append(record)
    return RunResult(PolicyReward(policy.mixture), policy, records, prior)


METHODS = {"virl": virl_run, "geim": geim_run, "eim": eim_run}
