"""Trust-region updates of Gaussian-mixture policies against an unnormalized log-density.

Each step minimizes ``KL(q || exp(target))`` with a variational lower bound:
responsibilities from the current mixture decouple the problem into one
entropy-regularized objective per component and one for the weights.
Components are updated in closed form from a quadratic surrogate of their
reward fitted by least squares in whitened coordinates, subject to
``KL(new || old) <= component_kl_bound``. Weights follow a tempered
exponentiated update subject to ``KL(new || old) <= weight_kl_bound``.
Both multipliers are found by bisection against the closed-form KL, so
every accepted step respects its bound by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg

from . import container
from .prob import Gaussian, Mixture, RngStream, gaussian_kl, logsumexp

log = logging.getLogger(__name__)

ETA_MAX = 1e12


@dataclass(frozen=True)
class TrustRegionConfig:
    component_kl_bound: float = 0.05
    weight_kl_bound: float = 0.05
    samples_per_component: int = 64
    ridge: float = 1e-8

    def __post_init__(self):
        if not (self.component_kl_bound > 0 and self.weight_kl_bound > 0):
            raise ValueError("trust-region bounds must be positive")
        if self.samples_per_component < 2:
            raise ValueError("need at least two samples per component")


@dataclass(frozen=True)
class GmmPolicy:
    """A Gaussian mixture plus the multipliers of its last trust-region step."""

    mixture: Mixture
    component_etas: np.ndarray | None = None
    weight_eta: float = 0.0
    previous: Mixture | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.mixture.dim

    @property
    def n_components(self) -> int:
        return self.mixture.n_components

    def log_pdf(self, x):
        return self.mixture.log_pdf(x)

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        return self.mixture.sample(rng, n)

    def to_bytes(self) -> bytes:
        m = self.mixture
        arrays = {"log_weights": m.log_weights, "means": m.means,
                  "chols": np.stack([c.covariance_factor for c in m.components])}
        return container.pack("policy", {"dim": m.dim, "n_components": m.n_components}, arrays)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GmmPolicy":
        _, arrays = container.unpack(blob, "policy")
        return cls(mixture_from_arrays(arrays))


def mixture_from_arrays(arrays: dict) -> Mixture:
    comps = tuple(Gaussian(mu, L) for mu, L in zip(arrays["means"], arrays["chols"]))
    return Mixture(arrays["log_weights"], comps)


def mixture_to_arrays(m: Mixture) -> dict:
    return {"log_weights": m.log_weights, "means": m.means,
            "chols": np.stack([c.covariance_factor for c in m.components])}


def initial_policy(prior: Gaussian, K: int, rng: RngStream, std_ratio: float | None = None) -> GmmPolicy:
    """``K`` equally weighted components with means drawn from ``prior``.

    Component covariances are ``prior / K^(2/d)``, or ``std_ratio**2 * prior``
    when ``std_ratio`` is given.
    """
    if K < 1:
        raise ValueError("policy needs K >= 1")
    means = prior.sample(rng, K)
    ratio = std_ratio if std_ratio is not None else K ** (-1.0 / prior.dim)
    chol = prior.covariance_factor * ratio
    comps = tuple(Gaussian(mu, chol) for mu in means)
    return GmmPolicy(Mixture(np.full(K, -math.log(K)), comps))


def _quadratic_features(u: np.ndarray) -> np.ndarray:
    n, d = u.shape
    iu = np.triu_indices(d)
    quad = (u[:, :, None] * u[:, None, :])[:, iu[0], iu[1]]
    return np.concatenate([np.ones((n, 1)), u, quad], axis=1)


def _fit_quadratic(u: np.ndarray, r: np.ndarray, ridge: float) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``r ~ c + b.u - 0.5 u'Au``; returns ``(A, b)``."""
    d = u.shape[1]
    phi = _quadratic_features(u)
    # center the reward; the constant is irrelevant and this keeps the solve well scaled
    r = r - r.mean()
    gram = phi.T @ phi
    reg = ridge * np.trace(gram) / gram.shape[0] * np.eye(gram.shape[0])
    reg[0, 0] = 0.0
    coef = linalg.solve(gram + reg, phi.T @ r, assume_a="sym")
    b = coef[1:1 + d]
    beta = coef[1 + d:]
    A = np.zeros((d, d))
    iu = np.triu_indices(d)
    A[iu] = beta
    A = -(A + A.T)  # diagonal doubles to -2*beta_ii, off-diagonal to -beta_ij
    return A, b


def _whitened_update(A: np.ndarray, b: np.ndarray, eta: float):
    """Natural-parameter blend of the whitened old component N(0, I) with the surrogate."""
    d = len(b)
    prec = (eta * np.eye(d) + A) / (eta + 1.0)
    lin = b / (eta + 1.0)
    try:
        chol_prec = np.linalg.cholesky(0.5 * (prec + prec.T))
    except np.linalg.LinAlgError:
        return None
    mean = linalg.cho_solve((chol_prec, True), lin)
    inv_chol = linalg.solve_triangular(chol_prec, np.eye(d), lower=True)
    cov = inv_chol.T @ inv_chol
    return mean, cov


def _kl_to_standard(mean: np.ndarray, cov: np.ndarray) -> float:
    d = len(mean)
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        return math.inf
    return 0.5 * (np.trace(cov) + mean @ mean - d - logdet)


def _solve_component(A, b, bound):
    """Smallest multiplier whose whitened update satisfies ``KL <= bound``."""

    def kl_at(eta):
        upd = _whitened_update(A, b, eta)
        return (math.inf, None) if upd is None else (_kl_to_standard(*upd), upd)

    kl0, upd0 = kl_at(0.0)
    if kl0 <= bound:
        return 0.0, upd0
    lo, hi = 0.0, 1.0
    kl_hi, upd_hi = kl_at(hi)
    while kl_hi > bound:
        lo, hi = hi, hi * 10.0
        if hi > ETA_MAX:
            return None, None
        kl_hi, upd_hi = kl_at(hi)
    for _ in range(60):
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        kl_mid, upd_mid = kl_at(mid)
        if kl_mid <= bound:
            hi, upd_hi = mid, upd_mid
        else:
            lo = mid
        if hi - lo <= 1e-6 * hi:
            break
    return hi, upd_hi


def _solve_weights(log_w_old: np.ndarray, rewards: np.ndarray, bound: float):
    """Maximize ``sum q R + H(q)`` subject to ``KL(q || q_old) <= bound``."""

    def update(eta):
        lw = (eta * log_w_old + rewards) / (eta + 1.0)
        return lw - logsumexp(lw)

    def kl(lw):
        return float(np.sum(np.exp(lw) * (lw - log_w_old)))

    lw0 = update(0.0)
    if kl(lw0) <= bound:
        return 0.0, lw0
    lo, hi = 0.0, 1.0
    while kl(update(hi)) > bound:
        lo, hi = hi, hi * 10.0
        if hi > ETA_MAX:
            return hi, log_w_old.copy()
    for _ in range(60):
        mid = math.sqrt(lo * hi) if lo > 0 else 0.5 * hi
        if kl(update(mid)) <= bound:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-6 * hi:
            break
    return hi, update(hi)


def policy_update_step(policy: GmmPolicy, target_log_density: Callable, trc: TrustRegionConfig,
                       rng: RngStream) -> tuple[GmmPolicy, dict]:
    """One trust-region step of every component and of the weights.

    Returns the new policy and diagnostics: per-component KL and multiplier,
    weight KL, skipped components, and the Monte Carlo estimate of
    ``E_q[target - log q]`` under the old policy.
    """
    old = policy.mixture
    K, d, S = old.n_components, old.dim, trc.samples_per_component
    eps = rng.normal((K, S, d))
    xs = np.stack([c.mean + eps[k] @ c.covariance_factor.T for k, c in enumerate(old.components)])
    flat = xs.reshape(K * S, d)
    target = np.asarray(target_log_density(flat), dtype=float)
    if not np.all(np.isfinite(target)):
        raise FloatingPointError("target log-density is not finite on policy samples")
    comp_logp = old.component_log_pdfs(flat)
    log_q = logsumexp(comp_logp + old.log_weights, axis=1)
    advantage = (target - log_q).reshape(K, S)

    # weights: R_o = E_{x|o}[target - log q] + log q(o)
    weight_rewards = advantage.mean(axis=1) + old.log_weights
    weight_eta, new_log_w = _solve_weights(old.log_weights, weight_rewards, trc.weight_kl_bound)

    new_comps = []
    etas = np.zeros(K)
    kls = np.zeros(K)
    skipped = []
    for k, comp in enumerate(old.components):
        # component reward: target - log q(x) + log q(x|k), fitted in whitened coordinates u = eps
        r = advantage[k] + comp_logp.reshape(K, S, K)[k, :, k]
        A, b = _fit_quadratic(eps[k], r, trc.ridge)
        eta, upd = _solve_component(A, b, trc.component_kl_bound)
        if upd is None:
            log.warning("component %d: surrogate precision never positive definite, skipped", k)
            skipped.append(k)
            new_comps.append(comp)
            etas[k] = math.inf
            continue
        mean_u, cov_u = upd
        L = comp.covariance_factor
        new_mean = comp.mean + L @ mean_u
        new_cov = L @ cov_u @ L.T
        try:
            cand = Gaussian.from_covariance(new_mean, new_cov)
        except np.linalg.LinAlgError:
            cand = None
        kl = gaussian_kl(cand, comp) if cand is not None else math.inf
        # reject-and-shrink guards against round-off when mapping back from whitened space
        while cand is None or kl > trc.component_kl_bound + 1e-6:
            eta = max(2.0 * eta, 1e-3)
            if eta > ETA_MAX:
                cand = None
                break
            upd = _whitened_update(A, b, eta)
            if upd is None:
                continue
            new_mean = comp.mean + L @ upd[0]
            new_cov = L @ upd[1] @ L.T
            try:
                cand = Gaussian.from_covariance(new_mean, new_cov)
            except np.linalg.LinAlgError:
                cand = None
                continue
            kl = gaussian_kl(cand, comp)
        if cand is None:
            log.warning("component %d: update rejected, skipped", k)
            skipped.append(k)
            new_comps.append(comp)
            etas[k] = math.inf
            continue
        new_comps.append(cand)
        etas[k] = eta
        kls[k] = kl
    if len(skipped) == K:
        raise FloatingPointError("all components skipped in policy update")

    new_mix = Mixture(new_log_w, tuple(new_comps))
    w_old = np.exp(old.log_weights)
    diagnostics = {
        "component_kl": kls,
        "component_eta": etas,
        "weight_kl": float(np.sum(np.exp(new_mix.log_weights) * (new_mix.log_weights - old.log_weights))),
        "weight_eta": weight_eta,
        "skipped": skipped,
        "elbo": float(w_old @ advantage.mean(axis=1)),
    }
    return GmmPolicy(new_mix, etas, weight_eta, old), diagnostics


def optimize_policy(policy: GmmPolicy, target_log_density: Callable, steps: int,
                    trc: TrustRegionConfig, rng: RngStream, callback: Callable | None = None) -> GmmPolicy:
    for step in range(steps):
        policy, diag = policy_update_step(policy, target_log_density, trc, rng)
        if callback is not None:
            callback(step, policy, diag)
    return policy


def policy_elbo(policy: GmmPolicy, reward: Callable, n: int, rng: RngStream) -> float:
    """Monte Carlo ``E_q[reward - log q]``."""
    x = policy.mixture.sample(rng, n)
    return float(np.mean(np.asarray(reward(x), dtype=float) - policy.mixture.log_pdf(x)))


def fit_inference_policy(reward: Callable, K: int, steps: int, rng: RngStream, prior: Gaussian,
                         trc: TrustRegionConfig | None = None, callback: Callable | None = None,
                         restarts: int = 5, std_ratio: float = 0.5,
                         selection_samples: int = 4000) -> GmmPolicy:
    """Train freshly initialized ``K``-component policies on a fixed reward; keep the best.

    Each restart draws new means from ``prior`` with component std
    ``std_ratio`` times the prior's and runs ``steps`` trust-region updates.
    The restart with the highest ELBO against ``reward`` is returned, so the
    selection uses the reward alone.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    trc = trc or TrustRegionConfig()
    best, best_elbo = None, -math.inf
    for _ in range(restarts):
        policy = initial_policy(prior, K, rng, std_ratio)
        policy = optimize_policy(policy, reward, steps, trc, rng, callback)
        elbo = policy_elbo(policy, reward, selection_samples, rng) if restarts > 1 else 0.0
        if best is None or elbo > best_elbo:
            best, best_elbo = policy, elbo
    return best
