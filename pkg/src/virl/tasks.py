"""Benchmark tasks and expert-demonstration generators."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .prob import DimensionError, Gaussian, Mixture, RngStream, _as_batch, logsumexp

# Silverman at N=8000, d=2 gives 0.215 when the mean per-coordinate std is this value.
DEFAULT_GAUSSIANS_SCALE = 0.9615


@dataclass(frozen=True)
class RandomGaussiansTask:
    """2D Gaussian-mixture target with ``m`` random components.

    Means are drawn uniformly in ``[-mean_box, mean_box]^2``, covariances get
    log-uniform eigenvalues in ``eigenvalue_range`` under a random rotation,
    and weights are Dirichlet distributed. The whole mixture is then shifted
    to zero mean and rescaled so its mean per-coordinate standard deviation
    equals ``scale``.
    """

    m: int
    seed: int = 0
    mean_box: float = 5.0
    eigenvalue_range: tuple[float, float] = (0.05, 0.5)
    weight_concentration: float = 5.0
    scale: float = DEFAULT_GAUSSIANS_SCALE
    target: Mixture = field(init=False, repr=False, compare=False)

    kind = "random_gaussians"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("random Gaussians task needs m >= 1 components")
        object.__setattr__(self, "eigenvalue_range", tuple(self.eigenvalue_range))
        object.__setattr__(self, "target", self._build())

    def _build(self) -> Mixture:
        rng = RngStream(self.seed)
        d = 2
        means = rng.uniform(-self.mean_box, self.mean_box, (self.m, d))
        lo, hi = np.log(self.eigenvalue_range)
        covs = []
        for _ in range(self.m):
            eig = np.exp(rng.uniform(lo, hi, d))
            angle = rng.uniform(0.0, math.pi)
            rot = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
            covs.append(rot @ np.diag(eig) @ rot.T)
        weights = rng.gen.dirichlet(np.full(self.m, self.weight_concentration))
        raw = Mixture.from_arrays(weights, means, covs)
        mu, cov = raw.moments()
        s = self.scale / float(np.mean(np.sqrt(np.diag(cov))))
        comps = tuple(Gaussian(s * (c.mean - mu), s * c.covariance_factor) for c in raw.components)
        return Mixture(raw.log_weights, comps)

    @property
    def dim(self) -> int:
        return 2

    @property
    def size(self) -> int:
        return self.m

    def log_density(self, x):
        return self.target.log_pdf(x)

    def expert_log_density(self, x):
        return self.target.log_pdf(x)

    def spec(self) -> dict:
        return {"kind": self.kind, "m": self.m, "seed": self.seed, "mean_box": self.mean_box,
                "eigenvalue_range": list(self.eigenvalue_range),
                "weight_concentration": self.weight_concentration, "scale": self.scale}


def random_gaussians_make(m: int, seed: int = 0, **kwargs) -> RandomGaussiansTask:
    return RandomGaussiansTask(m=m, seed=seed, **kwargs)


@dataclass(frozen=True)
class GridWalkerTask:
    """Planar walk of ``d`` unit steps parameterized by absolute step angles.

    Step ``i`` ends at ``h_i``; its height is scored against 1D Gaussians on
    the vertical line ``i``, placed at every grid height reachable by going
    up or down at each previous step. The expert distribution additionally
    multiplies a zero-mean Gaussian over angles (``angle_prior_std``) that
    suppresses the backward-stepping copies of each mode.
    """

    d: int
    line_spacing: float = 0.8
    waypoint_variance: float = 1e-3
    angle_prior_std: float = 0.5

    kind = "grid_walker"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("grid walker needs d >= 1")
        if not 0.0 < self.line_spacing < 2.0:
            raise ValueError("line spacing must lie in (0, 2)")
        if not self.waypoint_variance > 0:
            raise ValueError("waypoint variance must be positive")

    @property
    def dim(self) -> int:
        return self.d

    @property
    def size(self) -> int:
        return self.d

    @property
    def mode_angle(self) -> float:
        # Only |spacing| <= 1 has real crossing angles; beyond that the walker
        # cannot reach the next line in one unit step.
        return math.acos(min(self.line_spacing, 1.0))

    @property
    def step_height(self) -> float:
        return math.sin(self.mode_angle)

    @property
    def angle_box(self) -> tuple[float, float]:
        return -1.2 * self.mode_angle, 1.2 * self.mode_angle

    def line_heights(self, i: int) -> np.ndarray:
        """Admissible waypoint heights on line ``i`` (1-based)."""
        return self.step_height * np.arange(-i, i + 1, 2, dtype=float)

    def positions(self, x) -> np.ndarray:
        """Walk positions ``h_0 .. h_d``; shape ``(d+1, 2)`` or ``(n, d+1, 2)``."""
        x, single = _as_batch(x, self.d)
        steps = np.stack([np.cos(x), np.sin(x)], axis=-1)
        h = np.concatenate([np.zeros((x.shape[0], 1, 2)), np.cumsum(steps, axis=1)], axis=1)
        return h[0] if single else h

    def log_density(self, x):
        """Unnormalized log-likelihood of the walk's step heights."""
        x, single = _as_batch(x, self.d)
        y = np.cumsum(np.sin(x), axis=1)
        var = self.waypoint_variance
        diff = y[:, :, None] - self._height_grid[None, :, :]
        logp = -0.5 * math.log(2.0 * math.pi * var) - 0.5 * diff**2 / var
        total = np.sum(logsumexp(logp, axis=2), axis=1)
        return float(total[0]) if single else total

    @property
    def _height_grid(self) -> np.ndarray:
        # Row i-1 holds line i's heights, padded with +inf (zero likelihood).
        grid = np.full((self.d, self.d + 1), np.inf)
        for i in range(1, self.d + 1):
            grid[i - 1, :i + 1] = self.line_heights(i)
        return grid

    def angle_prior(self) -> Gaussian:
        return Gaussian.standard(self.d, self.angle_prior_std)

    def expert_log_density(self, x):
        return self.log_density(x) + self.angle_prior().log_pdf(x)

    def mode_centers(self) -> np.ndarray:
        a = self.mode_angle
        return np.array(list(itertools.product((-a, a), repeat=self.d)))

    def nearest_mode(self, x) -> np.ndarray:
        x, _ = _as_batch(x, self.d)
        centers = self.mode_centers()
        dist = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
        return np.argmin(dist, axis=1)

    def spec(self) -> dict:
        return {"kind": self.kind, "d": self.d, "line_spacing": self.line_spacing,
                "waypoint_variance": self.waypoint_variance, "angle_prior_std": self.angle_prior_std}


def grid_walker_positions(task: GridWalkerTask, x) -> np.ndarray:
    return task.positions(x)


def grid_walker_log_density(task: GridWalkerTask, x):
    return task.log_density(x)


def task_from_spec(spec: dict):
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == RandomGaussiansTask.kind:
        return RandomGaussiansTask(**spec)
    if kind == GridWalkerTask.kind:
        return GridWalkerTask(**spec)
    raise ValueError(f"unknown task kind {kind!r}")


def ess_sample(log_density: Callable, prior: Gaussian, rng: RngStream, M: int,
               burn_in: int = 1000, thinning: int = 10, n_chains: int = 1,
               init: np.ndarray | None = None, anneal: bool = False) -> np.ndarray:
    """Elliptical slice sampling from ``exp(log_density)``.

    The Gaussian ``prior`` generates the ellipses; the remaining factor
    ``log_density - prior.log_pdf`` plays the role of the likelihood. Chains
    are advanced in lockstep; each keeps every ``thinning``-th state after
    ``burn_in`` steps. ``log_density`` must accept a batch ``(n, d)``.
    Returns ``M`` samples ordered step by step, chain by chain.

    With ``anneal`` the likelihood is tempered from 1e-4 up to 1 over the
    first 80% of burn-in; post burn-in transitions are untempered.
    """

    def loglik(x):
        return np.asarray(log_density(x), dtype=float) - prior.log_pdf(x)

    return _elliptical_slice(loglik, prior, rng, M, burn_in, thinning, n_chains, init, anneal)


def _elliptical_slice(loglik, prior, rng, M, burn_in, thinning, n_chains, init, anneal):
    if M < 1:
        raise ValueError("ESS needs M >= 1")
    if thinning < 1 or burn_in < 0 or n_chains < 1:
        raise ValueError("invalid ESS settings")
    d = prior.dim
    state = np.tile(prior.mean, (n_chains, 1)) if init is None else np.array(init, dtype=float)
    if state.shape != (n_chains, d):
        raise DimensionError(f"init must have shape {(n_chains, d)}")
    cur = loglik(state)
    if not np.all(np.isfinite(cur)):
        raise ValueError("log density is not finite at the ESS initial state")

    anneal_steps = int(0.8 * burn_in) if anneal else 0
    per_chain = -(-M // n_chains)
    total_steps = burn_in + per_chain * thinning
    kept = []
    for step in range(1, total_steps + 1):
        beta = 1e-4 ** (1.0 - step / anneal_steps) if step < anneal_steps else 1.0
        nu = prior.sample(rng, n_chains) - prior.mean
        centred = state - prior.mean
        threshold = beta * cur + np.log(rng.uniform(size=n_chains))
        theta = rng.uniform(0.0, 2.0 * math.pi, n_chains)
        lo, hi = theta - 2.0 * math.pi, theta.copy()
        active = np.arange(n_chains)
        while active.size:
            prop = (prior.mean + centred[active] * np.cos(theta[active, None])
                    + nu[active] * np.sin(theta[active, None]))
            ll = loglik(prop)
            ok = beta * ll > threshold[active]
            done = active[ok]
            state[done] = prop[ok]
            cur[done] = ll[ok]
            active = active[~ok]
            t = theta[active]
            hi[active] = np.where(t > 0, t, hi[active])
            lo[active] = np.where(t > 0, lo[active], t)
            if np.any(hi[active] - lo[active] < 1e-300):
                raise RuntimeError("elliptical slice bracket collapsed onto the current state")
            theta[active] = rng.uniform(lo[active], hi[active])
        if step > burn_in and (step - burn_in) % thinning == 0:
            kept.append(state.copy())
    return np.concatenate(kept, axis=0)[:M]


@dataclass
class ExpertSet:
    samples: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def save(self, path) -> None:
        """Write the samples as CSV plus a ``.json`` sidecar with provenance."""
        path = Path(path)
        np.savetxt(path, self.samples, delimiter=",", fmt="%.17g")
        sidecar = {"rows": len(self), "cols": self.dim, **self.provenance}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ExpertSet":
        path = Path(path)
        samples = np.loadtxt(path, delimiter=",", ndmin=2)
        sidecar = path.with_suffix(path.suffix + ".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        if meta and (meta.get("rows"), meta.get("cols")) != samples.shape:
            raise ValueError(f"expert file {path} does not match its sidecar shape")
        meta.pop("rows", None)
        meta.pop("cols", None)
        return cls(samples, meta)


def make_expert_set(task, M: int = 8000, rng: RngStream | None = None, *,
                    burn_in: int = 1000, thinning: int = 10, samples_per_chain: int = 8) -> ExpertSet:
    """Draw ``M`` expert demonstrations from the task's ground truth.

    Random Gaussians are sampled ancestrally. The grid walker runs lockstep
    elliptical slice chains started from angle-prior draws clipped to the
    forward half-plane; modes are narrow and ESS rarely hops between them,
    so many short chains are used and burn-in is tempered so that chains
    settle into modes in proportion to their mass rather than by basin.
    """
    if M < 1:
        raise ValueError("expert set needs M >= 1")
    rng = rng or RngStream(0)
    provenance = {"task": task.spec(), "rng_seed": rng.seed, "rng_counter": rng.counter}
    if isinstance(task, RandomGaussiansTask):
        samples = task.target.sample(rng, M)
        provenance["sampler"] = {"name": "ancestral"}
    elif isinstance(task, GridWalkerTask):
        prior = task.angle_prior()
        n_chains = max(1, -(-M // samples_per_chain))
        limit = 0.5 * math.pi - 0.05
        init = np.clip(prior.sample(rng, n_chains), -limit, limit)
        samples = _elliptical_slice(task.log_density, prior, rng, M, burn_in, thinning,
                                    n_chains, init, anneal=True)
        provenance["sampler"] = {"name": "elliptical_slice", "burn_in": burn_in, "thinning": thinning,
                                 "n_chains": n_chains, "prior_std": task.angle_prior_std,
                                 "annealed_burn_in": True}
    else:
        raise TypeError(f"unsupported task {type(task).__name__}")
    return ExpertSet(samples, provenance)
