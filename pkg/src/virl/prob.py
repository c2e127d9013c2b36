"""Dense probability primitives: Gaussians, mixtures, kernel density estimates.

All densities live in log space. Every ``log_pdf`` accepts either a single
point of shape ``(d,)`` (returns a float) or a batch of shape ``(n, d)``
(returns an array of shape ``(n,)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)


class DimensionError(ValueError):
    """Raised when a sample does not match the dimension of a density."""


def logsumexp(values, axis=None):
    """Overflow-free ``log(sum(exp(values)))``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("empty logsumexp")
    shift = np.max(values, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(values - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise DimensionError(f"expected samples of dimension {d}, got shape {np.shape(x)}")
    return x, single


class RngStream:
    """Seeded random stream.

    Identical seed and identical call sequence give bit-identical draws.
    ``spawn`` derives independent child streams deterministically from the
    seed and a running counter.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.counter = 0
        self.gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def spawn(self) -> "RngStream":
        self.counter += 1
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child.counter = 0
        seq = np.random.SeedSequence(self.seed, spawn_key=(self.counter,))
        child.gen = np.random.Generator(np.random.PCG64(seq))
        return child

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def categorical(self, log_weights, size: int) -> np.ndarray:
        """Draw ``size`` indices from normalized ``log_weights`` by inverse CDF."""
        cdf = np.cumsum(np.exp(np.asarray(log_weights) - logsumexp(log_weights)))
        u = self.gen.uniform(0.0, cdf[-1], size)
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal parameterized by mean and lower Cholesky factor."""

    mean: np.ndarray
    covariance_factor: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        chol = np.atleast_2d(np.asarray(self.covariance_factor, dtype=float))
        if chol.shape != (mean.size, mean.size):
            raise DimensionError(f"factor shape {chol.shape} does not match mean of size {mean.size}")
        if not np.all(np.diag(chol) > 0):
            raise ValueError("covariance factor must have a strictly positive diagonal")
        chol = np.tril(chol)
        mean.setflags(write=False)
        chol.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance_factor", chol)

    @classmethod
    def from_covariance(cls, mean, covariance) -> "Gaussian":
        covariance = np.atleast_2d(np.asarray(covariance, dtype=float))
        return cls(mean, np.linalg.cholesky(0.5 * (covariance + covariance.T)))

    @classmethod
    def standard(cls, d: int, scale: float = 1.0) -> "Gaussian":
        return cls(np.zeros(d), scale * np.eye(d))

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def covariance(self) -> np.ndarray:
        return self.covariance_factor @ self.covariance_factor.T

    @property
    def precision(self) -> np.ndarray:
        inv_chol = linalg.solve_triangular(self.covariance_factor, np.eye(self.dim), lower=True)
        return inv_chol.T @ inv_chol

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.covariance_factor))))

    def entropy(self) -> float:
        return 0.5 * self.dim * (1.0 + LOG_2PI) + 0.5 * self.log_det()

    def log_pdf(self, x):
        x, single = _as_batch(x, self.dim)
        z = linalg.solve_triangular(self.covariance_factor, (x - self.mean).T, lower=True)
        out = -0.5 * self.dim * LOG_2PI - 0.5 * self.log_det() - 0.5 * np.sum(z * z, axis=0)
        return float(out[0]) if single else out

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        return self.mean + rng.normal((n, self.dim)) @ self.covariance_factor.T


def gaussian_log_pdf(g: Gaussian, x):
    return g.log_pdf(x)


def gaussian_kl(p: Gaussian, q: Gaussian) -> float:
    """Closed-form KL(p || q)."""
    if p.dim != q.dim:
        raise DimensionError("KL between Gaussians of different dimension")
    lq_inv_lp = linalg.solve_triangular(q.covariance_factor, p.covariance_factor, lower=True)
    diff = linalg.solve_triangular(q.covariance_factor, q.mean - p.mean, lower=True)
    trace = float(np.sum(lq_inv_lp**2))
    return 0.5 * (trace + float(diff @ diff) - p.dim + q.log_det() - p.log_det())


@dataclass(frozen=True)
class Mixture:
    """Gaussian mixture with normalized log-weights."""

    log_weights: np.ndarray
    components: tuple[Gaussian, ...]

    def __post_init__(self):
        lw = np.atleast_1d(np.asarray(self.log_weights, dtype=float))
        comps = tuple(self.components)
        if len(comps) == 0 or len(comps) != lw.size:
            raise ValueError("need one log-weight per component and at least one component")
        if len({c.dim for c in comps}) != 1:
            raise DimensionError("all mixture components must share a dimension")
        lw = lw - logsumexp(lw)
        lw.setflags(write=False)
        object.__setattr__(self, "log_weights", lw)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, weights, means, covariances) -> "Mixture":
        with np.errstate(divide="ignore"):
            lw = np.log(np.asarray(weights, dtype=float))
        comps = tuple(Gaussian.from_covariance(m, c) for m, c in zip(means, covariances))
        return cls(lw, comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    def component_log_pdfs(self, x) -> np.ndarray:
        """Array of shape ``(n, K)`` holding ``log q(x|z)``."""
        x, _ = _as_batch(x, self.dim)
        return np.stack([c.log_pdf(x) for c in self.components], axis=1)

    def log_pdf(self, x):
        x, single = _as_batch(x, self.dim)
        out = logsumexp(self.component_log_pdfs(x) + self.log_weights, axis=1)
        return float(out[0]) if single else out

    def sample(self, rng: RngStream, n: int, return_labels: bool = False):
        if n < 1:
            raise ValueError("sample count must be >= 1")
        z = rng.categorical(self.log_weights, n)
        eps = rng.normal((n, self.dim))
        x = np.empty((n, self.dim))
        for k, comp in enumerate(self.components):
            idx = z == k
            x[idx] = comp.mean + eps[idx] @ comp.covariance_factor.T
        return (x, z) if return_labels else x

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the mixture."""
        w = self.weights
        means = self.means
        mu = w @ means
        cov = sum(wk * (c.covariance + np.outer(c.mean - mu, c.mean - mu))
                  for wk, c in zip(w, self.components))
        return mu, cov


def mixture_log_pdf(m: Mixture, x):
    return m.log_pdf(x)


def mixture_sample(m: Mixture, rng: RngStream, n: int) -> np.ndarray:
    return m.sample(rng, n)


def silverman_bandwidth(points) -> float:
    """Multivariate Silverman rule with the mean per-coordinate standard deviation."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, d = points.shape
    sigma = float(np.mean(np.std(points, axis=0, ddof=1))) if n > 1 else 1.0
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sigma


@dataclass(frozen=True)
class Kde:
    """Equal-weight isotropic Gaussian kernel density estimate."""

    support_points: np.ndarray
    bandwidth: float
    _sq_norms: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.support_points, dtype=float)).copy()
        if pts.shape[0] < 1:
            raise ValueError("KDE needs at least one support point")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "support_points", pts)
        object.__setattr__(self, "bandwidth", float(self.bandwidth))
        object.__setattr__(self, "_sq_norms", np.sum(pts**2, axis=1))

    @property
    def dim(self) -> int:
        return self.support_points.shape[1]

    @property
    def n_points(self) -> int:
        return self.support_points.shape[0]

    def log_pdf(self, x, chunk: int = 2048):
        x, single = _as_batch(x, self.dim)
        h2 = self.bandwidth**2
        const = -0.5 * self.dim * (LOG_2PI + math.log(h2)) - math.log(self.n_points)
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], chunk):
            xb = x[start:start + chunk]
            sq = np.sum(xb**2, axis=1)[:, None] - 2.0 * xb @ self.support_points.T + self._sq_norms
            np.maximum(sq, 0.0, out=sq)
            out[start:start + chunk] = logsumexp(-0.5 * sq / h2, axis=1)
        out += const
        return float(out[0]) if single else out

    def sample(self, rng: RngStream, n: int) -> np.ndarray:
        idx = rng.integers(0, self.n_points, n)
        return self.support_points[idx] + self.bandwidth * rng.normal((n, self.dim))

    def as_mixture(self) -> Mixture:
        chol = self.bandwidth * np.eye(self.dim)
        comps = tuple(Gaussian(p, chol) for p in self.support_points)
        return Mixture(np.full(self.n_points, -math.log(self.n_points)), comps)


def kde_fit(points, bandwidth: float | str = "silverman") -> Kde:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise ValueError(f"unknown bandwidth rule {bandwidth!r}")
        bandwidth = silverman_bandwidth(points)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    return Kde(points, float(bandwidth))


def kde_log_pdf(k: Kde, x):
    return k.log_pdf(x)


def kde_sample(k: Kde, rng: RngStream, n: int) -> np.ndarray:
    return k.sample(rng, n)
