"""Feedforward log-density-ratio estimators trained by weighted binary cross-entropy.

The network is a plain numpy MLP with hand-written backpropagation so that
the reward stack built from it stays a cheap, pure function after training.
Hidden layers are ``linear -> [batch norm] -> leaky ReLU -> [dropout]``; the
output is a single linear logit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .prob import RngStream

LEAKY_SLOPE = 0.01
BN_EPS = 1e-3
BN_MOMENTUM = 0.99
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class MlpConfig:
    """Discriminator architecture and training hyperparameters.

    ``layers`` counts hidden layers. ``epochs``, ``batch_size`` and
    ``warm_start`` are training-loop settings, not architecture.
    ``warm_start=None`` selects the method default: a fresh network per
    V-IRL iteration, a persistent one for EIM.
    """

    layers: int = 2
    layer_size: int = 64
    batch_norm: bool = False
    learning_rate: float = 1e-3
    dropout: float = 0.0
    l2: float = 0.0
    epochs: int = 10
    batch_size: int = 256
    warm_start: str | None = None

    def __post_init__(self):
        if not 2 <= self.layers <= 4:
            raise ValueError(f"layers must be in [2, 4], got {self.layers}")
        if self.layer_size not in [2**k for k in range(3, 9)]:
            raise ValueError(f"layer_size must be a power of two in [8, 256], got {self.layer_size}")
        if not 5e-5 <= self.learning_rate <= 1e-3 and self.learning_rate != 0.0:
            raise ValueError(f"learning_rate must be in [5e-5, 1e-3], got {self.learning_rate}")
        if not 0.0 <= self.dropout <= 0.5:
            raise ValueError(f"dropout must be in [0, 0.5], got {self.dropout}")
        if not 0.0 <= self.l2 <= 1.0:
            raise ValueError(f"l2 must be in [0, 1], got {self.l2}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.warm_start not in (None, "fresh", "reuse"):
            raise ValueError("warm_start must be 'fresh', 'reuse' or unset")


@dataclass
class WeightedBatch:
    """Positives (uniform weight) against importance-weighted negatives.

    ``negative_weights`` are normalized on construction. ``negative_scale``
    multiplies the whole negative term; minibatches use it to keep the
    full-data loss unbiased. Offsets are added to the network output before
    the sigmoid.
    """

    positives: np.ndarray
    negatives: np.ndarray
    negative_weights: np.ndarray | None = None
    negative_scale: float = 1.0
    positive_offsets: np.ndarray | None = None
    negative_offsets: np.ndarray | None = None

    def __post_init__(self):
        self.positives = np.atleast_2d(np.asarray(self.positives, dtype=float))
        self.negatives = np.atleast_2d(np.asarray(self.negatives, dtype=float))
        n_pos, n_neg = len(self.positives), len(self.negatives)
        if n_pos == 0 or n_neg == 0:
            raise ValueError("weighted batch needs positives and negatives")
        if self.negative_weights is None:
            w = np.full(n_neg, 1.0 / n_neg)
        else:
            w = np.asarray(self.negative_weights, dtype=float)
            if w.shape != (n_neg,) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("negative weights must be finite, non-negative, one per negative")
            total = w.sum()
            if total <= 0:
                raise ValueError("degenerate importance weights")
            w = w / total
        self.negative_weights = w
        self.positive_offsets = _offsets(self.positive_offsets, n_pos)
        self.negative_offsets = _offsets(self.negative_offsets, n_neg)


def _offsets(values, n):
    if values is None:
        return np.zeros(n)
    values = np.asarray(values, dtype=float)
    if values.shape != (n,):
        raise ValueError("offsets need one value per sample")
    return values


class Discriminator:
    """MLP whose scalar output is the logit of a binary classifier."""

    def __init__(self, dim: int, config: MlpConfig | None = None, rng: RngStream | None = None):
        self.dim = int(dim)
        self.config = config or MlpConfig()
        rng = rng or RngStream(0)
        cfg = self.config
        sizes = [self.dim] + [cfg.layer_size] * cfg.layers
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        # Zero output layer: a fresh discriminator is the zero log-ratio.
        self.weights.append(np.zeros((sizes[-1], 1)))
        self.biases.append(np.zeros(1))
        n_hidden = cfg.layers
        if cfg.batch_norm:
            self.gammas = [np.ones(cfg.layer_size) for _ in range(n_hidden)]
            self.betas = [np.zeros(cfg.layer_size) for _ in range(n_hidden)]
            self.running_mean = [np.zeros(cfg.layer_size) for _ in range(n_hidden)]
            self.running_var = [np.ones(cfg.layer_size) for _ in range(n_hidden)]
        else:
            self.gammas = self.betas = self.running_mean = self.running_var = []
        self.training = True
        self.loss_trace: list[float] = []
        self._reset_optimizer()

    def _reset_optimizer(self):
        self._adam_m = [np.zeros_like(p) for p in self.parameters()]
        self._adam_v = [np.zeros_like(p) for p in self.parameters()]
        self._adam_t = 0

    def train(self) -> "Discriminator":
        self.training = True
        return self

    def eval(self) -> "Discriminator":
        self.training = False
        return self

    def copy(self) -> "Discriminator":
        return copy.deepcopy(self)

    def with_zero_head(self) -> "Discriminator":
        """Copy with the hidden layers kept, the output layer zeroed and optimizer state reset."""
        out = self.copy()
        out.weights[-1] = np.zeros_like(out.weights[-1])
        out.biases[-1] = np.zeros_like(out.biases[-1])
        out._reset_optimizer()
        out.loss_trace = []
        return out.train()

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: per hidden layer W, b[, gamma, beta]; then output W, b."""
        params = []
        for i in range(self.config.layers):
            params += [self.weights[i], self.biases[i]]
            if self.config.batch_norm:
                params += [self.gammas[i], self.betas[i]]
        return params + [self.weights[-1], self.biases[-1]]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat(self, flat) -> None:
        offset = 0
        for p in self.parameters():
            p[...] = np.reshape(flat[offset:offset + p.size], p.shape)
            offset += p.size

    def _forward(self, x, rng: RngStream | None = None, update_stats: bool = False):
        cfg = self.config
        h = x
        cache = []
        for i in range(cfg.layers):
            a = h @ self.weights[i] + self.biases[i]
            entry = {"input": h}
            if cfg.batch_norm:
                if self.training:
                    mean, var = a.mean(axis=0), a.var(axis=0)
                    if update_stats:
                        self.running_mean[i] = BN_MOMENTUM * self.running_mean[i] + (1 - BN_MOMENTUM) * mean
                        self.running_var[i] = BN_MOMENTUM * self.running_var[i] + (1 - BN_MOMENTUM) * var
                else:
                    mean, var = self.running_mean[i], self.running_var[i]
                inv_std = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (a - mean) * inv_std
                z = self.gammas[i] * xhat + self.betas[i]
                entry.update(xhat=xhat, inv_std=inv_std)
            else:
                z = a
            g = np.where(z > 0, z, LEAKY_SLOPE * z)
            entry["z"] = z
            if self.training and cfg.dropout > 0 and rng is not None:
                keep = 1.0 - cfg.dropout
                mask = (rng.uniform(size=g.shape) < keep) / keep
                g = g * mask
                entry["mask"] = mask
            cache.append(entry)
            h = g
        out = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return out, (cache, h)

    def _backward(self, caches, dout) -> list[np.ndarray]:
        cfg = self.config
        cache, h_last = caches
        grads_out = [h_last.T @ dout[:, None], np.array([dout.sum()])]
        dh = dout[:, None] @ self.weights[-1].T
        layer_grads = []
        for i in reversed(range(cfg.layers)):
            entry = cache[i]
            if "mask" in entry:
                dh = dh * entry["mask"]
            dz = np.where(entry["z"] > 0, dh, LEAKY_SLOPE * dh)
            grads = []
            if cfg.batch_norm:
                xhat, inv_std = entry["xhat"], entry["inv_std"]
                dgamma = np.sum(dz * xhat, axis=0)
                dbeta = np.sum(dz, axis=0)
                n = dz.shape[0]
                if self.training:
                    da = (self.gammas[i] * inv_std / n) * (n * dz - dbeta - xhat * dgamma)
                else:
                    da = dz * self.gammas[i] * inv_std
                grads = [dgamma, dbeta]
            else:
                da = dz
            dW = entry["input"].T @ da
            db = da.sum(axis=0)
            layer_grads.append([dW, db] + grads)
            dh = da @ self.weights[i].T
        flat = []
        for g in reversed(layer_grads):
            flat += g
        return flat + grads_out

    def __call__(self, x, rng: RngStream | None = None) -> np.ndarray:
        return forward_logit(self, x, rng)

    def to_parts(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {}
        for i in range(self.config.layers):
            arrays[f"W{i}"] = self.weights[i]
            arrays[f"b{i}"] = self.biases[i]
            if self.config.batch_norm:
                arrays[f"gamma{i}"] = self.gammas[i]
                arrays[f"beta{i}"] = self.betas[i]
                arrays[f"running_mean{i}"] = self.running_mean[i]
                arrays[f"running_var{i}"] = self.running_var[i]
        arrays["W_out"] = self.weights[-1]
        arrays["b_out"] = self.biases[-1]
        meta = {"dim": self.dim, "config": asdict(self.config), "training": self.training}
        return meta, arrays

    def to_bytes(self) -> bytes:
        return container.pack("discriminator", *self.to_parts())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Discriminator":
        meta, arrays = container.unpack(blob, "discriminator")
        return cls.from_parts(meta, arrays)

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict) -> "Discriminator":
        disc = cls(meta["dim"], MlpConfig(**meta["config"]))
        for i in range(disc.config.layers):
            disc.weights[i] = arrays[f"W{i}"]
            disc.biases[i] = arrays[f"b{i}"]
            if disc.config.batch_norm:
                disc.gammas[i] = arrays[f"gamma{i}"]
                disc.betas[i] = arrays[f"beta{i}"]
                disc.running_mean[i] = arrays[f"running_mean{i}"]
                disc.running_var[i] = arrays[f"running_var{i}"]
        disc.weights[-1] = arrays["W_out"]
        disc.biases[-1] = arrays["b_out"]
        disc.training = bool(meta.get("training", False))
        disc._reset_optimizer()
        return disc


def forward_logit(disc: Discriminator, x, rng: RngStream | None = None):
    """Raw logit; a float for a single point, an array for a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != disc.dim:
        raise ValueError(f"expected inputs of dimension {disc.dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite discriminator input")
    out, _ = disc._forward(x, rng)
    return float(out[0]) if single else out


def _loss_terms(disc: Discriminator, batch: WeightedBatch, rng, update_stats=False):
    n_pos = len(batch.positives)
    x = np.concatenate([batch.positives, batch.negatives], axis=0)
    raw, cache = disc._forward(x, rng, update_stats=update_stats)
    f = raw + np.concatenate([batch.positive_offsets, batch.negative_offsets])
    coef = np.concatenate([np.full(n_pos, 1.0 / n_pos), batch.negative_scale * batch.negative_weights])
    label = np.concatenate([np.ones(n_pos), np.zeros(len(batch.negatives))])
    # softplus(-f) for positives, softplus(f) for negatives
    per_sample = np.logaddexp(0.0, np.where(label > 0, -f, f))
    loss = float(coef @ per_sample)
    if disc.config.l2 > 0:
        loss += disc.config.l2 * sum(float(np.sum(W * W)) for W in disc.weights)
    sig = 0.5 * (1.0 + np.tanh(0.5 * f))
    return loss, cache, coef * (sig - label)


def weighted_bce_loss(disc: Discriminator, batch: WeightedBatch, rng: RngStream | None = None) -> float:
    """Mean positive ``-log sigmoid(f)`` plus weighted negative ``-log(1 - sigmoid(f))`` plus L2."""
    loss, _, _ = _loss_terms(disc, batch, rng)
    return loss


def loss_and_grad(disc: Discriminator, batch: WeightedBatch, rng: RngStream | None = None,
                  update_stats: bool = False) -> tuple[float, list[np.ndarray]]:
    loss, cache, dout = _loss_terms(disc, batch, rng, update_stats)
    grads = disc._backward(cache, dout)
    if disc.config.l2 > 0:
        w_ids = {id(W) for W in disc.weights}
        grads = [g + 2.0 * disc.config.l2 * p if id(p) in w_ids else g
                 for g, p in zip(grads, disc.parameters())]
    return loss, grads


def train_step(disc: Discriminator, batch: WeightedBatch, rng: RngStream | None = None) -> float:
    """One Adam step on the weighted BCE loss; returns the pre-step loss."""
    if not disc.training:
        raise RuntimeError("train_step needs a discriminator in train mode")
    loss, grads = loss_and_grad(disc, batch, rng, update_stats=True)
    params = disc.parameters()
    for idx, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            norm = float(np.linalg.norm(np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)))
            raise FloatingPointError(f"non-finite gradient in parameter {idx} "
                                     f"(layer {_layer_of(disc, idx)}), finite-part norm {norm:.3g}")
    lr = disc.config.learning_rate
    if lr == 0.0:
        return loss
    b1, b2 = ADAM_BETAS
    disc._adam_t += 1
    t = disc._adam_t
    step = lr * math.sqrt(1 - b2**t) / (1 - b1**t)
    for p, g, m, v in zip(params, grads, disc._adam_m, disc._adam_v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= step * m / (np.sqrt(v) + ADAM_EPS)
    return loss


def _layer_of(disc: Discriminator, param_index: int) -> int:
    per_layer = 4 if disc.config.batch_norm else 2
    return min(param_index // per_layer, disc.config.layers)


def fit(disc: Discriminator, expert, negatives, neg_weights=None, epochs: int | None = None,
        batch_size: int | None = None, rng: RngStream | None = None,
        positive_offsets=None, negative_offsets=None) -> Discriminator:
    """Minibatch training of ``disc`` to separate ``expert`` from weighted ``negatives``.

    Each epoch walks both sets in a fresh random order, paired into the same
    number of minibatches. A negative minibatch keeps its weights
    renormalized, with ``negative_scale`` restoring its share of the total
    weight so minibatch losses are unbiased for the full loss. On exit the
    network is switched to eval mode; with batch norm, running statistics
    are replaced by population statistics over all training inputs.
    """
    cfg = disc.config
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    rng = rng or RngStream(0)
    full = WeightedBatch(expert, negatives, neg_weights, 1.0, positive_offsets, negative_offsets)
    n_pos, n_neg = len(full.positives), len(full.negatives)
    n_batches = max(1, -(-n_pos // batch_size))
    disc.train()
    disc.loss_trace = []
    for _ in range(epochs):
        pos_order = rng.permutation(n_pos)
        neg_order = rng.permutation(n_neg)
        pos_split = np.array_split(pos_order, n_batches)
        neg_split = np.array_split(neg_order, n_batches)
        losses = []
        for pi, ni in zip(pos_split, neg_split):
            if len(pi) == 0 or len(ni) == 0:
                continue
            w = full.negative_weights[ni]
            mass = float(w.sum())
            if mass > 0:
                scale = mass * n_neg / len(ni)
            else:
                w, scale = np.ones(len(ni)), 0.0
            batch = WeightedBatch(full.positives[pi], full.negatives[ni], w, scale,
                                  full.positive_offsets[pi], full.negative_offsets[ni])
            losses.append(train_step(disc, batch, rng))
        disc.loss_trace.append(float(np.mean(losses)))
    if cfg.batch_norm:
        _freeze_batch_norm(disc, np.concatenate([full.positives, full.negatives], axis=0))
    return disc.eval()


def _freeze_batch_norm(disc: Discriminator, x: np.ndarray) -> None:
    h = x
    for i in range(disc.config.layers):
        a = h @ disc.weights[i] + disc.biases[i]
        disc.running_mean[i] = a.mean(axis=0)
        disc.running_var[i] = a.var(axis=0)
        z = disc.gammas[i] * (a - disc.running_mean[i]) / np.sqrt(disc.running_var[i] + BN_EPS) + disc.betas[i]
        h = np.where(z > 0, z, LEAKY_SLOPE * z)
