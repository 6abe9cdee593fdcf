"""Conditional noise-prediction MLP with an optional variance head.

Forward and backward passes are written out by hand in numpy so the
gradients can be checked against finite differences and training stays
bit-reproducible on a given machine.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from seedshift.numerics import SeededRng, ShapeError
from seedshift.schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)

NULL_CLASS = -1
CHECKPOINT_FORMAT = "seedshift-checkpoint"
CHECKPOINT_VERSION = 1


class ConditionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Architecture:
    data_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (128, 128, 128)
    time_dim: int = 32
    class_dim: int = 16
    variance_head: bool = False
    activation: str = "silu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.data_dim < 1 or self.num_classes < 1 or self.time_dim % 2:
            raise ConfigurationError("data_dim, num_classes must be >= 1 and time_dim even")

    @property
    def input_dim(self) -> int:
        return self.data_dim + self.time_dim + self.class_dim

    @property
    def output_dim(self) -> int:
        return self.data_dim * (2 if self.variance_head else 1)

    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class DenoiserParams:
    arch: Architecture
    weights: dict[str, np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.arch.hidden) + 1

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.copy() for k, v in self.weights.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in sorted(self.weights)])

    def with_flat(self, vec: np.ndarray) -> "DenoiserParams":
        out, i = {}, 0
        for k in sorted(self.weights):
            n = self.weights[k].size
            out[k] = np.asarray(vec[i : i + n], dtype=np.float64).reshape(self.weights[k].shape)
            i += n
        return DenoiserParams(self.arch, out)

    @property
    def size(self) -> int:
        return sum(w.size for w in self.weights.values())


def init_params(arch: Architecture, rng: SeededRng) -> DenoiserParams:
    sizes = arch.layer_sizes()
    w: dict[str, np.ndarray] = {"class_emb": rng.child("class_emb").normal((arch.num_classes + 1, arch.class_dim))}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = 1.0 / math.sqrt(fan_in)
        if i == len(sizes) - 2:
            scale *= 0.1  # start near eps_hat = 0, v = 1/2
        w[f"W{i}"] = scale * rng.child("W", i).normal((fan_in, fan_out))
        w[f"b{i}"] = np.zeros(fan_out)
    return DenoiserParams(arch, w)


def zero_params(arch: Architecture) -> DenoiserParams:
    sizes = arch.layer_sizes()
    w = {"class_emb": np.zeros((arch.num_classes + 1, arch.class_dim))}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        w[f"W{i}"] = np.zeros((a, b))
        w[f"b{i}"] = np.zeros(b)
    return DenoiserParams(arch, w)


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu(a):
    s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _as_batch(x: np.ndarray, arch: Architecture) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x.reshape(x.shape[0], -1)
    if x2.shape[1] != arch.data_dim:
        raise ShapeError(f"expected data dim {arch.data_dim}, got shape {x.shape}")
    return x2, single


def class_rows(c, n: int, num_classes: int) -> np.ndarray:
    """Map class labels (``None`` or -1 for the null condition) to embedding rows."""
    if c is None:
        c = NULL_CLASS
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
    bad = (c < NULL_CLASS) | (c >= num_classes)
    if np.any(bad):
        raise ConditionError(f"unknown class index {int(c[bad][0])} (have {num_classes} classes)")
    return c + 1


def _steps(t, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    if np.any(t < 1):
        raise ShapeError("time steps are 1-indexed")
    return t


@dataclass
class _Cache:
    acts: list  # layer inputs
    pre: list  # pre-activations of hidden layers
    sig: list  # sigmoid of hidden pre-activations
    rows: np.ndarray
    out: np.ndarray


def _forward(params: DenoiserParams, x: np.ndarray, t: np.ndarray, rows: np.ndarray) -> _Cache:
    arch, w = params.arch, params.weights
    h = np.concatenate([x, time_embedding(t, arch.time_dim), w["class_emb"][rows]], axis=1)
    acts, pre, sig = [h], [], []
    L = params.n_layers
    for i in range(L - 1):
        a = h @ w[f"W{i}"] + w[f"b{i}"]
        h, s = _silu(a)
        pre.append(a)
        sig.append(s)
        acts.append(h)
    out = h @ w[f"W{L - 1}"] + w[f"b{L - 1}"]
    return _Cache(acts, pre, sig, rows, out)


def _backward(params: DenoiserParams, cache: _Cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    w = params.weights
    L = params.n_layers
    g: dict[str, np.ndarray] = {}
    delta = d_out
    for i in range(L - 1, -1, -1):
        g[f"W{i}"] = cache.acts[i].T @ delta
        g[f"b{i}"] = delta.sum(axis=0)
        d_in = delta @ w[f"W{i}"].T
        if i > 0:
            a, s = cache.pre[i - 1], cache.sig[i - 1]
            delta = d_in * (s * (1.0 + a * (1.0 - s)))
    arch = params.arch
    d_emb = d_in[:, arch.data_dim + arch.time_dim :]
    g_emb = np.zeros_like(w["class_emb"])
    np.add.at(g_emb, cache.rows, d_emb)
    g["class_emb"] = g_emb
    return g


def predict(params: DenoiserParams, x_t: np.ndarray, t, c=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Return ``(eps_hat, v)``; ``v`` is ``None`` without a variance head.

    ``x_t`` is one vector or a batch ``(N, D)``; ``t`` and ``c`` broadcast
    over the batch. ``c=None`` (or -1) selects the null condition.
    """
    arch = params.arch
    x, single = _as_batch(x_t, arch)
    n = x.shape[0]
    cache = _forward(params, x, _steps(t, n), class_rows(c, n, arch.num_classes))
    D = arch.data_dim
    eps = cache.out[:, :D]
    v = _sigmoid(cache.out[:, D:]) if arch.variance_head else None
    if single:
        eps = eps[0]
        v = None if v is None else v[0]
    return eps.reshape(np.shape(x_t)), None if v is None else v.reshape(np.shape(x_t))


# ---------------------------------------------------------------------------
# losses


def log_variance(sched: NoiseSchedule, t: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Interpolate log-variance: v = 1 gives beta_t, v = 0 gives beta~_t (clipped at t = 1)."""
    t = np.asarray(t)
    lb = np.log(sched.beta[t - 1])
    lbt = sched.log_beta_tilde_clipped[t - 1]
    shape = (-1,) + (1,) * (np.ndim(v) - 1)
    lb, lbt = lb.reshape(shape), lbt.reshape(shape)
    return v * lb + (1.0 - v) * lbt


def model_mean(sched: NoiseSchedule, x_t: np.ndarray, t, eps_hat: np.ndarray) -> np.ndarray:
    """mu = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    if np.ndim(t) == 0:
        a, ab = sched.alpha_t(int(t)), sched.alpha_bar_t(int(t))
    else:
        idx = np.asarray(t) - 1
        shape = (-1,) + (1,) * (x_t.ndim - 1)
        a, ab = sched.alpha[idx].reshape(shape), sched.alpha_bar[idx].reshape(shape)
    beta = 1.0 - a
    # beta_t = 0 is a pure identity step even where alpha_bar_t is still 1
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(beta > 0, beta / np.sqrt(1.0 - ab), 0.0)
    return (x_t - coef * eps_hat) / np.sqrt(a)


def gaussian_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats."""
    return 0.5 * (logvar2 - logvar1 + (np.exp(logvar1) + (mean1 - mean2) ** 2) * np.exp(-logvar2) - 1.0)


@dataclass
class Batch:
    x0: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    c: np.ndarray  # class labels, NULL_CLASS for the dropped condition


def _batch_terms(params: DenoiserParams, batch: Batch, sched: NoiseSchedule, hybrid: bool, lambda_vlb: float,
                 with_grad: bool):
    arch = params.arch
    x0, _ = _as_batch(batch.x0, arch)
    eps, _ = _as_batch(batch.eps, arch)
    n = x0.shape[0]
    t = _steps(batch.t, n)
    if t.max() > sched.T:
        raise ShapeError(f"time step beyond schedule length {sched.T}")
    rows = class_rows(batch.c, n, arch.num_classes)
    x_t = forward_diffuse(x0, t, eps, sched)
    cache = _forward(params, x_t, t, rows)
    D = arch.data_dim
    eps_hat = cache.out[:, :D]
    diff = eps_hat - eps
    loss = float(np.sum(diff * diff) / n)
    kl_val = 0.0
    d_out = np.zeros_like(cache.out) if with_grad else None
    if with_grad:
        d_out[:, :D] = 2.0 * diff / n
    if hybrid:
        v = _sigmoid(cache.out[:, D:])
        i = t - 1
        ab, ab_prev = sched.alpha_bar[i][:, None], sched.alpha_bar_prev_arr[i][:, None]
        c0 = np.sqrt(ab_prev) * sched.beta[i][:, None] / (1.0 - ab)
        ct = np.sqrt(sched.alpha[i][:, None]) * (1.0 - ab_prev) / (1.0 - ab)
        true_mean = c0 * x0 + ct * x_t
        true_logvar = sched.log_beta_tilde_clipped[i][:, None]
        # mean is treated as a constant: only the variance head learns from the KL
        mu = model_mean(sched, x_t, t, eps_hat)
        logvar = log_variance(sched, t, v)
        kl = gaussian_kl(true_mean, true_logvar, mu, logvar)
        kl_val = float(np.sum(kl) / n)
        loss += lambda_vlb * kl_val
        if with_grad:
            d_logvar = 0.5 * (1.0 - (np.exp(true_logvar) + (true_mean - mu) ** 2) * np.exp(-logvar))
            lb = np.log(sched.beta[t - 1])[:, None]
            lbt = true_logvar
            d_out[:, D:] = lambda_vlb / n * d_logvar * (lb - lbt) * v * (1.0 - v)
    grads = _backward(params, cache, d_out) if with_grad else None
    return loss, kl_val, grads


def _one(x0, t, eps, c):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim == 1:
        return Batch(x0[None], np.atleast_1d(t), np.asarray(eps, dtype=np.float64)[None], np.atleast_1d(
            NULL_CLASS if c is None else c))
    n = x0.shape[0]
    c = NULL_CLASS if c is None else c
    return Batch(x0, np.broadcast_to(np.asarray(t), (n,)), np.asarray(eps, dtype=np.float64),
                 np.broadcast_to(np.asarray(c), (n,)))


def loss_simple(params: DenoiserParams, x0, t, eps, c, sched: NoiseSchedule) -> float:
    """||eps - eps_hat(x_t, t, c)||^2, averaged over the batch when given one."""
    return _batch_terms(params, _one(x0, t, eps, c), sched, False, 0.0, False)[0]


def loss_hybrid(params: DenoiserParams, x0, t, eps, c, sched: NoiseSchedule, lambda_vlb: float = 1e-3) -> float:
    """Simple loss plus ``lambda_vlb`` times the variance-only KL term."""
    if not params.arch.variance_head:
        raise ConfigurationError("hybrid loss needs a variance head")
    return _batch_terms(params, _one(x0, t, eps, c), sched, True, lambda_vlb, False)[0]


def vlb_term(params: DenoiserParams, x0, t, eps, c, sched: NoiseSchedule) -> float:
    if not params.arch.variance_head:
        raise ConfigurationError("KL term needs a variance head")
    return _batch_terms(params, _one(x0, t, eps, c), sched, True, 1.0, False)[1]


def grad(params: DenoiserParams, batch: Batch, sched: NoiseSchedule, loss: str = "simple",
         lambda_vlb: float = 1e-3) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and exact gradients with respect to every weight array."""
    if loss not in ("simple", "hybrid"):
        raise ConfigurationError(f"unknown loss variant {loss!r}")
    hybrid = loss == "hybrid"
    if hybrid and not params.arch.variance_head:
        raise ConfigurationError("hybrid loss needs a variance head")
    value, _, g = _batch_terms(params, batch, sched, hybrid, lambda_vlb, True)
    return value, g


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 256
    steps: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    p_uncond: float = 0.1
    loss: str = "simple"
    lambda_vlb: float = 1e-3
    checkpoint_every: int = 0
    eval_batch: int = 2048

    def __post_init__(self):
        if not 0.0 <= self.p_uncond <= 0.5:
            raise ConfigurationError(f"p_uncond must be in [0, 0.5], got {self.p_uncond}")
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigurationError("learning_rate must be >= 0, batch_size >= 1, steps >= 0")
        if self.loss not in ("simple", "hybrid"):
            raise ConfigurationError(f"loss must be 'simple' or 'hybrid', got {self.loss!r}")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list[float] = field(default_factory=list)
    initial_eval_loss: float = float("nan")
    final_eval_loss: float = float("nan")


def make_batch(dataset, n: int, sched: NoiseSchedule, rng: SeededRng, p_uncond: float) -> Batch:
    x0, c = dataset.sample(n, rng.child("data"))
    t = rng.child("t").integers(1, sched.T + 1, size=n)
    eps = rng.child("eps").normal((n, x0.shape[1]))
    drop = rng.child("drop").uniform((n,)) < p_uncond
    c = np.where(drop, NULL_CLASS, c)
    return Batch(x0, t, eps, c)


def train(dataset, config: TrainConfig, rng: SeededRng, sched: NoiseSchedule, arch: Architecture | None = None,
          params: DenoiserParams | None = None,
          on_checkpoint: Callable[[int, DenoiserParams], None] | None = None) -> TrainResult:
    """Adam on the selected loss with null-condition dropout."""
    if arch is None:
        arch = Architecture(dataset.dim, dataset.num_classes, variance_head=config.loss == "hybrid")
    if config.loss == "hybrid" and not arch.variance_head:
        raise ConfigurationError("hybrid loss needs a variance head")
    params = init_params(arch, rng.child("init")) if params is None else params.copy()
    eval_batch = make_batch(dataset, config.eval_batch, sched, rng.child("eval"), 0.0)

    def eval_loss(p):
        return _batch_terms(p, eval_batch, sched, config.loss == "hybrid", config.lambda_vlb, False)[0]

    result = TrainResult(params, initial_eval_loss=eval_loss(params))
    m = {k: np.zeros_like(v) for k, v in params.weights.items()}
    s = {k: np.zeros_like(v) for k, v in params.weights.items()}
    b1, b2 = config.beta1, config.beta2
    for step in range(1, config.steps + 1):
        batch = make_batch(dataset, config.batch_size, sched, rng.child("step", step), config.p_uncond)
        value, g = grad(params, batch, sched, config.loss, config.lambda_vlb)
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        result.losses.append(value)
        if config.learning_rate == 0.0:
            continue
        lr_t = config.learning_rate * math.sqrt(1.0 - b2**step) / (1.0 - b1**step)
        for k, w in params.weights.items():
            m[k] = b1 * m[k] + (1.0 - b1) * g[k]
            s[k] = b2 * s[k] + (1.0 - b2) * g[k] * g[k]
            w -= lr_t * m[k] / (np.sqrt(s[k]) + config.adam_eps)
        if config.checkpoint_every and step % config.checkpoint_every == 0 and on_checkpoint:
            on_checkpoint(step, params)
        if step % 500 == 0:
            log.info("step %d loss %.4f", step, value)
    result.final_eval_loss = eval_loss(params)
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: DenoiserParams, sched: NoiseSchedule, config: TrainConfig | None = None,
                    extra: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": params.arch.as_dict(),
        "architecture_hash": params.arch.hash(),
        "schedule": sched.as_dict(),
        "train_config": None if config is None else config.as_dict(),
        "extra": extra or {},
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in sorted(params.weights.items())},
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=True))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[DenoiserParams, NoiseSchedule, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    ad = doc["architecture"]
    arch = Architecture(**{**ad, "hidden": tuple(ad["hidden"])})
    if arch.hash() != doc["architecture_hash"]:
        raise CheckpointError(f"{path}: architecture hash mismatch ({arch.hash()} != {doc['architecture_hash']})")
    weights = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["weights"].items()}
    expected = zero_params(arch).weights
    if set(weights) != set(expected) or any(weights[k].shape != expected[k].shape for k in expected):
        raise CheckpointError(f"{path}: weights do not match the recorded architecture")
    return DenoiserParams(arch, weights), NoiseSchedule.from_dict(doc["schedule"]), doc
