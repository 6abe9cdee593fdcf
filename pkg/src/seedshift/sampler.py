"""Reverse-process samplers: fixed variance and learned variance, with guidance.

All per-step Gaussian draws come from ``rng.child("step", t)``, so two runs
given equally-seeded streams share their noise (common random numbers) and
any difference between them is caused by the seed shift alone.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from seedshift.denoiser import ConfigurationError, DenoiserParams, log_variance, model_mean, predict
from seedshift.numerics import SeededRng, ShapeError
from seedshift.schedule import NoiseSchedule
from seedshift.shifts import SeedShift, apply_shift


class Family(str, enum.Enum):
    FIXED = "fixed_variance"
    LEARNED = "learned_variance"


@dataclass(frozen=True)
class SamplerSpec:
    family: Family = Family.FIXED
    guidance_scale: float = 7.5
    sigma_convention: str = "beta_tilde"
    steps: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.guidance_scale < 0:
            raise ConfigurationError("guidance_scale must be >= 0")
        if self.sigma_convention not in ("beta", "beta_tilde"):
            raise ConfigurationError(f"sigma_convention must be 'beta' or 'beta_tilde', got {self.sigma_convention!r}")

    def check(self, params: DenoiserParams, sched: NoiseSchedule) -> None:
        if self.family is Family.LEARNED and not params.arch.variance_head:
            raise ConfigurationError("learned-variance sampling needs a variance-head checkpoint")
        if self.steps is not None and self.steps != sched.T:
            raise ConfigurationError(f"sampler steps {self.steps} != schedule length {sched.T}")

    def as_dict(self) -> dict:
        return {"family": self.family.value, "guidance_scale": self.guidance_scale,
                "sigma_convention": self.sigma_convention, "steps": self.steps}


@dataclass
class TrajectoryRecord:
    """States ``x_T .. x_0`` stacked on axis 0 and displacements ``d_T .. d_1``."""

    states: np.ndarray
    displacements: np.ndarray
    seed: np.ndarray
    shift: SeedShift
    condition: object = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.states.shape[0] - 1


def guided_prediction(params: DenoiserParams, x_t: np.ndarray, t: int, c, s: float):
    """Guided ``eps_hat`` plus the variance interpolant (from the conditional pass when s > 0)."""
    if s < 0:
        raise ConfigurationError("guidance scale must be >= 0")
    if s == 0 or c is None:
        return predict(params, x_t, t, None)
    eps_c, v_c = predict(params, x_t, t, c)
    if s == 1:
        return eps_c, v_c
    eps_u, _ = predict(params, x_t, t, None)
    return eps_u + s * (eps_c - eps_u), v_c


def guided_eps(params: DenoiserParams, x_t: np.ndarray, t: int, c, s: float) -> np.ndarray:
    """eps_u + s * (eps_c - eps_u)."""
    return guided_prediction(params, x_t, t, c, s)[0]


def fixed_sigma(sched: NoiseSchedule, t: int, convention: str) -> float:
    if t == 1:
        return 0.0
    var = sched.beta_t(t) if convention == "beta" else sched.posterior_variance(t)
    return float(np.sqrt(var))


def fixed_variance_update(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule, sigma: float,
                          z: np.ndarray) -> np.ndarray:
    return model_mean(sched, x_t, t, eps_hat) + sigma * z


def learned_variance_update(x_t: np.ndarray, eps_hat: np.ndarray, v: np.ndarray, t: int, sched: NoiseSchedule,
                            z: np.ndarray) -> np.ndarray:
    mu = model_mean(sched, x_t, t, eps_hat)
    if t == 1:
        return mu
    logvar = log_variance(sched, np.full(np.shape(v)[:1] if np.ndim(v) > 1 else (), t), v)
    return mu + np.exp(0.5 * logvar) * z


def _noise(rng: SeededRng, t: int, shape, repeat: int = 1) -> np.ndarray:
    shape = tuple(shape)
    if repeat == 1:
        return rng.child("step", t).normal(shape)
    block = rng.child("step", t).normal((shape[0] // repeat,) + shape[1:])
    return np.tile(block, (repeat,) + (1,) * (len(shape) - 1))


def _prediction(params, x_t, t, c, s: float, repeat: int):
    if repeat > 1 and (s == 0 or c is None):
        # the label is ignored, so every block holds the same states: evaluate one and tile
        m = np.shape(x_t)[0] // repeat
        eps, v = predict(params, x_t[:m], t, None)
        tile = (repeat,) + (1,) * (np.ndim(x_t) - 1)
        return np.tile(eps, tile), None if v is None else np.tile(v, tile)
    return guided_prediction(params, x_t, t, c, s)


def step_fixed_variance(params, x_t, t, c, spec: SamplerSpec, rng: SeededRng, sched: NoiseSchedule,
                        z: np.ndarray | None = None, repeat: int = 1) -> np.ndarray:
    eps_hat, _ = _prediction(params, x_t, t, c, spec.guidance_scale, repeat)
    sigma = fixed_sigma(sched, t, spec.sigma_convention)
    if z is None:
        z = _noise(rng, t, np.shape(x_t), repeat) if sigma else np.zeros(np.shape(x_t))
    return fixed_variance_update(x_t, eps_hat, t, sched, sigma, z)


def step_learned_variance(params, x_t, t, c, spec: SamplerSpec, rng: SeededRng, sched: NoiseSchedule,
                          z: np.ndarray | None = None, repeat: int = 1) -> np.ndarray:
    if not params.arch.variance_head:
        raise ConfigurationError("learned-variance step needs a variance head")
    eps_hat, v = _prediction(params, x_t, t, c, spec.guidance_scale, repeat)
    if z is None:
        z = _noise(rng, t, np.shape(x_t), repeat) if t > 1 else np.zeros(np.shape(x_t))
    return learned_variance_update(x_t, eps_hat, v, t, sched, z)


def generate(params: DenoiserParams, spec: SamplerSpec, c, seed_z: np.ndarray, shift: SeedShift, rng: SeededRng,
             sched: NoiseSchedule, layout: Sequence[int] | None = None,
             repeat: int = 1) -> tuple[np.ndarray, TrajectoryRecord]:
    """Shift ``seed_z``, run the T reverse steps, and record the whole path.

    ``seed_z`` is a single vector ``(D,)`` or a batch ``(N, D)``; ``c`` is a
    label, an array of labels, or ``None`` for the null condition. With
    ``repeat > 1`` a batch of seeds is shifted once and then tiled ``repeat``
    times along axis 0, and every per-step draw is tiled the same way, so each
    block (typically one per class) sees identical randomness.
    """
    spec.check(params, sched)
    seed_z = np.asarray(seed_z, dtype=np.float64)
    if seed_z.shape[-1] != params.arch.data_dim or seed_z.ndim > 2:
        raise ShapeError(f"seed shape {seed_z.shape} does not match data dim {params.arch.data_dim}")
    if repeat > 1 and seed_z.ndim != 2:
        raise ShapeError("repeat needs a batch of seeds")
    x = apply_shift(seed_z, shift, rng.child("shift"), layout=layout)
    if repeat > 1:
        seed_z = np.tile(seed_z, (repeat, 1))
        x = np.tile(x, (repeat, 1))
    step = step_learned_variance if spec.family is Family.LEARNED else step_fixed_variance
    states = np.empty((sched.T + 1,) + x.shape)
    states[0] = x
    for k, t in enumerate(range(sched.T, 0, -1), start=1):
        x = step(params, x, t, c, spec, rng, sched, repeat=repeat)
        states[k] = x
    disp = np.linalg.norm(np.diff(states, axis=0), axis=-1)
    return x, TrajectoryRecord(states, disp, seed_z, shift, c)


def early_steps_discontinuity(traj: TrajectoryRecord | Sequence[float] | np.ndarray) -> float | np.ndarray:
    """First reverse-step displacement over the median of the later ones.

    Accepts a record or its displacements ``d_T .. d_1`` (axis 0). Returns
    ``inf`` where the median is zero; see :func:`esd_degenerate`.
    """
    d = np.asarray(traj.displacements if isinstance(traj, TrajectoryRecord) else traj, dtype=np.float64)
    if d.shape[0] < 4:
        raise ShapeError("ESD needs T >= 4")
    med = np.median(d[1:], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        esd = np.where(med > 0, d[0] / np.where(med > 0, med, 1.0), np.inf)
    return float(esd) if esd.ndim == 0 else esd


def esd_degenerate(traj: TrajectoryRecord | Sequence[float] | np.ndarray):
    d = np.asarray(traj.displacements if isinstance(traj, TrajectoryRecord) else traj, dtype=np.float64)
    flag = np.median(d[1:], axis=0) == 0
    return bool(flag) if np.ndim(flag) == 0 else flag


def trajectory_divergence(traj_a: TrajectoryRecord, traj_b: TrajectoryRecord) -> np.ndarray:
    """Per-step distance between two paired runs, aligned from t = T down to 0."""
    if traj_a.states.shape != traj_b.states.shape:
        raise ShapeError(f"trajectory shapes differ: {traj_a.states.shape} vs {traj_b.states.shape}")
    return np.linalg.norm(traj_a.states - traj_b.states, axis=-1)
