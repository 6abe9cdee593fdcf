"""Linear noise schedule and the closed-form forward process.

Time steps are 1-indexed, ``t = 1 .. T``. Arrays are stored 0-indexed, so
``beta[t - 1]`` is beta_t; the helpers below hide that offset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from seedshift.numerics import ShapeError


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev_arr: np.ndarray = field(init=False, repr=False)
    beta_tilde: np.ndarray = field(init=False, repr=False)
    log_beta_tilde_clipped: np.ndarray = field(init=False, repr=False)
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ScheduleError("schedule needs at least 1 step")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ScheduleError("every beta_t must lie in [0, 1)")
        beta.setflags(write=False)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if alpha_bar[-1] >= 1.0:
            raise ScheduleError("schedule adds no noise (alpha_bar_T = 1)")
        ab_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            bt = np.where(alpha_bar < 1.0, (1.0 - ab_prev) / (1.0 - alpha_bar) * beta, 0.0)
            # beta~_1 = 0; its log is clipped to beta~_2 (or beta_1 for a one-step chain)
            first = bt[1] if bt.size > 1 else beta[0]
            log_bt = np.log(np.concatenate([[first], bt[1:]]))
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar),
                          ("alpha_bar_prev_arr", ab_prev), ("beta_tilde", bt), ("log_beta_tilde_clipped", log_bt)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def _check(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"time step {t} outside 1..{self.T}")
        return t - 1

    def beta_t(self, t: int) -> float:
        return float(self.beta[self._check(t)])

    def alpha_t(self, t: int) -> float:
        return float(self.alpha[self._check(t)])

    def alpha_bar_t(self, t: int) -> float:
        return float(self.alpha_bar[self._check(t)])

    def alpha_bar_prev(self, t: int) -> float:
        """alpha_bar_{t-1}, with alpha_bar_0 = 1."""
        i = self._check(t)
        return 1.0 if i == 0 else float(self.alpha_bar[i - 1])

    def posterior_variance(self, t: int) -> float:
        """beta~_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t; zero at t = 1."""
        return float(self.beta_tilde[self._check(t)])

    def posterior_log_variance_clipped(self, t: int) -> float:
        # beta~_1 = 0, so t = 1 borrows beta~_2 to keep the log finite
        return float(self.log_beta_tilde_clipped[self._check(t)])

    def posterior_mean_coefs(self, t: int) -> tuple[float, float]:
        """Coefficients ``(c0, ct)`` with mean(q(x_{t-1}|x_t, x_0)) = c0 x_0 + ct x_t."""
        ab, ab_prev = self.alpha_bar_t(t), self.alpha_bar_prev(t)
        c0 = np.sqrt(ab_prev) * self.beta_t(t) / (1.0 - ab)
        ct = np.sqrt(self.alpha_t(t)) * (1.0 - ab_prev) / (1.0 - ab)
        return float(c0), float(ct)

    def as_dict(self) -> dict:
        d = {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}
        if self.beta_start is None:
            d = {"kind": "explicit", "T": self.T, "beta": self.beta.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") == "explicit":
            return cls(np.asarray(d["beta"], dtype=np.float64))
        return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta, beta_start=float(beta_start), beta_end=float(beta_end))


def forward_diffuse(x0: np.ndarray, t: int | np.ndarray, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Sample q(x_t | x_0) as sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps.

    ``t`` may be an integer array with one step per leading-axis row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    if np.ndim(t) == 0:
        ab = sched.alpha_bar_t(int(t))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    t = np.asarray(t)
    if t.shape != x0.shape[:1] or t.min() < 1 or t.max() > sched.T:
        raise ShapeError("per-row time steps must match the leading axis and lie in 1..T")
    ab = sched.alpha_bar[t - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def forward_step(x_prev: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One draw of q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)."""
    b = sched.beta_t(t)
    return np.sqrt(1.0 - b) * x_prev + np.sqrt(b) * eps
