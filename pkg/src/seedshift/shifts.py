"""Synthetic seed-vector shifts and their overlap with the standard normal."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from seedshift.numerics import SeededRng, ShapeError, normal_pdf


class ShiftKind(str, enum.Enum):
    RANDOM = "random"
    MEAN = "mean"
    STDDEV = "stddev"
    MIXED = "mixed"
    ARRANGEMENT = "arrangement"


class DegenerateScaleError(ValueError):
    pass


class QuadratureError(ArithmeticError):
    def __init__(self, message: str, achieved: float):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


_RELEVANT = {
    ShiftKind.RANDOM: {"eta_r"},
    ShiftKind.MEAN: {"eta_m"},
    ShiftKind.STDDEV: {"eta_s"},
    ShiftKind.MIXED: {"eta_s", "eta_m"},
    ShiftKind.ARRANGEMENT: {"eta_a"},
}


@dataclass(frozen=True)
class SeedShift:
    kind: ShiftKind
    eta_r: float = 0.0
    eta_m: float = 0.0
    eta_s: float = 0.0
    eta_a: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShiftKind(self.kind))
        for name in ("eta_r", "eta_m", "eta_s", "eta_a"):
            if name not in _RELEVANT[self.kind] and getattr(self, name) != 0:
                raise ValueError(f"{name} is not a parameter of a {self.kind.value} shift")
        if not isinstance(self.eta_a, (int, np.integer)) or self.eta_a < 0:
            raise ValueError(f"eta_a must be a nonnegative integer, got {self.eta_a!r}")
        object.__setattr__(self, "eta_a", int(self.eta_a))
        if self.eta_s <= -1.0:
            raise DegenerateScaleError(f"eta_s must exceed -1, got {self.eta_s}")

    @classmethod
    def random(cls, eta_r: float) -> "SeedShift":
        return cls(ShiftKind.RANDOM, eta_r=eta_r)

    @classmethod
    def mean(cls, eta_m: float) -> "SeedShift":
        return cls(ShiftKind.MEAN, eta_m=eta_m)

    @classmethod
    def stddev(cls, eta_s: float) -> "SeedShift":
        return cls(ShiftKind.STDDEV, eta_s=eta_s)

    @classmethod
    def mixed(cls, eta_s: float, eta_m: float) -> "SeedShift":
        return cls(ShiftKind.MIXED, eta_s=eta_s, eta_m=eta_m)

    @classmethod
    def arrangement(cls, eta_a: int) -> "SeedShift":
        return cls(ShiftKind.ARRANGEMENT, eta_a=eta_a)

    @classmethod
    def identity(cls) -> "SeedShift":
        return cls(ShiftKind.MEAN)

    @property
    def is_identity(self) -> bool:
        return self.eta_r == 0 and self.eta_m == 0 and self.eta_s == 0 and self.eta_a <= 1

    @property
    def scale(self) -> float | tuple[float, float]:
        """The value this shift is plotted against on its sweep axis."""
        if self.kind is ShiftKind.MIXED:
            return (self.eta_s, self.eta_m)
        return {
            ShiftKind.RANDOM: self.eta_r,
            ShiftKind.MEAN: self.eta_m,
            ShiftKind.STDDEV: self.eta_s,
            ShiftKind.ARRANGEMENT: float(self.eta_a),
        }[self.kind]

    @property
    def magnitude(self) -> float:
        if self.kind is ShiftKind.MIXED:
            return abs(self.eta_s) + abs(self.eta_m)
        return abs(float(self.scale))

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "eta_r": self.eta_r, "eta_m": self.eta_m,
                "eta_s": self.eta_s, "eta_a": self.eta_a}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedShift":
        return cls(ShiftKind(d["kind"]), eta_r=float(d.get("eta_r", 0.0)), eta_m=float(d.get("eta_m", 0.0)),
                   eta_s=float(d.get("eta_s", 0.0)), eta_a=int(d.get("eta_a", 0)))


def arrange(z: np.ndarray, eta_a: int) -> np.ndarray:
    """Sort the upper-left ``eta_a x eta_a`` block of every channel, ascending, row-major.

    The last two axes are spatial; all leading axes (batch, channel) are
    handled independently.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 2:
        raise ShapeError(f"arrangement needs >= 2 spatial dims, got shape {z.shape}")
    h, w = z.shape[-2:]
    if eta_a > h or eta_a > w:
        raise ShapeError(f"eta_a={eta_a} exceeds spatial dims {h}x{w}")
    out = z.copy()
    if eta_a <= 1:
        return out
    lead = z.shape[:-2]
    block = out[..., :eta_a, :eta_a].reshape(lead + (eta_a * eta_a,))
    out[..., :eta_a, :eta_a] = np.sort(block, axis=-1).reshape(lead + (eta_a, eta_a))
    return out


def apply_shift(z: np.ndarray, shift: SeedShift, rng: SeededRng | None = None,
                layout: Sequence[int] | None = None) -> np.ndarray:
    """Return the shifted seed ``z~`` for ``shift``.

    ``layout`` gives the per-sample ``(C, H, W)`` view used by the arrangement
    shift when ``z`` is stored flat, e.g. a batch of vectors of shape ``(N, D)``.
    ``rng`` is only consumed by the random shift.
    """
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("seed contains non-finite values")
    kind = shift.kind
    if kind is ShiftKind.RANDOM:
        if shift.eta_r == 0:
            return z.copy()
        if rng is None:
            raise ValueError("random shift requires an rng")
        return z + shift.eta_r * rng.uniform(z.shape)
    if kind is ShiftKind.MEAN:
        return z + shift.eta_m
    if kind is ShiftKind.STDDEV:
        return (1.0 + shift.eta_s) * z
    if kind is ShiftKind.MIXED:
        return (1.0 + shift.eta_s) * z + shift.eta_m
    if layout is None:
        return arrange(z, shift.eta_a)
    layout = tuple(layout)
    n_el = math.prod(layout)
    if z.size % n_el:
        raise ShapeError(f"seed of shape {z.shape} cannot be viewed with layout {layout}")
    view = z.reshape((-1,) + layout)
    return arrange(view, shift.eta_a).reshape(z.shape)


# ---------------------------------------------------------------------------
# overlap with N(0, 1)


@dataclass(frozen=True)
class OverlapReport:
    shift: SeedShift
    overlap_fraction: float
    method: str  # "closed_form" | "quadrature"
    error_estimate: float = 0.0


def _phi_lower(x: float) -> float:
    # Phi(-x) for x >= 0 without cancellation
    return 0.5 * math.erfc(x / math.sqrt(2.0))


def _stddev_overlap(sigma: float) -> float:
    if sigma == 1.0:
        return 1.0
    x_star = math.sqrt(2.0 * sigma**2 * math.log(sigma) / (sigma**2 - 1.0))
    wide, narrow = max(sigma, 1.0), min(sigma, 1.0)
    # wider density is the minimum inside the crossings, narrower one outside
    return (1.0 - 2.0 * _phi_lower(x_star / wide)) + 2.0 * _phi_lower(x_star / narrow)


def overlap_closed_form(shift: SeedShift) -> OverlapReport:
    kind = shift.kind
    if kind is ShiftKind.MEAN:
        value = 2.0 * _phi_lower(abs(shift.eta_m) / 2.0)
    elif kind is ShiftKind.RANDOM:
        # uniform offset treated as its mean, eta_r / 2
        value = 2.0 * _phi_lower(abs(shift.eta_r) / 4.0)
    elif kind is ShiftKind.STDDEV:
        value = _stddev_overlap(1.0 + shift.eta_s)
    elif kind is ShiftKind.ARRANGEMENT:
        value = 1.0
    else:
        raise ValueError("mixed shifts have no closed form here; use overlap_quadrature")
    return OverlapReport(shift, value, "closed_form")


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)
_GL_NODES_HI, _GL_WEIGHTS_HI = np.polynomial.legendre.leggauss(21)


def _gl(f: Callable, a: float, b: float, nodes, weights) -> float:
    half = 0.5 * (b - a)
    return half * float(np.dot(weights, f(half * nodes + 0.5 * (a + b))))


def integrate(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, tol: float = 1e-10,
              max_intervals: int = 20000) -> tuple[float, float]:
    """Adaptive Gauss-Legendre integration; returns ``(value, error_estimate)``.

    Intervals are bisected until the 10- and 21-point rules agree to within
    their share of ``tol``.
    """
    total, err_total = 0.0, 0.0
    stack = [(a, b)]
    n = 0
    while stack:
        lo, hi = stack.pop()
        n += 1
        coarse = _gl(f, lo, hi, _GL_NODES, _GL_WEIGHTS)
        fine = _gl(f, lo, hi, _GL_NODES_HI, _GL_WEIGHTS_HI)
        err = abs(fine - coarse)
        if err <= tol * (hi - lo) / (b - a) or hi - lo < 1e-9:
            total += fine
            err_total += err
        else:
            if n > max_intervals:
                raise QuadratureError("adaptive quadrature did not converge", err_total + err)
            mid = 0.5 * (lo + hi)
            stack.append((mid, hi))
            stack.append((lo, mid))
    return total, err_total


QUAD_LIMIT = 12.0


def _shifted_params(shift: SeedShift) -> tuple[float, float]:
    kind = shift.kind
    if kind is ShiftKind.MEAN:
        return shift.eta_m, 1.0
    if kind is ShiftKind.RANDOM:
        return shift.eta_r / 2.0, 1.0
    if kind is ShiftKind.STDDEV:
        return 0.0, 1.0 + shift.eta_s
    if kind is ShiftKind.MIXED:
        return shift.eta_m, 1.0 + shift.eta_s
    raise ValueError("arrangement shifts do not change the element distribution")


def overlap_quadrature(shift: SeedShift, tol: float = 1e-6) -> OverlapReport:
    """Numerically integrate ``min(p, q)`` over [-12, 12]."""
    mu, sigma = _shifted_params(shift)

    def integrand(x):
        return np.minimum(normal_pdf(x), normal_pdf((x - mu) / sigma) / sigma)

    value, err = integrate(integrand, -QUAD_LIMIT, QUAD_LIMIT, tol=tol * 1e-3)
    if err > tol:
        raise QuadratureError("overlap quadrature exceeded tolerance", err)
    return OverlapReport(shift, value, "quadrature", err)


def random_shift_density(x: np.ndarray, eta_r: float) -> np.ndarray:
    """Exact density of ``z + eta_r * U[0, 1]`` with ``z ~ N(0, 1)``."""
    if eta_r == 0:
        return normal_pdf(x)
    lo, hi = (x - eta_r, x) if eta_r > 0 else (x, x - eta_r)
    return (ndtr(hi) - ndtr(lo)) / abs(eta_r)


def overlap_random_convolved(eta_r: float, tol: float = 1e-6) -> float:
    """Overlap of N(0, 1) with the exact normal-uniform convolution."""
    value, err = integrate(lambda x: np.minimum(normal_pdf(x), random_shift_density(x, eta_r)),
                           -QUAD_LIMIT, QUAD_LIMIT, tol=tol * 1e-3)
    if err > tol:
        raise QuadratureError("convolved overlap exceeded tolerance", err)
    return value


def overlap_row(shift: SeedShift) -> dict:
    """One row of the overlap table; missing methods are ``None``."""
    closed = quad = conv = None
    if shift.kind is not ShiftKind.MIXED:
        closed = overlap_closed_form(shift).overlap_fraction
    if shift.kind is not ShiftKind.ARRANGEMENT:
        quad = overlap_quadrature(shift).overlap_fraction
    if shift.kind is ShiftKind.RANDOM:
        conv = overlap_random_convolved(shift.eta_r)
    return {**shift.as_dict(), "overlap_closed_form": closed, "overlap_quadrature": quad,
            "overlap_random_convolved": conv}


# Scale grids of the reliability table; the overlap table uses the same cells.
RANDOM_SCALES = (-0.30, -0.20, -0.15, -0.10, -0.05, 0.00, 0.05, 0.10, 0.15, 0.20, 0.30)
MEAN_SCALES = (-0.20, -0.15, -0.10, -0.05, 0.00, 0.05, 0.10, 0.15, 0.20)
STDDEV_SCALES = (-0.30, -0.20, -0.10, 0.00, 0.10, 0.20, 0.30)
MIXED_PAIRS = ((-0.30, -0.15), (-0.20, -0.10), (-0.10, -0.05), (0.00, 0.00),
               (0.10, 0.05), (0.20, 0.10), (0.30, 0.15))
ARRANGEMENT_SIDES = (0, 8, 16, 32, 64)


def default_grid(arrangement_sides: Sequence[int] = ARRANGEMENT_SIDES) -> list[SeedShift]:
    grid = [SeedShift.random(e) for e in RANDOM_SCALES]
    grid += [SeedShift.mean(e) for e in MEAN_SCALES]
    grid += [SeedShift.stddev(e) for e in STDDEV_SCALES]
    grid += [SeedShift.mixed(s, m) for s, m in MIXED_PAIRS]
    grid += [SeedShift.arrangement(a) for a in arrangement_sides]
    return grid
