"""Seeded randomness, Gaussian special functions and PCA projection.

Tensors are plain ``numpy.ndarray`` values in float64, row-major (C order).
"""
from __future__ import annotations

import hashlib
import math
from typing import Hashable, Sequence

import numpy as np

# Bump when the generator or the normal transform changes; recorded in manifests.
RNG_ALGORITHM = f"numpy-PCG64/SeedSequence/ziggurat-normal/v1 (numpy {np.__version__.split('.')[0]}.x)"


class ShapeError(ValueError):
    """Raised for empty, mismatched or otherwise invalid tensor shapes."""


class DegenerateProjectionError(ValueError):
    """Raised when a point set has rank < 2 and cannot be projected to 2-D."""


def _label_words(label: Hashable) -> list[int]:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=16).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


class SeededRng:
    """Single-owner random stream built on PCG64 seeded through ``SeedSequence``.

    Child streams are a pure function of ``(seed, label path)`` and never touch the
    parent's state, so work split across cells or processes does not depend on the
    order in which children are created.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.path = tuple(_path)
        key = [w for label in self.path for w in _label_words(label)]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def child(self, *labels: Hashable) -> "SeededRng":
        return SeededRng(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape: Sequence[int]) -> np.ndarray:
        return sample_standard_normal(self, shape)

    def uniform(self, shape: Sequence[int]) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, path={self.path!r})"


def sample_standard_normal(rng: SeededRng, shape: Sequence[int]) -> np.ndarray:
    """I.i.d. N(0, 1) draws using numpy's ziggurat transform over PCG64."""
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ShapeError(f"shape must be nonempty with all dims >= 1, got {shape}")
    return rng.generator.standard_normal(shape)


def normal_cdf(x: float) -> float:
    """Standard normal CDF via the complementary error function.

    ``erfc`` keeps full relative precision in the lower tail, which the
    symmetric identity ``Phi(x) + Phi(-x) = 1`` depends on.
    """
    if not math.isfinite(x):
        raise ValueError(f"normal_cdf requires a finite argument, got {x}")
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_pdf(x):
    return np.exp(-0.5 * np.square(x)) / math.sqrt(2.0 * math.pi)


def pca_project(points: Sequence[np.ndarray], dims: int = 2) -> np.ndarray:
    """Project points onto the top ``dims`` principal components.

    Returns an ``(n, dims)`` array. Each component's sign is fixed so that its
    first nonzero loading is positive.
    """
    pts = [np.asarray(p, dtype=np.float64).ravel() for p in points]
    if len(pts) < 2:
        raise ShapeError("need at least 2 points")
    if len({p.shape for p in pts}) != 1:
        raise ShapeError("all points must share one shape")
    X = np.stack(pts)
    X = X - X.mean(axis=0)
    cov = X.T @ X
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(X.shape) * np.finfo(float).eps * max(evals[0], 1.0)
    rank = int(np.sum(evals > tol))
    # a rank-1 (collinear) set still projects, with zero trailing coordinates
    if rank < 1 or X.shape[1] < dims:
        raise DegenerateProjectionError(f"point set of rank {rank} in {X.shape[1]}-D cannot be projected to {dims}-D")
    comps = evecs[:, :dims].copy()
    for j in range(dims):
        nz = np.flatnonzero(np.abs(comps[:, j]) > 1e-12)
        if nz.size and comps[nz[0], j] < 0:
            comps[:, j] = -comps[:, j]
    out = X @ comps
    # components beyond the data rank carry only rounding noise
    out[:, evals[:dims] <= tol] = 0.0
    return out
