from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest

from seedshift.numerics import DegenerateProjectionError, SeededRng, ShapeError, normal_cdf, pca_project, \
    sample_standard_normal


def test_same_seed_same_draws():
    a = sample_standard_normal(SeededRng(1), [4])
    b = sample_standard_normal(SeededRng(1), [4])
    assert np.array_equal(a, b)


def test_different_seeds_within_mc_bound():
    n = 10**5
    m1 = sample_standard_normal(SeededRng(1), [n]).mean()
    m2 = sample_standard_normal(SeededRng(2), [n]).mean()
    assert m1 != m2
    assert abs(m1) < 4 / math.sqrt(n) and abs(m2) < 4 / math.sqrt(n)


def test_million_draws_std():
    x = sample_standard_normal(SeededRng(7), [10**6])
    assert 0.995 <= x.std() <= 1.005


@pytest.mark.parametrize("shape", [[], [0], [3, 0]])
def test_empty_shape_rejected(shape):
    with pytest.raises(ShapeError):
        sample_standard_normal(SeededRng(0), shape)


def test_child_streams_ignore_creation_order():
    root = SeededRng(11)
    a1 = root.child("a").normal([5])
    root.child("b").normal([5])
    a2 = SeededRng(11).child("a").normal([5])
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, root.child("b").normal([5]))
    assert not np.array_equal(root.child("step", 1).normal([3]), root.child("step", 2).normal([3]))


def test_seed_range():
    with pytest.raises(ValueError):
        SeededRng(-1)
    with pytest.raises(ValueError):
        SeededRng(2**64)
    SeededRng(2**64 - 1).normal([2])


def test_cdf_values():
    assert normal_cdf(0.0) == 0.5
    mp = mpmath.mp
    mp.dps = 40
    oracle = float(mp.ncdf(mp.mpf("-0.025")))
    assert abs(normal_cdf(-0.025) - oracle) < 1e-15
    assert f"{normal_cdf(-0.025):.7f}" == "0.4900275"
    assert abs(normal_cdf(40.0) - 1.0) <= 1e-15


@pytest.mark.parametrize("x", [0.3, 1.7, 5.0, 9.0])
def test_cdf_symmetry_and_tail(x):
    assert normal_cdf(x) + normal_cdf(-x) == pytest.approx(1.0, abs=1e-15)
    oracle = float(mpmath.ncdf(-x))
    assert normal_cdf(-x) == pytest.approx(oracle, rel=1e-12)


def test_cdf_rejects_nonfinite():
    with pytest.raises(ValueError):
        normal_cdf(float("nan"))


def test_pca_collinear_second_coordinate_zero():
    pts = [np.array([float(k), 0.0, 0.0]) for k in range(6)]
    out = pca_project(pts)
    assert out.shape == (6, 2)
    assert np.all(out[:, 1] == 0.0)
    assert np.allclose(np.abs(np.diff(out[:, 0])), 1.0)


def test_pca_two_d_is_isometry():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(12, 2))
    X -= X.mean(axis=0)
    Y = pca_project(list(X))
    dx = np.linalg.norm(X[:, None] - X[None], axis=-1)
    dy = np.linalg.norm(Y[:, None] - Y[None], axis=-1)
    assert np.max(np.abs(dx - dy)) < 1e-9


def test_pca_reconstruction_error_is_discarded_eigenvalues():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(5, 10))
    Y = pca_project(list(X), 2)
    Xc = X - X.mean(axis=0)
    evals = np.sort(np.linalg.eigvalsh(Xc.T @ Xc))[::-1]
    kept = np.sum(Y**2)
    residual = np.sum(Xc**2) - kept
    assert residual == pytest.approx(evals[2:].sum(), rel=1e-9)


def test_pca_degenerate():
    with pytest.raises(DegenerateProjectionError):
        pca_project([np.ones(3)] * 4)
    with pytest.raises(ShapeError):
        pca_project([np.ones(3)])
