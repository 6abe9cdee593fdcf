from __future__ import annotations

import math

import numpy as np
import pytest

from seedshift.numerics import SeededRng, ShapeError
from seedshift.schedule import NoiseSchedule, ScheduleError, forward_diffuse, forward_step, linear_schedule


def test_constant_two_step():
    s = linear_schedule(2, 0.1, 0.1)
    assert np.allclose(s.beta, [0.1, 0.1])
    assert np.allclose(s.alpha_bar, [0.9, 0.81], atol=1e-15)


def test_default_product_oracle():
    s = linear_schedule()
    prod = 1.0
    for t in range(1, 101):
        prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 99)
    assert s.alpha_bar_t(100) == pytest.approx(prod, rel=1e-12)
    assert np.all(np.diff(s.beta) >= 0)
    assert np.all(np.diff(s.alpha_bar) < 0)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0), (2.5, 0.1, 0.1)])
def test_bad_bounds(args):
    with pytest.raises(ScheduleError):
        linear_schedule(*args)


def test_posterior_terms():
    s = linear_schedule(10, 0.01, 0.1)
    t = 5
    ab, abp, b = s.alpha_bar_t(t), s.alpha_bar_t(t - 1), s.beta_t(t)
    assert s.posterior_variance(t) == pytest.approx((1 - abp) / (1 - ab) * b)
    c0, ct = s.posterior_mean_coefs(t)
    assert c0 == pytest.approx(math.sqrt(abp) * b / (1 - ab))
    assert ct == pytest.approx(math.sqrt(1 - b) * (1 - abp) / (1 - ab))
    assert s.posterior_log_variance_clipped(1) == pytest.approx(math.log(s.posterior_variance(2)))
    assert s.alpha_bar_prev(1) == 1.0


def test_round_trip():
    s = linear_schedule(7, 0.001, 0.05)
    r = NoiseSchedule.from_dict(s.as_dict())
    assert np.array_equal(r.beta, s.beta)


def test_branches():
    s = linear_schedule()
    x0 = np.array([0.3, -1.2])
    eps = np.array([0.5, 0.7])
    assert np.array_equal(forward_diffuse(x0, 40, np.zeros(2), s), math.sqrt(s.alpha_bar_t(40)) * x0)
    assert np.array_equal(forward_diffuse(np.zeros(2), 40, eps, s), math.sqrt(1 - s.alpha_bar_t(40)) * eps)
    with pytest.raises(ShapeError):
        forward_diffuse(x0, 3, np.zeros(3), s)


def test_per_row_steps():
    s = linear_schedule()
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    out = forward_diffuse(x0, np.array([1, 50, 100]), eps, s)
    assert out[2, 0] == pytest.approx(math.sqrt(s.alpha_bar_t(100)))
    with pytest.raises(ShapeError):
        forward_diffuse(x0, np.array([1, 101, 3]), eps, s)


@pytest.mark.parametrize("t", [1, 3, 50, 100])
def test_one_step_chain_matches_marginal(t):
    s = linear_schedule()
    n = 10**5
    rng = SeededRng(123).child("chain", t)
    x0 = 1.5
    x = np.full(n, x0)
    for k in range(1, t + 1):
        x = forward_step(x, k, rng.child(k).normal([n]), s)
    ab = s.alpha_bar_t(t)
    mean, var = math.sqrt(ab) * x0, 1 - ab
    bound = 4 / math.sqrt(n)
    assert abs(x.mean() - mean) < bound * math.sqrt(var)
    # sample variance: sd of s^2 is about var * sqrt(2/n)
    assert abs(x.var() - var) < bound * var * math.sqrt(2)
