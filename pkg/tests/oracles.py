"""Straight-line reference formulas used as test oracles.

Nothing here calls the package's forward pass or loss code: every value is
recomputed sample by sample from the raw weights and the schedule arrays.
"""
from __future__ import annotations

import math

import numpy as np


def sigmoid(a):
    return 1.0 / (1.0 + np.exp(-a))


def forward_one(weights: dict, arch, x: np.ndarray, t: int, c: int | None) -> np.ndarray:
    half = arch.time_dim // 2
    freqs = [math.exp(-math.log(10000.0) * k / half) for k in range(half)]
    temb = [math.sin(t * f) for f in freqs] + [math.cos(t * f) for f in freqs]
    row = 0 if c is None or c < 0 else c + 1
    h = np.concatenate([x, temb, weights["class_emb"][row]])
    L = len(arch.hidden) + 1
    for i in range(L):
        a = h @ weights[f"W{i}"] + weights[f"b{i}"]
        h = a * sigmoid(a) if i < L - 1 else a
    return h


def posterior(sched, x0, x_t, t):
    ab, b = sched.alpha_bar[t - 1], sched.beta[t - 1]
    ab_prev = sched.alpha_bar[t - 2] if t > 1 else 1.0
    mean = math.sqrt(ab_prev) * b / (1 - ab) * x0 + math.sqrt(1 - b) * (1 - ab_prev) / (1 - ab) * x_t
    var = (1 - ab_prev) / (1 - ab) * b
    if t == 1:
        var = (1 - ab) / (1 - sched.alpha_bar[1]) * sched.beta[1]
    return mean, math.log(var)


def scalar_kl(m1, lv1, m2, lv2):
    return 0.5 * (lv2 - lv1 + (math.exp(lv1) + (m1 - m2) ** 2) / math.exp(lv2) - 1.0)


def reference_losses(weights, arch, sched, x0s, ts, epss, cs, lambda_vlb=0.0, frozen_means=None):
    """(simple, kl, hybrid) averaged over the batch; ``frozen_means`` pins the model mean in the KL."""
    D = arch.data_dim
    simple = kl = 0.0
    means = []
    n = len(x0s)
    for j in range(n):
        x0, t, eps, c = x0s[j], int(ts[j]), epss[j], cs[j]
        ab = sched.alpha_bar[t - 1]
        x_t = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
        out = forward_one(weights, arch, x_t, t, c)
        eps_hat = out[:D]
        simple += float(np.sum((eps - eps_hat) ** 2))
        a = 1 - sched.beta[t - 1]
        mu = (x_t - (1 - a) / math.sqrt(1 - ab) * eps_hat) / math.sqrt(a)
        means.append(mu)
        if arch.variance_head:
            mu_kl = mu if frozen_means is None else frozen_means[j]
            tm, tlv = posterior(sched, x0, x_t, t)
            for d in range(D):
                v = sigmoid(out[D + d])
                lv = v * math.log(sched.beta[t - 1]) + (1 - v) * tlv
                kl += scalar_kl(tm[d], tlv, mu_kl[d], lv)
    simple, kl = simple / n, kl / n
    return simple, kl, simple + lambda_vlb * kl, means


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def central_difference(f, theta: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g
