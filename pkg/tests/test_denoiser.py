from __future__ import annotations

import math

import numpy as np
import pytest

from oracles import central_difference, forward_one, max_rel_error, posterior, reference_losses, scalar_kl
from seedshift.denoiser import (Architecture, Batch, CheckpointError, ConditionError, ConfigurationError,
                                TrainConfig, TrainingDivergedError, gaussian_kl, grad, init_params,
                                load_checkpoint, loss_hybrid, loss_simple, predict, save_checkpoint, train,
                                vlb_term, zero_params)
from seedshift.eval import gmm2d
from seedshift.numerics import SeededRng, ShapeError
from seedshift.schedule import linear_schedule

SCHED = linear_schedule()
TINY = dict(hidden=(2,), time_dim=2, class_dim=1)


def tiny_arch(variance_head=False, data_dim=1):
    return Architecture(data_dim, 2, variance_head=variance_head, **TINY)


def random_batch(rng: SeededRng, arch, n=4):
    x0 = rng.child("x0").normal((n, arch.data_dim))
    eps = rng.child("eps").normal((n, arch.data_dim))
    t = rng.child("t").integers(1, SCHED.T + 1, size=n)
    c = rng.child("c").integers(-1, arch.num_classes, size=n)
    return Batch(x0, t, eps, c)


def test_tiny_instance_size():
    assert init_params(tiny_arch(), SeededRng(0)).size == 16
    assert init_params(tiny_arch(True), SeededRng(0)).size == 19


def test_zero_network_predicts_zero():
    arch = Architecture(3, 4, hidden=(8, 8), variance_head=True)
    p = zero_params(arch)
    x = SeededRng(1).normal((5, 3))
    eps, v = predict(p, x, 7, 2)
    assert np.array_equal(eps, np.zeros((5, 3)))
    assert np.array_equal(v, np.full((5, 3), 0.5))


def test_predict_pure_and_shaped():
    arch = Architecture(2, 3, hidden=(16, 16))
    p = init_params(arch, SeededRng(2))
    x = SeededRng(3).normal((6, 2))
    a, _ = predict(p, x, 10, 1)
    b, _ = predict(p, x, 10, 1)
    assert np.array_equal(a, b) and a.shape == x.shape and np.all(np.isfinite(a))
    single, v = predict(p, x[0], 10, 1)
    assert single.shape == (2,) and v is None
    assert np.allclose(single, a[0], atol=1e-14)


def test_predict_matches_reference_forward():
    arch = Architecture(2, 3, hidden=(5, 4), time_dim=6, class_dim=3, variance_head=True)
    p = init_params(arch, SeededRng(4))
    x = np.array([0.3, -0.7])
    for c in (None, 0, 2):
        eps, v = predict(p, x, 37, c)
        ref = forward_one(p.weights, arch, x, 37, c)
        assert np.allclose(eps, ref[:2], atol=1e-13)
        assert np.allclose(v, 1 / (1 + np.exp(-ref[2:])), atol=1e-13)


def test_unknown_class_rejected():
    p = zero_params(tiny_arch())
    with pytest.raises(ConditionError):
        predict(p, np.zeros(1), 5, 2)
    with pytest.raises(ConditionError):
        predict(p, np.zeros(1), 5, -2)
    with pytest.raises(ShapeError):
        predict(p, np.zeros(3), 5, 0)


def test_null_path_ignores_class_rows():
    arch = Architecture(2, 3, hidden=(8,))
    p = init_params(arch, SeededRng(5))
    x = SeededRng(6).normal((4, 2))
    base, _ = predict(p, x, 20, None)
    q = p.copy()
    q.weights["class_emb"][1:] += 5.0
    again, _ = predict(q, x, 20, None)
    assert np.array_equal(base, again)
    changed, _ = predict(q, x, 20, 0)
    assert not np.allclose(changed, predict(p, x, 20, 0)[0])


def _rigged(arch, eps, v_logit=-60.0):
    p = zero_params(arch)
    D = arch.data_dim
    p.weights[f"b{len(arch.hidden)}"][:D] = eps
    if arch.variance_head:
        p.weights[f"b{len(arch.hidden)}"][D:] = v_logit
    return p


def test_simple_loss_examples():
    arch = tiny_arch(data_dim=2)
    eps = np.array([0.4, -1.1])
    x0 = np.array([0.2, 0.9])
    assert loss_simple(_rigged(arch, eps), x0, 12, eps, 1, SCHED) == 0.0
    assert loss_simple(zero_params(arch), x0, 12, eps, 1, SCHED) == pytest.approx(float(eps @ eps), abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_simple_loss_duplicate_formula(seed):
    arch = Architecture(2, 3, hidden=(6, 5), time_dim=4, class_dim=2)
    p = init_params(arch, SeededRng(seed))
    b = random_batch(SeededRng(100 + seed), arch, n=5)
    ref = reference_losses(p.weights, arch, SCHED, b.x0, b.t, b.eps, b.c)[0]
    assert loss_simple(p, b.x0, b.t, b.eps, b.c, SCHED) == pytest.approx(ref, rel=1e-12)


def test_hybrid_with_zero_weight_is_simple():
    arch = Architecture(2, 3, hidden=(6,), variance_head=True)
    p = init_params(arch, SeededRng(8))
    b = random_batch(SeededRng(9), arch)
    assert loss_hybrid(p, b.x0, b.t, b.eps, b.c, SCHED, 0.0) == loss_simple(p, b.x0, b.t, b.eps, b.c, SCHED)


@pytest.mark.parametrize("t", [2, 30, 100])
def test_kl_vanishes_for_matched_gaussians(t):
    arch = tiny_arch(True, 2)
    eps = np.array([0.3, -0.8])
    p = _rigged(arch, eps)
    # eps_hat = eps gives the true posterior mean; v ~ 0 gives beta_tilde
    assert vlb_term(p, np.array([0.5, 1.0]), t, eps, 0, SCHED) < 1e-12


def test_kl_matches_scalar_oracle():
    arch = Architecture(2, 3, hidden=(6,), variance_head=True)
    p = init_params(arch, SeededRng(10))
    x0, eps = np.array([0.4, -0.3]), np.array([1.2, 0.1])
    for t in (1, 2, 57, 100):
        got = vlb_term(p, x0, t, eps, 1, SCHED)
        ab = SCHED.alpha_bar[t - 1]
        x_t = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
        out = forward_one(p.weights, arch, x_t, t, 1)
        a = 1 - SCHED.beta[t - 1]
        mu = (x_t - (1 - a) / math.sqrt(1 - ab) * out[:2]) / math.sqrt(a)
        tm, tlv = posterior(SCHED, x0, x_t, t)
        want = 0.0
        for d in range(2):
            v = 1 / (1 + math.exp(-out[2 + d]))
            want += scalar_kl(tm[d], tlv, mu[d], v * math.log(SCHED.beta[t - 1]) + (1 - v) * tlv)
        assert got == pytest.approx(want, abs=1e-8)


def test_gaussian_kl_identity():
    assert gaussian_kl(0.3, -1.0, 0.3, -1.0) == 0.0
    assert gaussian_kl(0.0, 0.0, 1.0, 0.0) == pytest.approx(0.5)


def test_hybrid_needs_variance_head():
    p = zero_params(tiny_arch())
    with pytest.raises(ConfigurationError):
        loss_hybrid(p, np.zeros(1), 3, np.zeros(1), 0, SCHED)
    with pytest.raises(ConfigurationError):
        grad(p, random_batch(SeededRng(0), p.arch), SCHED, "hybrid")


def fd_error(seed: int, loss: str) -> float:
    arch = tiny_arch(loss == "hybrid")
    p = init_params(arch, SeededRng(seed).child("p"))
    # larger weights than the default init so every path carries gradient
    p = p.with_flat(SeededRng(seed).child("scale").normal([p.size]))
    b = random_batch(SeededRng(seed).child("batch"), arch, n=3)
    lam = 0.5
    _, g = grad(p, b, SCHED, loss, lam)
    analytic = p.with_flat(np.zeros(p.size)).weights
    for k in g:
        analytic[k] = g[k]
    analytic = np.concatenate([analytic[k].ravel() for k in sorted(analytic)])
    theta0 = p.flat()
    frozen = reference_losses(p.weights, arch, SCHED, b.x0, b.t, b.eps, b.c)[3]

    def f(theta):
        w = p.with_flat(theta).weights
        return reference_losses(w, arch, SCHED, b.x0, b.t, b.eps, b.c, lam, frozen_means=frozen)[2]

    return max_rel_error(analytic, central_difference(f, theta0))


@pytest.mark.parametrize("loss", ["simple", "hybrid"])
@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed, loss):
    assert fd_error(seed, loss) <= 1e-4


def test_zero_learning_rate_is_fixed_point():
    ds = gmm2d()
    arch = Architecture(2, 3, hidden=(8,))
    p = init_params(arch, SeededRng(0))
    res = train(ds, TrainConfig(learning_rate=0.0, steps=5, batch_size=16, eval_batch=32), SeededRng(1), SCHED,
                arch, params=p)
    for k in p.weights:
        assert np.array_equal(res.params.weights[k], p.weights[k])
    assert len(res.losses) == 5


def test_short_training_reduces_loss_and_is_deterministic():
    ds = gmm2d()
    arch = Architecture(2, 3, hidden=(32, 32))
    cfg = TrainConfig(steps=200, batch_size=64, eval_batch=256)
    a = train(ds, cfg, SeededRng(3), SCHED, arch)
    b = train(ds, cfg, SeededRng(3), SCHED, arch)
    assert a.final_eval_loss < a.initial_eval_loss
    assert np.array_equal(a.params.flat(), b.params.flat())


def test_divergence_is_reported():
    ds = gmm2d()
    arch = Architecture(2, 3, hidden=(8,))
    p = init_params(arch, SeededRng(0))
    p.weights["W1"][:] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        train(ds, TrainConfig(steps=3, batch_size=8, eval_batch=8), SeededRng(0), SCHED, arch, params=p)
    assert info.value.step == 1


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(p_uncond=0.9)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss="l1")
    with pytest.raises(ConfigurationError):
        train(gmm2d(), TrainConfig(loss="hybrid", steps=1), SeededRng(0), SCHED, Architecture(2, 3, hidden=(4,)))


def test_checkpoint_round_trip(tmp_path):
    arch = Architecture(2, 3, hidden=(4, 3), variance_head=True)
    p = init_params(arch, SeededRng(11))
    path = tmp_path / "net.json"
    save_checkpoint(path, p, SCHED, TrainConfig(), {"note": 1})
    q, sched, doc = load_checkpoint(path)
    assert q.arch == arch and doc["extra"] == {"note": 1}
    assert np.array_equal(q.flat(), p.flat())
    assert np.array_equal(sched.beta, SCHED.beta)


def test_checkpoint_hash_mismatch(tmp_path):
    import json

    p = init_params(tiny_arch(), SeededRng(0))
    path = tmp_path / "net.json"
    save_checkpoint(path, p, SCHED)
    doc = json.loads(path.read_text())
    doc["architecture"]["hidden"] = [3]
    path.write_text(json.dumps(doc))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_default_training_halves_loss(default_run):
    import csv

    with open(default_run.out / "training.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["loss"] for r in rows} == {"simple", "hybrid"}
    for r in rows:
        assert float(r["final_eval_loss"]) <= 0.5 * float(r["initial_eval_loss"])
