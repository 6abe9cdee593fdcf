"""The five pipeline commands behind the CLI.

Each command takes a validated :class:`RunConfig` (or a run directory for
``report``), writes its files atomically under ``out``, and records them
with content hashes in ``manifest_<command>.json``.
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np

from seedshift import report as rep
from seedshift.config import RunConfig
from seedshift.denoiser import ConfigurationError, DenoiserParams, load_checkpoint, save_checkpoint, train
from seedshift.eval import ModelEntry, run_sweep
from seedshift.numerics import SeededRng, pca_project
from seedshift.runio import Manifest, atomic_write, csv_text, sha256_file
from seedshift.sampler import Family, early_steps_discontinuity, esd_degenerate, generate, trajectory_divergence
from seedshift.shifts import SeedShift, overlap_row

log = logging.getLogger(__name__)

OVERLAP_COLUMNS = ["kind", "eta_r", "eta_m", "eta_s", "eta_a", "overlap_closed_form", "overlap_quadrature",
                   "overlap_random_convolved"]
SWEEP_BASE_COLUMNS = ["model", "shift_kind", "eta_r", "eta_m", "eta_s", "eta_a", "n", "top1", "top3",
                      "alignment_mean", "alignment_std"]


class DependencyError(RuntimeError):
    """A required input (checkpoint, run output) is missing."""


def checkpoint_path(out: Path, network: str) -> Path:
    return out / "checkpoints" / f"{network}.json"


def _run(out: Path, command: str, cfg: RunConfig | None, work, **extra) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, command, cfg.hash() if cfg else None, cfg.seed if cfg else None, extra)
    try:
        outputs = work(manifest)
    except BaseException as exc:
        manifest.finalize([], status="error", error=f"{type(exc).__name__}: {exc}")
        raise
    manifest.finalize(outputs)
    return outputs


# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig, out: Path) -> list[Path]:
    def work(manifest: Manifest) -> list[Path]:
        master = SeededRng(cfg.seed)
        outputs, rows = [], []
        for name, arch in cfg.architectures.items():
            tc = cfg.train_configs[name]
            path = checkpoint_path(out, name)
            path.parent.mkdir(parents=True, exist_ok=True)

            def on_ckpt(step, params, name=name, tc=tc):
                p = path.with_name(f"{name}.step{step}.json")
                save_checkpoint(p, params, cfg.schedule, tc, {"step": step, "config_hash": cfg.hash()})
                outputs.append(p)

            log.info("training network %s (%s loss, %d steps)", name, tc.loss, tc.steps)
            res = train(cfg.dataset, tc, master.child("train", name), cfg.schedule, arch, on_checkpoint=on_ckpt)
            extra = {"config_hash": cfg.hash(), "dataset": cfg.dataset.as_dict(),
                     "initial_eval_loss": res.initial_eval_loss, "final_eval_loss": res.final_eval_loss}
            save_checkpoint(path, res.params, cfg.schedule, tc, extra)
            outputs.append(path)
            rows.append({"network": name, "loss": tc.loss, "steps": tc.steps, "architecture_hash": arch.hash(),
                         "initial_eval_loss": res.initial_eval_loss, "final_eval_loss": res.final_eval_loss,
                         "first_batch_loss": res.losses[0] if res.losses else None,
                         "last_batch_loss": res.losses[-1] if res.losses else None})
        p = out / "training.csv"
        atomic_write(p, csv_text(rows))
        outputs.append(p)
        manifest.doc["schedule"] = cfg.schedule.as_dict()
        return outputs

    return _run(out, "train", cfg, work)


def load_models(cfg: RunConfig, out: Path, only: list[str] | None = None) -> list[ModelEntry]:
    cache: dict[str, tuple[DenoiserParams, str]] = {}
    models = []
    for m in cfg.models:
        if only is not None and m.model_id not in only:
            continue
        if m.network not in cache:
            path = checkpoint_path(out, m.network)
            if not path.exists():
                raise DependencyError(f"missing checkpoint {path}; run `seedshift train` first")
            params, sched, _ = load_checkpoint(path)
            if sched.as_dict() != cfg.schedule.as_dict():
                raise ConfigurationError(f"checkpoint {path} was trained with a different schedule")
            if params.arch != cfg.architectures[m.network]:
                raise ConfigurationError(f"checkpoint {path} does not match the configured architecture")
            cache[m.network] = (params, sha256_file(path))
        params, digest = cache[m.network]
        models.append(ModelEntry(m.model_id, params, m.spec, digest))
    if only is not None:
        models.sort(key=lambda e: only.index(e.model_id))
    return models


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> list[Path]:
    models = load_models(cfg, out)

    def work(manifest: Manifest) -> list[Path]:
        rng = SeededRng(cfg.seed).child("sweep")
        results = run_sweep(models, cfg.sweep_grid, cfg.dataset, cfg.replicates, rng, cfg.schedule, jobs=jobs)
        columns = SWEEP_BASE_COLUMNS + [f"class_{i}" for i in range(cfg.dataset.num_classes)]
        p = out / "sweep.csv"
        atomic_write(p, csv_text([r.row() for r in results], columns))
        manifest.doc["grid"] = [s.as_dict() for s in cfg.sweep_grid]
        return [p]

    return _run(out, "sweep", cfg, work,
                checkpoints={m.model_id: m.checkpoint_hash for m in models},
                models={m.model_id: m.spec.as_dict() for m in models},
                dataset=cfg.dataset.as_dict(), replicates=cfg.replicates)


def overlap_table(grid: list[SeedShift]) -> list[dict]:
    return [overlap_row(shift) for shift in grid]


def cmd_overlap(cfg: RunConfig, out: Path) -> list[Path]:
    def work(manifest: Manifest) -> list[Path]:
        p = out / "overlap.csv"
        atomic_write(p, csv_text(overlap_table(cfg.overlap_grid), OVERLAP_COLUMNS))
        manifest.doc["grid"] = [s.as_dict() for s in cfg.overlap_grid]
        return [p]

    return _run(out, "overlap", cfg, work)


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def _trajectory_rows(traj_a, traj_b, i: int) -> list[dict]:
    sa, sb = traj_a.states[:, i, :], traj_b.states[:, i, :]
    T = sa.shape[0] - 1
    D = sa.shape[1]
    rows = []
    proj = None
    if D > 4:
        proj = pca_project(list(sa) + list(sb), 2)
    for v, states, disp in (("original", sa, traj_a.displacements[:, i]), ("shifted", sb, traj_b.displacements[:, i])):
        for k in range(T + 1):
            row = {"variant": v, "t": T - k}
            if proj is None:
                for j in range(D):
                    row[f"x{j}"] = float(states[k, j])
            else:
                off = 0 if v == "original" else T + 1
                row["pca_1"], row["pca_2"] = float(proj[off + k, 0]), float(proj[off + k, 1])
            row["displacement"] = None if k == 0 else float(disp[k - 1])
            rows.append(row)
    return rows


def cmd_trajectory(cfg: RunConfig, out: Path) -> list[Path]:
    tr = cfg.trajectory
    models = load_models(cfg, out, only=tr["models"])

    def work(manifest: Manifest) -> list[Path]:
        master = SeededRng(cfg.seed).child("trajectory")
        n = tr["pairs"]
        seeds = master.child("seeds").normal((n, cfg.dataset.dim))
        labels = np.full(n, tr["class"])
        shift: SeedShift = tr["shift"]
        outputs, pair_rows = [], []
        per_model = {}
        for m in models:
            rng = master.child("sampling")
            _, ta = generate(m.params, m.spec, labels, seeds, SeedShift.identity(), rng, cfg.schedule,
                             layout=cfg.dataset.layout)
            _, tb = generate(m.params, m.spec, labels, seeds, shift, rng, cfg.schedule, layout=cfg.dataset.layout)
            esd_a, esd_b = early_steps_discontinuity(ta), early_steps_discontinuity(tb)
            degen = esd_degenerate(tb)
            div = trajectory_divergence(ta, tb)
            per_model[m.model_id] = {"family": m.spec.family.value, "esd": esd_b, "final_div": div[-1]}
            for i in range(n):
                pair_rows.append({"model": m.model_id, "family": m.spec.family.value, "pair": i,
                                  "esd_original": float(esd_a[i]), "esd_shifted": float(esd_b[i]),
                                  "esd_degenerate": bool(degen[i]), "initial_divergence": float(div[0, i]),
                                  "final_divergence": float(div[-1, i])})
            for i in range(min(tr["export"], n)):
                p = out / "trajectories" / f"{m.model_id}_pair{i:03d}.csv"
                atomic_write(p, csv_text(_trajectory_rows(ta, tb, i)))
                outputs.append(p)
        p = out / "trajectory_pairs.csv"
        atomic_write(p, csv_text(pair_rows))
        outputs.append(p)

        summary = {"shift": shift.as_dict(), "pairs": n, "class": tr["class"], "models": {}}
        for mid, d in per_model.items():
            finite = d["esd"][np.isfinite(d["esd"])]
            summary["models"][mid] = {
                "family": d["family"],
                "esd_median": float(np.median(finite)) if finite.size else None,
                "esd_mean": float(np.mean(finite)) if finite.size else None,
                "esd_degenerate_count": int(np.sum(~np.isfinite(d["esd"]))),
                "final_divergence_median": float(np.median(d["final_div"])),
                "final_divergence_mean": float(np.mean(d["final_div"])),
            }
        fixed = next((k for k, d in per_model.items() if d["family"] == Family.FIXED.value), None)
        learned = next((k for k, d in per_model.items() if d["family"] == Family.LEARNED.value), None)
        if fixed and learned:
            a, b = per_model[learned], per_model[fixed]
            esd_wins = int(np.sum(a["esd"] > b["esd"]))
            div_wins = int(np.sum(a["final_div"] < b["final_div"]))
            summary["contrast"] = {
                "learned_model": learned, "fixed_model": fixed,
                "esd_learned_higher": {"count": esd_wins, "n": n, "fraction": esd_wins / n,
                                       "ci95": list(wilson_interval(esd_wins, n)), "majority": esd_wins > n / 2},
                "divergence_learned_smaller": {"count": div_wins, "n": n, "fraction": div_wins / n,
                                               "ci95": list(wilson_interval(div_wins, n)),
                                               "majority": div_wins > n / 2},
            }
        p = out / "trajectory_summary.json"
        atomic_write(p, json.dumps(summary, indent=2, sort_keys=True) + "\n")
        outputs.append(p)
        return outputs

    return _run(out, "trajectory", cfg, work, checkpoints={m.model_id: m.checkpoint_hash for m in models})


def cmd_report(run_dir: Path, out: Path | None = None) -> list[Path]:
    run_dir = Path(run_dir)
    out = Path(out) if out else run_dir
    inputs = [run_dir / n for n in ("sweep.csv", "overlap.csv", "trajectory_summary.json")]
    if not run_dir.is_dir() or not any(p.exists() for p in inputs):
        raise DependencyError(f"{run_dir} holds no sweep, overlap or trajectory outputs to report on")

    def work(manifest: Manifest) -> list[Path]:
        return rep.build_report(run_dir, out / "report")

    return _run(out, "report", None, work, run_dir=str(run_dir))
