"""SVG plots and a markdown summary of a finished run directory."""
from __future__ import annotations

import io
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402

from seedshift.runio import atomic_write, read_csv  # noqa: E402

# fixed ids and no timestamp, so identical data gives byte-identical SVG
plt.rcParams["svg.hashsalt"] = "seedshift"
_SVG_META = {"Date": None, "Creator": None}

_AXIS = {"random": "eta_r", "mean": "eta_m", "stddev": "eta_s", "mixed": "eta_s", "arrangement": "eta_a"}


def _save(fig, path: Path) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata=_SVG_META)
    plt.close(fig)
    atomic_write(path, buf.getvalue())
    return path


def _f(x: str) -> float:
    return float(x) if x not in ("", None) else float("nan")


def sweep_checks(rows: list[dict]) -> dict:
    """Directional degradation and guidance ordering, computed from sweep rows."""
    by = defaultdict(list)
    for r in rows:
        by[(r["model"], r["shift_kind"])].append(r)
    degradation = []
    for (model, kind), cells in sorted(by.items()):
        axis = _AXIS[kind]
        zero = [c for c in cells if all(_f(c[k]) == 0 for k in ("eta_r", "eta_m", "eta_s", "eta_a"))]
        if not zero:
            continue

        def mag(c):
            if kind == "mixed":
                return abs(_f(c["eta_s"])) + abs(_f(c["eta_m"]))
            return abs(_f(c[axis]))

        top = max(mag(c) for c in cells)
        base = _f(zero[0]["top1"])
        for c in cells:
            if mag(c) == top:
                degradation.append({"model": model, "kind": kind, "scale": c[axis], "top1_zero": base,
                                    "top1_extreme": _f(c["top1"]), "ok": _f(c["top1"]) <= base})
    return {"degradation": degradation}


def guidance_pairs(rows: list[dict], models: dict) -> list[dict]:
    """Random-shift cells of guided (s > 1) vs unguided (s = 0) models of the same network family."""
    rand = defaultdict(dict)
    for r in rows:
        if r["shift_kind"] == "random":
            rand[r["model"]][r["eta_r"]] = _f(r["top1"])
    out = []
    for g, gs in models.items():
        if gs["guidance_scale"] <= 1:
            continue
        for u, us in models.items():
            if us["guidance_scale"] != 0 or us["family"] != gs["family"]:
                continue
            for scale, acc in rand.get(g, {}).items():
                if scale in rand.get(u, {}):
                    out.append({"guided": g, "unguided": u, "eta_r": scale, "top1_guided": acc,
                                "top1_unguided": rand[u][scale], "ok": acc >= rand[u][scale]})
    return out


def _plot_sweep(rows: list[dict], out_dir: Path) -> list[Path]:
    paths = []
    kinds = []
    for r in rows:
        if r["shift_kind"] not in kinds:
            kinds.append(r["shift_kind"])
    for kind in kinds:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        models = []
        for r in rows:
            if r["shift_kind"] == kind and r["model"] not in models:
                models.append(r["model"])
        for model in models:
            cells = [r for r in rows if r["shift_kind"] == kind and r["model"] == model]
            xs = [_f(c[_AXIS[kind]]) for c in cells]
            axes[0].plot(xs, [_f(c["top1"]) for c in cells], marker="o", label=model)
            axes[1].plot(xs, [_f(c["alignment_mean"]) for c in cells], marker="o", label=model)
        axes[0].set_ylabel("top-1 accuracy")
        axes[1].set_ylabel("alignment score")
        for ax in axes:
            ax.set_xlabel(_AXIS[kind] if kind != "mixed" else "eta_s (eta_m = eta_s / 2)")
            ax.grid(alpha=0.3)
        axes[0].set_ylim(-0.02, 1.02)
        axes[1].legend(fontsize=7)
        fig.suptitle(f"{kind} shift")
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"accuracy_{kind}.svg"))
    return paths


def _plot_trajectories(run_dir: Path, out_dir: Path) -> list[Path]:
    files = sorted((run_dir / "trajectories").glob("*.csv")) if (run_dir / "trajectories").is_dir() else []
    by_model = defaultdict(list)
    for f in files:
        by_model[f.stem.rsplit("_pair", 1)[0]].append(f)
    paths = []
    for model, fs in sorted(by_model.items()):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for i, f in enumerate(fs):
            rows = read_csv(f)
            cols = ("pca_1", "pca_2") if "pca_1" in rows[0] else ("x0", "x1")
            for variant, style in (("original", "-"), ("shifted", "--")):
                pts = [r for r in rows if r["variant"] == variant]
                xs, ys = [_f(p[cols[0]]) for p in pts], [_f(p[cols[1]]) for p in pts]
                ax.plot(xs, ys, style, lw=0.8, color=f"C{i}")
                ax.scatter(xs[:1], ys[:1], marker="x", color=f"C{i}")
        ax.set_title(f"{model}: reverse trajectories (solid z, dashed shifted)", fontsize=8)
        ax.set_xlabel(cols[0])
        ax.set_ylabel(cols[1])
        fig.tight_layout()
        paths.append(_save(fig, out_dir / f"trajectories_{model}.svg"))
    return paths


def _pct(x: float) -> str:
    return f"{100 * x:.2f}%"


def build_report(run_dir: Path, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []
    md = ["# Seed-shift reliability report", ""]

    overlap = run_dir / "overlap.csv"
    if overlap.exists():
        md += ["## Overlap with N(0, 1)", "",
               "| kind | eta_r | eta_m | eta_s | eta_a | closed form | quadrature | random (convolved) |",
               "|---|---|---|---|---|---|---|---|"]
        for r in read_csv(overlap):
            vals = [(_pct(_f(r[k])) if r[k] else "") for k in
                    ("overlap_closed_form", "overlap_quadrature", "overlap_random_convolved")]
            md.append(f"| {r['kind']} | {r['eta_r']} | {r['eta_m']} | {r['eta_s']} | {r['eta_a']} | " +
                      " | ".join(vals) + " |")
        md.append("")

    sweep = run_dir / "sweep.csv"
    if sweep.exists():
        rows = read_csv(sweep)
        outputs += _plot_sweep(rows, out_dir)
        md += ["## Shift sweep (top-1 accuracy)", ""]
        models = []
        for r in rows:
            if r["model"] not in models:
                models.append(r["model"])
        md += ["| shift | scale | " + " | ".join(models) + " |", "|---|---|" + "---|" * len(models)]
        cells = defaultdict(dict)
        order = []
        for r in rows:
            key = (r["shift_kind"], r[_AXIS[r["shift_kind"]]] if r["shift_kind"] != "mixed"
                   else f"({r['eta_s']}, {r['eta_m']})")
            if key not in order:
                order.append(key)
            cells[key][r["model"]] = _f(r["top1"])
        for key in order:
            md.append(f"| {key[0]} | {key[1]} | " + " | ".join(f"{cells[key].get(m, float('nan')):.3f}"
                                                              for m in models) + " |")
        md.append("")
        checks = sweep_checks(rows)
        bad = [d for d in checks["degradation"] if not d["ok"]]
        md += [f"Directional degradation (top-1 at the largest scale <= top-1 at zero): "
               f"{len(checks['degradation']) - len(bad)}/{len(checks['degradation'])} model/shift pairs hold.", ""]
        for d in bad:
            md.append(f"- violated: {d['model']} {d['kind']} at {d['scale']}: {d['top1_extreme']:.3f} > "
                      f"{d['top1_zero']:.3f}")
        manifest = run_dir / "manifest_sweep.json"
        if manifest.exists():
            spec = json.loads(manifest.read_text()).get("models", {})
            pairs = guidance_pairs(rows, spec)
            if pairs:
                ok = sum(p["ok"] for p in pairs)
                md += [f"Guidance ordering (guided top-1 >= unguided, random shift): {ok}/{len(pairs)} cells "
                       f"({100 * ok / len(pairs):.0f}%).", ""]

    summary = run_dir / "trajectory_summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        outputs += _plot_trajectories(run_dir, out_dir)
        md += ["## Trajectories", "", f"Shift: `{json.dumps(s['shift'], sort_keys=True)}`, {s['pairs']} paired seeds.",
               "", "| model | family | median ESD | median final divergence |", "|---|---|---|---|"]
        for mid, d in s["models"].items():
            esd = "n/a" if d["esd_median"] is None else f"{d['esd_median']:.3f}"
            md.append(f"| {mid} | {d['family']} | {esd} | {d['final_divergence_median']:.4g} |")
        md.append("")
        c = s.get("contrast")
        if c:
            for key, label in (("esd_learned_higher", "learned-variance ESD higher"),
                               ("divergence_learned_smaller", "learned-variance final divergence smaller")):
                d = c[key]
                verdict = "majority" if d["majority"] else "NOT a majority"
                md.append(f"- {label}: {d['count']}/{d['n']} pairs ({d['fraction']:.2f}, 95% CI "
                          f"[{d['ci95'][0]:.2f}, {d['ci95'][1]:.2f}]) -> {verdict}")
            md += ["", "This contrast is exploratory; a failure is reported, not treated as an error.", ""]

    outputs.append(out_dir / "report.md")
    atomic_write(out_dir / "report.md", "\n".join(md) + "\n")
    return outputs
