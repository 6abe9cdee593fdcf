"""Run configuration: YAML in, validated and canonicalised dataclass out."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from seedshift import shifts as sh
from seedshift.denoiser import Architecture, ConfigurationError, TrainConfig
from seedshift.eval import SyntheticDataset, make_dataset
from seedshift.sampler import SamplerSpec
from seedshift.schedule import NoiseSchedule, ScheduleError, linear_schedule


class ConfigError(ValueError):
    """Malformed configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


DEFAULTS: dict[str, Any] = {
    "seed": 20240521,
    "dataset": {"kind": "gmm2d", "num_classes": 3, "radius": 1.0, "std": 0.15},
    "schedule": {"T": 100, "beta_start": 1e-4, "beta_end": 0.02},
    "architecture": {"hidden": [128, 128, 128], "time_dim": 32, "class_dim": 16},
    "train": {"learning_rate": 2e-3, "batch_size": 256, "steps": 3000, "beta1": 0.9, "beta2": 0.999,
              "adam_eps": 1e-8, "p_uncond": 0.1, "lambda_vlb": 1e-3, "checkpoint_every": 0, "eval_batch": 2048},
    "networks": {
        "fixed": {"loss": "simple"},
        "learned": {"loss": "hybrid"},
    },
    "models": [
        {"id": "fixed_guided", "network": "fixed", "family": "fixed_variance", "guidance_scale": 7.5},
        {"id": "fixed_unguided", "network": "fixed", "family": "fixed_variance", "guidance_scale": 0.0},
        {"id": "learned_guided", "network": "learned", "family": "learned_variance", "guidance_scale": 7.5},
        {"id": "learned_unguided", "network": "learned", "family": "learned_variance", "guidance_scale": 0.0},
    ],
    "sweep": {
        "replicates": 100,
        "random": list(sh.RANDOM_SCALES),
        "mean": list(sh.MEAN_SCALES),
        "stddev": list(sh.STDDEV_SCALES),
        "mixed": [list(p) for p in sh.MIXED_PAIRS],
        "arrangement": None,  # None: reference sides rescaled to the dataset layout
    },
    "trajectory": {"models": ["fixed_guided", "learned_guided"], "shift": {"kind": "mean", "eta_m": 0.2},
                   "pairs": 100, "class": 0, "export": 3},
    "overlap": {
        "random": list(sh.RANDOM_SCALES),
        "mean": list(sh.MEAN_SCALES),
        "stddev": list(sh.STDDEV_SCALES),
        "mixed": [list(p) for p in sh.MIXED_PAIRS],
        "arrangement": list(sh.ARRANGEMENT_SIDES),
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(where, "unknown field")
        if isinstance(base[key], dict) and key not in ("networks", "dataset"):
            if not isinstance(value, dict):
                raise ConfigError(where, "expected a mapping")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def scaled_arrangement_sides(layout: tuple[int, ...], sides=sh.ARRANGEMENT_SIDES, reference: int = 64) -> list[int]:
    """Rescale the 64-wide reference sides to the smallest spatial side of ``layout``."""
    side = min(layout[-2:])
    out: list[int] = []
    for s in sides:
        v = int(math.floor(s * side / reference + 0.5))
        if v not in out:
            out.append(v)
    return out


def _grid(section: dict, where: str, arrangement: list[int]) -> list[sh.SeedShift]:
    grid: list[sh.SeedShift] = []
    try:
        grid += [sh.SeedShift.random(float(e)) for e in section.get("random") or []]
        grid += [sh.SeedShift.mean(float(e)) for e in section.get("mean") or []]
        grid += [sh.SeedShift.stddev(float(e)) for e in section.get("stddev") or []]
        grid += [sh.SeedShift.mixed(float(s), float(m)) for s, m in section.get("mixed") or []]
        grid += [sh.SeedShift.arrangement(int(a)) for a in arrangement]
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from exc
    if not grid:
        raise ConfigError(where, "empty shift grid")
    return grid


@dataclass
class ModelConfig:
    model_id: str
    network: str
    spec: SamplerSpec


@dataclass
class RunConfig:
    raw: dict
    seed: int
    dataset: SyntheticDataset
    schedule: NoiseSchedule
    architectures: dict[str, Architecture]
    train_configs: dict[str, TrainConfig]
    models: list[ModelConfig]
    sweep_grid: list[sh.SeedShift]
    replicates: int
    overlap_grid: list[sh.SeedShift]
    trajectory: dict

    def canonical(self) -> dict:
        return self.raw

    def hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def model(self, model_id: str) -> ModelConfig:
        for m in self.models:
            if m.model_id == model_id:
                return m
        raise ConfigError("trajectory.models", f"unknown model {model_id!r}")


def build(raw_override: dict | None = None, seed: int | None = None) -> RunConfig:
    raw = _merge(DEFAULTS, raw_override or {})
    if seed is not None:
        raw["seed"] = seed
    try:
        raw["seed"] = int(raw["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("seed", "expected an unsigned 64-bit integer") from exc
    if not 0 <= raw["seed"] < 2**64:
        raise ConfigError("seed", "expected an unsigned 64-bit integer")
    try:
        dataset = make_dataset(raw["dataset"])
    except (TypeError, ValueError) as exc:
        raise ConfigError("dataset", str(exc)) from exc
    try:
        s = raw["schedule"]
        schedule = linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
    except (KeyError, TypeError, ValueError, ScheduleError) as exc:
        raise ConfigError("schedule", str(exc)) from exc

    archs, tcs = {}, {}
    if not isinstance(raw["networks"], dict) or not raw["networks"]:
        raise ConfigError("networks", "expected a nonempty mapping of network name to settings")
    for name, net in raw["networks"].items():
        where = f"networks.{name}"
        net = dict(net or {})
        a = {**raw["architecture"], **net.pop("architecture", {})}
        loss = net.get("loss", "simple")
        try:
            archs[name] = Architecture(dataset.dim, dataset.num_classes, hidden=tuple(a["hidden"]),
                                       time_dim=int(a["time_dim"]), class_dim=int(a["class_dim"]),
                                       variance_head=bool(net.pop("variance_head", loss == "hybrid")))
            tcs[name] = TrainConfig(**{**raw["train"], **net})
        except (TypeError, ValueError, ConfigurationError) as exc:
            raise ConfigError(where, str(exc)) from exc

    models = []
    seen = set()
    for i, m in enumerate(raw["models"]):
        where = f"models[{i}]"
        try:
            mid, net = str(m["id"]), str(m["network"])
            spec = SamplerSpec(m.get("family", "fixed_variance"), float(m.get("guidance_scale", 7.5)),
                               m.get("sigma_convention", "beta_tilde"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(where, str(exc)) from exc
        if net not in archs:
            raise ConfigError(f"{where}.network", f"unknown network {net!r}")
        if spec.family.value == "learned_variance" and not archs[net].variance_head:
            raise ConfigError(where, "learned-variance family needs a network with a variance head")
        if mid in seen:
            raise ConfigError(f"{where}.id", f"duplicate model id {mid!r}")
        seen.add(mid)
        models.append(ModelConfig(mid, net, spec))

    sw = raw["sweep"]
    arrangement = sw.get("arrangement")
    if arrangement is None:
        arrangement = scaled_arrangement_sides(dataset.layout)
        sw["arrangement"] = arrangement
    h, w = dataset.layout[-2:]
    bad = [a for a in arrangement if a > min(h, w)]
    if bad:
        raise ConfigError("sweep.arrangement", f"sides {bad} exceed the dataset's {h}x{w} seed layout")
    sweep_grid = _grid(sw, "sweep", arrangement)
    replicates = int(sw["replicates"])
    if replicates < 1:
        raise ConfigError("sweep.replicates", "must be >= 1")
    overlap_grid = _grid(raw["overlap"], "overlap", raw["overlap"].get("arrangement") or [])

    tr = raw["trajectory"]
    try:
        tr_shift = sh.SeedShift.from_dict(tr["shift"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("trajectory.shift", str(exc)) from exc
    trajectory = {"models": list(tr["models"]), "shift": tr_shift, "pairs": int(tr["pairs"]),
                  "class": int(tr["class"]), "export": int(tr["export"])}
    cfg = RunConfig(raw, raw["seed"], dataset, schedule, archs, tcs, models, sweep_grid, replicates,
                    overlap_grid, trajectory)
    for mid in trajectory["models"]:
        cfg.model(mid)
    if not 0 <= trajectory["class"] < dataset.num_classes:
        raise ConfigError("trajectory.class", "class index out of range")
    return cfg


def load(path: str | Path | None, seed: int | None = None) -> RunConfig:
    if path is None:
        return build({}, seed)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"YAML parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a mapping at the top level")
    return build(doc, seed)


def dump_defaults() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
