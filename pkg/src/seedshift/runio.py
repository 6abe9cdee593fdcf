"""Atomic file output, CSV formatting and run manifests."""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

from seedshift import __version__
from seedshift.numerics import RNG_ALGORITHM


def atomic_write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Per-command manifest written before the work starts and finalized after."""

    def __init__(self, out_dir: Path, command: str, config_hash: str | None, seed: int | None, extra: dict | None = None):
        self.out_dir = out_dir
        self.path = out_dir / f"manifest_{command}.json"
        self.doc = {
            "command": command,
            "artifact_version": __version__,
            "rng_algorithm": RNG_ALGORITHM,
            "config_hash": config_hash,
            "master_seed": seed,
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
            **(extra or {}),
            "outputs": [],
        }
        self._write()

    def _write(self) -> None:
        atomic_write(self.path, json.dumps(self.doc, indent=2, sort_keys=True) + "\n")

    def finalize(self, outputs: Iterable[Path], status: str = "ok", **extra) -> None:
        self.doc.update(extra)
        self.doc["outputs"] = [
            {"path": str(p.relative_to(self.out_dir)), "sha256": sha256_file(p)} for p in sorted(set(outputs))
        ]
        self.doc["status"] = status
        self.doc["finished_at"] = _now()
        self._write()
