"""File formats: instance and protocol JSON, result CSVs, run manifests.

Floats are written with ``repr`` so every value round-trips exactly and
reruns produce identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .model import RNG_NAME, SKInstance, generate_instance
from .statevector import BangBangProtocol, Protocol

MANIFEST_NAME = "manifest.json"


class FormatError(ValueError):
    """Malformed input file."""


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


# ------------------------------------------------------------------ instances


def instance_to_dict(inst: SKInstance) -> dict:
    return {
        "n": inst.n,
        "seed": inst.seed,
        "rng": inst.rng,
        "J": [[i, j, v] for i, j, v in inst.couplings()],
        "h": [float(x) for x in inst.h],
    }


def instance_from_dict(d: dict) -> SKInstance:
    """Build an instance from seed-only or explicit-table JSON.

    Explicit ``J``/``h`` tables override whatever the seed would generate.
    """
    if not isinstance(d, dict) or "n" not in d:
        raise FormatError("instance needs an integer 'n'")
    try:
        n = int(d["n"])
        seed = d.get("seed")
        rng = d.get("rng", RNG_NAME)
        has_tables = "J" in d and "h" in d
        if not has_tables:
            if seed is None:
                raise FormatError("instance needs either a seed or explicit J and h tables")
            if rng != RNG_NAME:
                raise FormatError(f"cannot regenerate from unknown generator {rng!r}")
            base = generate_instance(n, int(seed))
            J = np.array(base.J)
            h = np.array(base.h)
        else:
            J = np.zeros((n, n))
            h = np.zeros(n)
        if "J" in d:
            J = np.zeros((n, n))
            for entry in d["J"]:
                i, j, v = entry
                i, j = int(i), int(j)
                if i == j:
                    raise FormatError("self-coupling in J table")
                i, j = min(i, j), max(i, j)
                J[i, j] = float(v)
        if "h" in d:
            h = np.asarray(d["h"], dtype=float)
        return SKInstance(n, J, h, None if seed is None else int(seed), rng)
    except FormatError:
        raise
    except (TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed instance: {exc}") from exc


def write_instance(path, inst: SKInstance) -> Path:
    return write_json(path, instance_to_dict(inst))


def read_instance(path) -> SKInstance:
    return instance_from_dict(_load(path))


# ------------------------------------------------------------------ protocols


def protocol_to_dict(p) -> dict:
    if isinstance(p, BangBangProtocol):
        return {"T": float(p.T), "start": int(p.start), "durations": [float(x) for x in p.durations]}
    if isinstance(p, Protocol):
        return {"T": float(p.T), "segments": [{"g": float(g), "dt": float(dt)} for g, dt in p.segments]}
    raise TypeError(f"cannot serialize {type(p).__name__}")


def protocol_from_dict(d: dict):
    try:
        T = d.get("T")
        if "durations" in d:
            return BangBangProtocol(int(d["start"]), tuple(float(x) for x in d["durations"]),
                                    None if T is None else float(T))
        if "segments" in d:
            segs = tuple((float(s["g"]), float(s["dt"])) for s in d["segments"])
            return Protocol(segs, None if T is None else float(T))
    except (TypeError, ValueError, KeyError) as exc:
        raise FormatError(f"malformed protocol: {exc}") from exc
    raise FormatError("protocol needs 'segments' or 'start' and 'durations'")


def write_protocol(path, p) -> Path:
    return write_json(path, protocol_to_dict(p))


def read_protocol(path):
    return protocol_from_dict(_load(path))


# ----------------------------------------------------------------------- CSVs


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "" if v is None else str(v)


def write_csv(path, columns, rows) -> Path:
    """Write rows with exactly ``columns`` as the header; extra keys are an error."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            extra = set(r) - set(columns)
            if extra:
                raise ValueError(f"unexpected columns {sorted(extra)}")
            w.writerow([_cell(r.get(c)) for c in columns])
    return path


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_switching_trace(path, trace) -> Path:
    rows = [{"time": float(t), "phi": float(p), "g": float(g)}
            for t, p, g in zip(trace.times, trace.phi, trace.g)]
    return write_csv(path, ("time", "phi", "g"), rows)


# ------------------------------------------------------------------ manifests


@dataclass
class RunManifest:
    """Record of one command invocation in an output directory.

    ``key`` hashes everything except timing, so two runs with the same
    command, parameters, seed and version share a key.
    """

    command: str
    params: dict
    master_seed: int | None
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    wall_clock: float = 0.0

    @property
    def key(self) -> str:
        body = dumps({"command": self.command, "params": self.params, "master_seed": self.master_seed,
                      "inputs": sorted(self.inputs), "version": self.version})
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "command": self.command, "params": self.params, "master_seed": self.master_seed,
            "inputs": sorted(self.inputs), "outputs": sorted(self.outputs), "version": self.version,
            "wall_clock_seconds": self.wall_clock, "key": self.key,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["command"], d["params"], d["master_seed"], list(d.get("inputs", [])),
                   list(d.get("outputs", [])), d.get("version", __version__),
                   float(d.get("wall_clock_seconds", 0.0)))


def read_manifest(out_dir):
    path = Path(out_dir) / MANIFEST_NAME
    if not path.exists():
        return None
    return RunManifest.from_dict(_load(path))


def claim_output_dir(out_dir, manifest: RunManifest) -> bool:
    """Prepare ``out_dir`` for ``manifest``.

    Returns True when the directory already holds a run with the same key
    (the caller may resume). A directory holding a different run is refused
    so that it never ends up with two manifests' worth of data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"cannot write to {out}")
    old = read_manifest(out)
    if old is None:
        return False
    if old.key != manifest.key:
        raise FileExistsError(f"{out} already holds a different run (key {old.key})")
    return True


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    return write_json(Path(out_dir) / MANIFEST_NAME, manifest.to_dict())
