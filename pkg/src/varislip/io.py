"""Serialization of run outputs.

A run directory holds

``config.ini``      the full configuration, every default written out;
``budgets.csv``     one row per step: ``time`` followed by the
                    :class:`EnergyBudget` fields in declaration order;
``snapshots.jsonl`` one JSON object per stored state (step 0 included);
``report.json``     the verification report;
``metadata.json``   schema versions, package version, kernel backend,
                    config echo and SHA-256 of every other file.

All files are byte-deterministic given identical inputs: no timestamps,
floats written with ``repr`` precision, fixed key order.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .budget import BUDGET_SCHEMA_VERSION, EnergyBudget
from .errors import IntegrityError

SNAPSHOT_SCHEMA_VERSION = 1
FILES = ("config.ini", "budgets.csv", "snapshots.jsonl", "report.json")


@dataclass(eq=False)
class SnapshotRecord:
    """Serialized state at one sample time.

    ``velocity`` and ``pressure`` hold values on the active cells of
    ``active`` in row-major order. Every other cell carries zero velocity
    (zero extension), in particular every Solid cell. ``labels`` is the
    classification of the fluid domain carrying ``velocity``.
    """

    step: int
    time: float
    eta: np.ndarray
    interface: np.ndarray
    active: np.ndarray
    velocity: np.ndarray
    pressure: np.ndarray
    labels: np.ndarray
    flowmap_det: tuple = (1.0, 1.0)
    checks: dict | None = None

    @classmethod
    def from_step(cls, rec) -> "SnapshotRecord":
        return cls(
            rec.k,
            rec.t,
            rec.eta,
            rec.interface,
            rec.active,
            rec.v[rec.active],
            rec.pressure[rec.active],
            rec.labels,
            rec.flowmap_det,
            rec.checks,
        )

    def velocity_values(self) -> np.ndarray:
        """Zero-extended ``(mx, my, 2)`` velocity."""
        out = np.zeros(self.active.shape + (2,))
        out[self.active] = self.velocity
        return out

    def pressure_values(self) -> np.ndarray:
        out = np.zeros(self.active.shape)
        out[self.active] = self.pressure
        return out

    def to_json(self) -> str:
        mx, my = self.active.shape
        obj = {
            "step": int(self.step),
            "time": float(self.time),
            "shape": [int(mx), int(my)],
            "eta": np.asarray(self.eta, dtype=float).tolist(),
            "interface": np.asarray(self.interface, dtype=float).tolist(),
            "active": "".join("1" if a else "0" for a in self.active.ravel()),
            "velocity": np.asarray(self.velocity, dtype=float).tolist(),
            "pressure": np.asarray(self.pressure, dtype=float).tolist(),
            "labels": "".join(str(int(v)) for v in np.asarray(self.labels).ravel()),
            "flowmap_det": [float(self.flowmap_det[0]), float(self.flowmap_det[1])],
            "checks": {k: float(v) for k, v in sorted((self.checks or {}).items())},
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "SnapshotRecord":
        o = json.loads(text)
        mx, my = o["shape"]
        active = np.frombuffer(o["active"].encode(), dtype=np.uint8).reshape(mx, my) == ord("1")
        labels = (np.frombuffer(o["labels"].encode(), dtype=np.uint8) - ord("0")).reshape(mx, my).astype(np.int8)
        return cls(
            o["step"],
            o["time"],
            np.array(o["eta"], dtype=float).reshape(-1, 2),
            np.array(o["interface"], dtype=float).reshape(-1, 2),
            active,
            np.array(o["velocity"], dtype=float).reshape(-1, 2),
            np.array(o["pressure"], dtype=float),
            labels,
            tuple(o["flowmap_det"]),
            o.get("checks", {}),
        )


# -- writers --------------------------------------------------------------------
def _budget_csv(records, dt) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time"] + EnergyBudget.field_names())
    for b in records:
        row = [repr(float(b.step * dt))]
        for name in EnergyBudget.field_names():
            v = getattr(b, name)
            row.append(str(int(v)) if name == "step" else repr(float(v)))
        w.writerow(row)
    return buf.getvalue()


def _write(path: Path, text: str):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs(directory, config, traj=None, report=None, extra: dict | None = None) -> dict:
    """Write the run directory. Returns ``{file name: path}``.

    ``traj`` may be ``None`` (kinematic scenarios), which gives a headered
    but empty budget file and no snapshots.
    """
    from . import __version__, _kernels
    from .config import config_dict, serialize_config

    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {d}: {exc.strerror}") from exc
    paths = {name: d / name for name in FILES}
    _write(paths["config.ini"], serialize_config(config))
    budgets = [] if traj is None else [r.budget for r in traj.records[1:]]
    dt = config.step.dt_tau
    _write(paths["budgets.csv"], _budget_csv(budgets, dt))
    lines = [] if traj is None else [SnapshotRecord.from_step(r).to_json() for r in traj.records]
    _write(paths["snapshots.jsonl"], "".join(line + "\n" for line in lines))
    rep = {} if report is None else report.as_dict()
    _write(paths["report.json"], json.dumps(rep, indent=2, sort_keys=True) + "\n")
    meta = {
        "package_version": __version__,
        "kernel_backend": _kernels.BACKEND,
        "budget_schema_version": BUDGET_SCHEMA_VERSION,
        "snapshot_schema_version": SNAPSHOT_SCHEMA_VERSION,
        "budget_columns": ["time"] + EnergyBudget.field_names(),
        "scenario": config.run.scenario,
        "seed": config.run.seed,
        "steps_completed": 0 if traj is None else len(traj.records) - 1,
        "abort_reason": None if traj is None else traj.abort_reason,
        "config": config_dict(config),
        "extra": extra or {},
        "sha256": {name: sha256_file(paths[name]) for name in FILES},
    }
    paths["metadata.json"] = d / "metadata.json"
    _write(paths["metadata.json"], json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return paths


def _jsonable(o):
    if isinstance(o, tuple):
        return list(o)
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


# -- readers --------------------------------------------------------------------
def read_metadata(directory) -> dict:
    path = Path(directory) / "metadata.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def check_integrity(directory) -> list:
    """Names of files whose SHA-256 differs from the metadata record."""
    meta = read_metadata(directory)
    bad = []
    for name, digest in meta.get("sha256", {}).items():
        p = Path(directory) / name
        if not p.exists() or sha256_file(p) != digest:
            bad.append(name)
    return bad


def verify_integrity(directory) -> None:
    """Raise IntegrityError if any recorded file hash does not match."""
    bad = check_integrity(directory)
    if bad:
        raise IntegrityError(f"hash mismatch in {', '.join(bad)}")


def read_budgets(path) -> list:
    """Budgets from a CSV written by :func:`write_outputs`."""
    names = EnergyBudget.field_names()
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["time"] + names:
            raise ValueError(f"{path}: unexpected budget columns")
        for row in rd:
            vals = dict(zip(names, row[1:]))
            out.append(EnergyBudget(**{k: (int(v) if k == "step" else float(v)) for k, v in vals.items()}))
    return out


def read_snapshots(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [SnapshotRecord.from_json(line) for line in fh if line.strip()]


def default_output_root() -> Path:
    return Path(os.environ.get("VARISLIP_OUTPUT_DIR", "varislip_runs"))
