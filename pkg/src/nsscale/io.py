"""Snapshot and trajectory persistence.

A snapshot file is one line of JSON followed by raw little-endian float64
arrays.  The header carries ``dim``, ``n_per_axis``, ``box_length``,
``time``, ``fields`` (component names), ``dtype`` (always ``"f64le"``) and
``layout`` (always ``"row-major"``).  Extra keys, such as frame metadata, are
preserved.  Writes go to a temporary file that is renamed into place, so a
crashed writer never leaves a file that passes :func:`read_snapshot`.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .fields import Grid, VectorField

__all__ = [
    "SnapshotFormatError",
    "write_snapshot",
    "read_snapshot",
    "write_vector_field",
    "read_vector_field",
    "save_trajectory",
    "load_trajectory",
    "atomic_write_text",
]

REQUIRED_KEYS = ("dim", "n_per_axis", "box_length", "time", "fields", "dtype", "layout")
COMPONENTS = ("u", "v", "w")


class SnapshotFormatError(ValueError):
    """Raised for malformed, truncated or unsupported snapshot files."""


def _atomic_write_bytes(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def atomic_write_text(path, text):
    _atomic_write_bytes(path, text.encode("utf-8"))


def write_snapshot(path, grid, arrays, time=0.0, names=None, metadata=None):
    """Write named real arrays sharing one grid.

    ``arrays`` is a sequence of arrays; each is stored row-major.  Arrays
    whose shape differs from ``grid.shape`` get their shape recorded in the
    optional ``shapes`` header entry.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    names = list(names) if names is not None else [f"f{i}" for i in range(len(arrays))]
    if len(names) != len(arrays):
        raise ValueError("one name per array is required")
    header = {
        "dim": grid.dim,
        "n_per_axis": grid.n,
        "box_length": grid.length,
        "time": float(time),
        "fields": names,
        "dtype": "f64le",
        "layout": "row-major",
    }
    shapes = [list(a.shape) for a in arrays]
    if any(tuple(s) != grid.shape for s in shapes):
        header["shapes"] = shapes
    if metadata:
        clash = set(metadata) & set(header)
        if clash:
            raise ValueError(f"metadata may not override {sorted(clash)}")
        header.update(metadata)
    line = json.dumps(header, sort_keys=True, allow_nan=False).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    _atomic_write_bytes(path, line + body)


def read_snapshot(path):
    """Read a snapshot; returns ``(grid, header, arrays)``."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise SnapshotFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(header, dict):
        raise SnapshotFormatError(f"{path}: header is not a JSON object")
    missing = [k for k in REQUIRED_KEYS if k not in header]
    if missing:
        raise SnapshotFormatError(f"{path}: header lacks {missing}")
    if header["dtype"] != "f64le":
        raise SnapshotFormatError(f"{path}: unsupported dtype {header['dtype']!r}, only 'f64le' is supported")
    if header["layout"] != "row-major":
        raise SnapshotFormatError(f"{path}: unsupported layout {header['layout']!r}")
    try:
        grid = Grid(header["dim"], header["n_per_axis"], header["box_length"])
    except (TypeError, ValueError) as exc:
        raise SnapshotFormatError(f"{path}: invalid grid ({exc})") from None
    names = header["fields"]
    shapes = header.get("shapes", [list(grid.shape)] * len(names))
    if len(shapes) != len(names):
        raise SnapshotFormatError(f"{path}: shapes do not match fields")
    sizes = [int(np.prod(s)) for s in shapes]
    body = raw[newline + 1 :]
    expected = 8 * sum(sizes)
    if len(body) != expected:
        raise SnapshotFormatError(f"{path}: size mismatch, expected {expected} data bytes, found {len(body)}")
    flat = np.frombuffer(body, dtype="<f8")
    arrays, offset = [], 0
    for size, shape in zip(sizes, shapes):
        arrays.append(flat[offset : offset + size].astype(np.float64).reshape(shape))
        offset += size
    return grid, header, arrays


def write_vector_field(path, field, time=0.0, metadata=None):
    names = list(COMPONENTS[: field.grid.dim])
    write_snapshot(path, field.grid, list(field.data), time=time, names=names, metadata=metadata)


def read_vector_field(path):
    """Read a velocity snapshot; returns ``(field, time, header)``."""
    grid, header, arrays = read_snapshot(path)
    if len(arrays) != grid.dim or any(a.shape != grid.shape for a in arrays):
        raise SnapshotFormatError(f"{path}: expected {grid.dim} velocity components")
    divfree = bool(header.get("divfree", True))
    return VectorField(grid, np.stack(arrays), divfree=divfree), float(header["time"]), header


def save_trajectory(traj, directory):
    """Persist a trajectory as numbered snapshots plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (t, u) in enumerate(zip(traj.times, traj.snapshots)):
        name = f"snapshot_{i:05d}.bin"
        write_vector_field(directory / name, u, time=t)
        files.append(name)
    manifest = {
        "config": traj.config.to_dict(),
        "times": [float(t) for t in traj.times],
        "initial_energy": float(traj.initial_energy),
        "seed": traj.seed,
        "snapshots": files,
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return directory / "manifest.json"


def load_trajectory(directory):
    from .solver import SolverConfig, Trajectory

    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    snaps = []
    for name in manifest["snapshots"]:
        u, _, _ = read_vector_field(directory / name)
        snaps.append(u)
    if not snaps:
        raise SnapshotFormatError(f"{directory}: trajectory has no snapshots")
    return Trajectory(
        grid=snaps[0].grid,
        times=np.asarray(manifest["times"], dtype=float),
        snapshots=tuple(snaps),
        config=SolverConfig(**manifest["config"]),
        initial_energy=manifest["initial_energy"],
        seed=manifest.get("seed"),
    )
