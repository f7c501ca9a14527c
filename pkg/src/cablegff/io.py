"""Binary persistence for fields, Green tables and trajectory dumps.

All binary formats are little-endian and start with a four-byte magic and a
``u32`` version. Each binary file has a JSON sidecar at ``<path>.json``.

``GFF1``  ``u8`` dim, ``dim`` x ``u64`` extents, then ``f64`` values row-major.
``GRN1``  ``u8`` dim, ``u64`` count, ``count`` x ``i64`` packed keys, ``count`` x ``f64`` values.
``ITL1``  ``u8`` dim, ``u64`` segment count, then per segment ``u64`` trajectory
          id, ``dim`` x ``i64`` start, ``f64`` label, ``u64`` step count and
          that many ``u8`` step codes.
"""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .lattice import Box

VERSION = 1

__all__ = [
    "FormatError",
    "write_field",
    "read_field",
    "write_green_table",
    "read_green_table",
    "write_trajectories",
    "read_trajectories",
    "write_json",
    "write_csv",
]


class FormatError(ValueError):
    """Malformed, truncated or mismatched binary file."""


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def _open(path, magic: bytes) -> _Reader:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def _finish(r: _Reader):
    if r.pos != len(r.data):
        raise FormatError(f"{r.path}: {len(r.data) - r.pos} trailing bytes")


def _atomic_write(path, payload: bytes):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------

def write_field(path, field) -> None:
    """Write a :class:`~cablegff.gff.VertexField` in ``GFF1`` format plus sidecar."""
    box = field.box
    head = b"GFF1" + struct.pack("<IB", VERSION, box.dim) + struct.pack(f"<{box.dim}Q", *box.shape)
    body = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    _atomic_write(path, head + body)
    meta = {"lo": list(box.lo), "slab": None if box.slab is None else list(box.slab)}
    meta.update({k: v for k, v in field.meta.items() if _jsonable(v)})
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_field(path):
    """Read a ``GFF1`` file; the sidecar, when present, restores the box origin and metadata."""
    from .gff import VertexField

    r = _open(path, b"GFF1")
    (dim,) = r.unpack("<B")
    shape = r.unpack(f"<{dim}Q")
    count = int(np.prod(shape, dtype=np.int64))
    vals = r.array("<f8", count).astype(float)
    _finish(r)
    meta = {}
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
    lo = tuple(int(a) for a in meta.pop("lo", [0] * dim))
    slab = meta.pop("slab", None)
    box = Box(lo, tuple(a + int(s) for a, s in zip(lo, shape)), None if slab is None else tuple(slab))
    return VertexField(box, vals.reshape(shape), meta)


# ---------------------------------------------------------------------------
# Green tables
# ---------------------------------------------------------------------------

def write_green_table(path, table) -> None:
    n = table._keys.size
    head = b"GRN1" + struct.pack("<IBQ", VERSION, table.d, n)
    body = table._keys.astype("<i8").tobytes() + table._vals.astype("<f8").tobytes()
    _atomic_write(path, head + body)
    _sidecar(path).write_text(json.dumps({"d": table.d, "tol": table.tol, "entries": int(n)}, indent=1))


def read_green_table(path):
    from .greens import GreenTable

    r = _open(path, b"GRN1")
    d, n = r.unpack("<BQ")
    keys = r.array("<i8", n).astype(np.int64)
    vals = r.array("<f8", n).astype(float)
    _finish(r)
    tol = 1e-8
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if int(meta.get("d", d)) != d:
            raise FormatError(f"{path}: sidecar dimension {meta['d']} disagrees with header {d}")
        tol = float(meta.get("tol", tol))
    if np.any(np.diff(keys) <= 0):
        raise FormatError(f"{path}: keys not strictly increasing")
    t = GreenTable(d, tol)
    t._keys, t._vals = keys, vals
    return t


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def write_trajectories(path, sample) -> None:
    """Dump an :class:`~cablegff.interlace.InterlacementSample` as ``ITL1``.

    One record per segment: ``u64`` trajectory id, ``dim`` x ``i64`` start,
    ``f64`` label, ``u64`` step count, step codes.
    """
    d = sample.dim
    parts = [b"ITL1", struct.pack("<IBQ", VERSION, d, sample.segment_count)]
    for s in range(sample.segment_count):
        t = int(sample.seg_traj[s])
        steps = sample.steps_of_segment(s)
        parts.append(struct.pack("<Q", t))
        parts.append(struct.pack(f"<{d}q", *(int(a) for a in sample.seg_start[s])))
        parts.append(struct.pack("<dQ", float(sample.labels[t]), steps.size))
        parts.append(steps.astype(np.uint8).tobytes())
    _atomic_write(path, b"".join(parts))
    manifest = {"u": sample.u, "cap": sample.capacity, "seed": sample.seed,
                "halo": sample.halo.to_json(), "window": sample.window.to_json(),
                "key": sample.key.to_json(), "trajectories": sample.count,
                "max_return_probability": sample.max_return}
    _sidecar(path).write_text(json.dumps(manifest, sort_keys=True, indent=1))


def read_trajectories(path) -> dict:
    """Read an ``ITL1`` dump into plain arrays plus the manifest."""
    r = _open(path, b"ITL1")
    d, n = r.unpack("<BQ")
    traj = np.zeros(n, dtype=np.int64)
    starts = np.zeros((n, d), dtype=np.int64)
    labels = np.zeros(n)
    steps = []
    for k in range(n):
        (traj[k],) = r.unpack("<Q")
        starts[k] = r.unpack(f"<{d}q")
        labels[k], m = r.unpack("<dQ")
        steps.append(r.array("u1", m))
    _finish(r)
    side = _sidecar(path)
    manifest = json.loads(side.read_text()) if side.exists() else {}
    return {"dim": d, "trajectory": traj, "starts": starts, "labels": labels, "steps": steps,
            "manifest": manifest}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_json"):
        return o.to_json()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, default=_default, sort_keys=True, indent=1, allow_nan=True)


def write_json(path, obj) -> None:
    _atomic_write(path, dumps(obj).encode())


def write_csv(path, rows, columns) -> None:
    """CSV with a header row; ``rows`` is a list of dicts (missing keys left blank)."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: _default(v) if isinstance(v, (np.generic, np.ndarray)) else v
                        for k, v in row.items()})
