"""Bit-exact volume and landmark file I/O.

Volumes live in a minimal self-describing format: a UTF-8 JSON header
``<name>.json`` (keys: dims, spacing, origin, dtype, data) next to a raw
little-endian payload, z-major with x fastest. Landmarks are plain
three-column CSV with optional ``#`` comment lines. No clinical formats are
parsed here; a converter script is documented in the README.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DomainError, VolumeFormatError

_DTYPES = {"float32": np.dtype("<f4"), "uint8": np.dtype("u1")}


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D grid with physical spacing.

    ``data`` has shape (nz, ny, nx) in C order, i.e. z-major with x fastest,
    matching the on-disk payload layout. ``origin`` is the world position
    (mm) of the center of voxel (0, 0, 0). Instances are immutable and safe
    to share across threads.
    """

    dims: tuple[int, int, int]          # (nx, ny, nz)
    spacing: tuple[float, float, float]  # mm per voxel
    origin: tuple[float, float, float]   # mm
    data: np.ndarray                     # (nz, ny, nx)
    dtype: str                           # "float32" | "uint8"

    def __post_init__(self):
        nx, ny, nz = self.dims
        if min(nx, ny, nz) <= 0:
            raise ContractError(f"dims must be positive, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ContractError(f"spacing must be positive, got {self.spacing}")
        if self.dtype not in _DTYPES:
            raise VolumeFormatError(f"unknown dtype {self.dtype!r}")
        data = np.ascontiguousarray(self.data, dtype=_DTYPES[self.dtype])
        if data.shape != (nz, ny, nx):
            raise ContractError(
                f"data shape {data.shape} does not match dims (nz,ny,nx)="
                f"{(nz, ny, nx)}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dims", (int(nx), int(ny), int(nz)))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical field-of-view per axis (dims * spacing), mm."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Voxel indices (n,3) in (x,y,z) order to world mm."""
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        """World mm (n,3) to continuous voxel coordinates (x,y,z)."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def same_grid(self, other: "Volume3D") -> bool:
        return (self.dims == other.dims and self.spacing == other.spacing
                and self.origin == other.origin)


def require_binary_mask(mask: Volume3D, name: str = "mask") -> None:
    """Masks must be uint8 volumes containing only {0, 1}."""
    if mask.dtype != "uint8":
        raise ContractError(f"{name} must be uint8, got {mask.dtype}")
    bad = (mask.data > 1)
    if bad.any():
        raise ContractError(f"{name} contains values outside {{0,1}}")


@dataclass(frozen=True)
class LandmarkSet:
    """World-space (mm) point list with optional per-point labels."""

    points: np.ndarray                   # (n, 3) float64, mm
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ContractError(f"points must be (n,3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractError("landmarks must be finite")
        if self.labels is not None and len(self.labels) != len(pts):
            raise ContractError("labels length must match points")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(self.labels))

    def __len__(self):
        return len(self.points)


def save_volume(v: Volume3D, path: str | os.PathLike) -> None:
    """Write ``<path>.json`` header and sibling raw payload.

    Output bytes are a pure function of the volume, so two saves of the
    same volume produce identical files.
    """
    path = os.fspath(path)
    if not path.endswith(".json"):
        path = path + ".json"
    payload_name = os.path.basename(path)[:-5] + ".raw"
    raw = np.ascontiguousarray(v.data, dtype=_DTYPES[v.dtype]).tobytes()
    header = {
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "origin": list(v.origin),
        "dtype": v.dtype,
        "data": payload_name,
        "payload_sha256": hashlib.sha256(raw).hexdigest(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(header, f, sort_keys=True)
        f.write("\n")
    with open(os.path.join(os.path.dirname(path) or ".", payload_name), "wb") as f:
        f.write(raw)


def load_volume(path: str | os.PathLike) -> Volume3D:
    """Load a volume from its JSON header; round-trips save_volume exactly."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            header = json.load(f)
        except json.JSONDecodeError as exc:
            raise VolumeFormatError(f"{path}: invalid JSON header: {exc}") from exc
    for key in ("dims", "spacing", "dtype", "data"):
        if key not in header:
            raise VolumeFormatError(f"{path}: header missing key {key!r}")
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing"])
    origin = tuple(float(o) for o in header.get("origin", (0.0, 0.0, 0.0)))
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unknown dtype {dtype!r}")
    if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
        raise VolumeFormatError(f"{path}: dims/spacing/origin must have 3 entries")

    payload_path = os.path.join(os.path.dirname(path) or ".", header["data"])
    if not os.path.exists(payload_path):
        raise IOError(f"{path}: payload {header['data']!r} not found")
    nx, ny, nz = dims
    expected = nx * ny * nz * _DTYPES[dtype].itemsize
    with open(payload_path, "rb") as f:
        raw = f.read()
    if len(raw) != expected:
        raise IOError(
            f"{payload_path}: expected {expected} bytes, got {len(raw)}")
    want = header.get("payload_sha256")
    if want is not None and hashlib.sha256(raw).hexdigest() != want:
        raise VolumeFormatError(
            f"{payload_path}: payload sha256 mismatch against the header; "
            "the file pair is corrupt or mismatched")
    data = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(nz, ny, nx)
    return Volume3D(dims=dims, spacing=spacing, origin=origin, data=data,
                    dtype=dtype)


def load_landmarks(path: str | os.PathLike, mode: str = "world-mm",
                   ref: Volume3D | None = None) -> LandmarkSet:
    """Read a 3-column CSV of points.

    mode "voxel-index": rows are voxel indices of ``ref`` and are converted
    to world mm as origin + index * spacing. mode "world-mm": rows pass
    through unchanged.
    """
    if mode not in ("voxel-index", "world-mm"):
        raise ContractError(f"unknown landmark mode {mode!r}")
    if mode == "voxel-index" and ref is None:
        raise ContractError("voxel-index mode requires a reference volume")
    rows = []
    with open(os.fspath(path), "r", encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) < 3:
                raise DomainError(f"{path}:{lineno}: expected 3 columns")
            try:
                rows.append([float(row[0]), float(row[1]), float(row[2])])
            except ValueError as exc:
                raise DomainError(f"{path}:{lineno}: non-numeric row") from exc
    pts = np.asarray(rows, dtype=np.float64).reshape(-1, 3)
    if mode == "voxel-index":
        pts = ref.voxel_to_world(pts)
    return LandmarkSet(points=pts)


def save_landmarks(lm: LandmarkSet, path: str | os.PathLike,
                   extra_columns: dict[str, np.ndarray] | None = None) -> None:
    """Write world-mm landmarks as CSV, optionally with extra named columns."""
    extra = extra_columns or {}
    for name, col in extra.items():
        if len(col) != len(lm):
            raise ContractError(f"extra column {name!r} length mismatch")
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as f:
        header = ["x_mm", "y_mm", "z_mm"] + list(extra)
        f.write("# " + ",".join(header) + "\n")
        for i, p in enumerate(lm.points):
            cells = [repr(float(c)) for c in p]
            cells += [repr(float(extra[name][i])) for name in extra]
            f.write(",".join(cells) + "\n")
