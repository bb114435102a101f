"""Coordinate handling: normalized cube, foreground sampling, interpolation.

The networks operate on coordinates rescaled to the [-1, 1] cube. A
``NormTransform`` is the affine map ``norm = scale * world + offset`` per
axis. With isotropic scaling the largest physical extent spans [-1, 1] and
shorter axes occupy a centered sub-interval (virtual zero padding), so one
millimetre is the same normalized distance along every axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import DomainError
from .volume_io import Volume3D, require_binary_mask


@dataclass(frozen=True)
class NormTransform:
    """Affine map between world mm and normalized units, per axis."""

    scale: np.ndarray      # (3,) normalized units per mm
    offset: np.ndarray     # (3,)
    padded_extent: np.ndarray  # (3,) mm, extent after virtual padding

    def __post_init__(self):
        for name in ("scale", "offset", "padded_extent"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != (3,) or not np.all(np.isfinite(a)):
                raise DomainError(f"NormTransform.{name} must be 3 finite reals")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if not np.all(self.scale > 0):
            raise DomainError("NormTransform.scale must be positive")

    def world_to_norm(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) * self.scale + self.offset

    def norm_to_world(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.offset) / self.scale

    def to_dict(self) -> dict:
        return {"scale": self.scale.tolist(), "offset": self.offset.tolist(),
                "padded_extent": self.padded_extent.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormTransform":
        return cls(scale=np.array(d["scale"]), offset=np.array(d["offset"]),
                   padded_extent=np.array(d["padded_extent"]))


@dataclass(frozen=True)
class CoordBatch:
    """A batch of sampled coordinates in normalized units."""

    coords: np.ndarray            # (n, 3) float64 in [-1, 1]
    domain: str                   # "source" | "target"
    provenance: str = ""          # seed / role the batch was drawn with

    def __post_init__(self):
        c = np.ascontiguousarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise DomainError("CoordBatch.coords must have shape (n, 3)")
        if not np.all(np.isfinite(c)):
            raise DomainError("CoordBatch.coords must be finite")
        if c.size and (c.min() < -1.0 or c.max() > 1.0):
            raise DomainError("CoordBatch.coords must lie in [-1, 1]^3")
        if self.domain not in ("source", "target"):
            raise DomainError(f"unknown domain tag {self.domain!r}")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return self.coords.shape[0]


def make_norm_transform(v: Volume3D, isotropic: bool = True) -> NormTransform:
    """Build the world->normalized map for a volume's field of view.

    The field of view spans ``dims * spacing`` mm centered on the voxel
    grid. Isotropic mode divides all axes by the largest extent so the cube
    is shared and distances are direction-independent; otherwise each axis
    is stretched to [-1, 1] on its own.
    """
    extent = np.asarray(v.extent_mm, dtype=np.float64)
    if not np.all(extent > 0):
        raise DomainError("volume extent must be positive on all axes")
    if isotropic:
        padded = np.full(3, float(extent.max()))
    else:
        padded = extent
    scale = 2.0 / padded
    spacing = np.asarray(v.spacing, dtype=np.float64)
    center = (np.asarray(v.origin, dtype=np.float64)
              + (np.asarray(v.dims, dtype=np.float64) - 1.0) * spacing / 2.0)
    offset = -scale * center
    return NormTransform(scale=scale, offset=offset, padded_extent=padded)


def sample_foreground(mask: Volume3D, n: int, rng: np.random.Generator,
                      t: NormTransform, domain: str,
                      provenance: str = "") -> CoordBatch:
    """Draw n voxel-center coordinates uniformly from the foreground.

    Sampling is with replacement; the result is a pure function of
    (mask contents, n, rng state). Coordinates are returned in normalized
    units under ``t``.
    """
    require_binary_mask(mask)
    flat = np.flatnonzero(mask.data.reshape(-1))
    if flat.size == 0:
        raise DomainError("foreground mask is empty")
    pick = flat[rng.integers(0, flat.size, size=int(n))]
    nz, ny, nx = mask.data.shape
    zi, yi, xi = np.unravel_index(pick, (nz, ny, nx))
    idx = np.stack([xi, yi, zi], axis=1).astype(np.float64)
    world = mask.voxel_to_world(idx)
    return CoordBatch(coords=t.world_to_norm(world), domain=domain,
                      provenance=provenance)


def coords_to_voxel(v: Volume3D, coords: np.ndarray,
                    t: NormTransform) -> np.ndarray:
    """Map normalized coordinates to (x, y, z) voxel units of ``v``."""
    return v.world_to_voxel(t.norm_to_world(coords))


def trilinear_sample(v: Volume3D, coords: np.ndarray, t: NormTransform):
    """Interpolate ``v`` at normalized coordinates.

    Returns (values (n,), gradient (n, 3)) with the gradient expressed per
    normalized unit (chain rule through ``t`` and the voxel spacing).
    Out-of-bounds queries clamp to the border voxel and the gradient
    component across a clamped axis is zero.
    """
    coords = np.atleast_2d(np.asarray(coords, dtype=np.float64))
    vox = coords_to_voxel(v, coords, t)
    vals, grad_vox = backend.trilinear(v.data, vox)
    grad_norm = grad_vox / (t.scale * np.asarray(v.spacing))
    return vals, grad_norm
