"""Synthetic registration phantoms with analytic ground truth.

A phantom is a pair of volumes related by a closed-form deformation
Phi(x) = x + u(x) (world mm). The fixed image samples an analytic
band-limited cosine texture T at voxel centers; the moving image samples
T at Phi^{-1}(voxel center), where the inverse is found by Newton
iteration on the analytic field. Because the texture is a continuous
function, the moving image is exact to float precision rather than
resampling-limited, and amplitude 0 reproduces the fixed image bytes.

Three field kinds cover the spectrum the engine must survive:

* ``sinusoid``               - smooth, low-frequency, global (easy).
* ``gaussian_compression``   - localized radial squeeze with high strain
                               near the center (adversarial near the
                               invertibility limit).
* ``piecewise_contraction``  - sharp tanh contraction toward a plane,
                               approximating a piecewise/sliding motion.

Fields are checked for invertibility on the grid (min det(I + grad u)
must exceed 0.05) before any volume is rendered.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import PhantomParameterError
from .linalg3 import det3, inv3
from .rng import ROLE_PHANTOM, make_rng
from .volume_io import LandmarkSet, Volume3D

PHANTOM_KINDS = ("sinusoid", "gaussian_compression", "piecewise_contraction")
MIN_DET = 0.05
N_LANDMARKS = 100
LANDMARK_GROUPS = 10
_TEX_WAVES = 48


@dataclass(frozen=True)
class Phantom:
    fixed: Volume3D
    moving: Volume3D
    mask: Volume3D
    landmarks_fixed: LandmarkSet
    landmarks_moving: LandmarkSet
    kind: str
    amplitude_mm: float
    seed: int
    field: Callable            # world mm (n,3) -> displacement mm (n,3)
    field_jac: Callable        # world mm (n,3) -> (n,3,3) du/dp
    true_field: dict           # disp_x/disp_y/disp_z rasters, mm float32

    def phi(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        return p + self.field(p)


def _make_texture(rng: np.random.Generator):
    """Sum of random cosines with wavelengths in the 6..16 mm band."""
    lam = rng.uniform(6.0, 16.0, _TEX_WAVES)
    dirs = rng.normal(size=(_TEX_WAVES, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    kvec = (2.0 * np.pi / lam)[:, None] * dirs
    phase = rng.uniform(0.0, 2.0 * np.pi, _TEX_WAVES)
    amp = rng.uniform(0.5, 1.0, _TEX_WAVES)

    def texture(p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        return np.cos(p @ kvec.T + phase) @ amp

    return texture


def _sinusoid_field(extent, amplitude, rng):
    """Three global sinusoids, about one cycle across the field of view."""
    coef = rng.uniform(0.5, 1.1, size=(3, 3)) * np.where(
        rng.random((3, 3)) < 0.5, -1.0, 1.0)
    phase = rng.uniform(0.0, 2.0 * np.pi, 3)
    amp = amplitude / np.sqrt(3.0) * rng.uniform(0.8, 1.0, 3)
    freq = 2.0 * np.pi * coef / extent[None, :]

    def u(p):
        p = np.atleast_2d(p)
        return np.sin(p @ freq.T + phase) * amp

    def ju(p):
        p = np.atleast_2d(p)
        c = np.cos(p @ freq.T + phase) * amp
        return c[:, :, None] * freq[None, :, :]

    return u, ju


def _gaussian_compression_field(extent, amplitude, rng):
    """Radial squeeze toward a point; peak displacement ~amplitude at r=sigma."""
    center = extent * rng.uniform(0.42, 0.58, 3)
    sigma = float(extent.min()) / 6.0
    scale = amplitude * np.exp(0.5)

    def u(p):
        p = np.atleast_2d(p)
        q = (p - center) / sigma
        g = np.exp(-0.5 * np.sum(q * q, axis=1))
        return -scale * q * g[:, None]

    def ju(p):
        p = np.atleast_2d(p)
        q = (p - center) / sigma
        g = np.exp(-0.5 * np.sum(q * q, axis=1))
        eye = np.eye(3)[None]
        outer = q[:, :, None] * q[:, None, :]
        return (-scale / sigma) * g[:, None, None] * (eye - outer)

    return u, ju


def _piecewise_contraction_field(extent, amplitude, rng):
    """Sharp tanh contraction toward a plane, enveloped in the cross-plane."""
    cx = float(extent[0]) * rng.uniform(0.42, 0.58)
    cyz = extent[1:] * rng.uniform(0.42, 0.58, 2)
    w = float(extent[0]) / 10.0
    rho = float(min(extent[1], extent[2])) / 4.0

    def _parts(p):
        p = np.atleast_2d(p)
        t = (p[:, 0] - cx) / w
        d = (p[:, 1:] - cyz) / rho
        env = np.exp(-0.5 * np.sum(d * d, axis=1))
        return p, t, d, env

    def u(p):
        p, t, d, env = _parts(p)
        out = np.zeros_like(p)
        out[:, 0] = -amplitude * np.tanh(t) * env
        return out

    def ju(p):
        p, t, d, env = _parts(p)
        th = np.tanh(t)
        j = np.zeros((p.shape[0], 3, 3))
        j[:, 0, 0] = -amplitude * (1.0 - th * th) / w * env
        j[:, 0, 1] = amplitude * th * env * d[:, 0] / rho
        j[:, 0, 2] = amplitude * th * env * d[:, 1] / rho
        return j

    return u, ju


_FIELDS = {
    "sinusoid": _sinusoid_field,
    "gaussian_compression": _gaussian_compression_field,
    "piecewise_contraction": _piecewise_contraction_field,
}


def _invert_field(u, ju, y: np.ndarray, tol=1e-11, max_iter=60) -> np.ndarray:
    """Solve x + u(x) = y by the Newton iteration, vectorized over points."""
    x = y.copy()
    for _ in range(max_iter):
        r = x + u(x) - y
        worst = np.max(np.abs(r))
        if worst < tol:
            break
        j = np.eye(3)[None] + ju(x)
        step = np.einsum("nij,nj->ni", inv3(j), r)
        x = x - step
    else:
        raise PhantomParameterError(
            f"field inversion did not converge (residual {worst:.3e} mm)")
    return x


def _voxel_centers_world(dims, spacing, origin):
    nx, ny, nz = dims
    zi, yi, xi = np.unravel_index(np.arange(nx * ny * nz), (nz, ny, nx))
    idx = np.stack([xi, yi, zi], axis=1).astype(np.float64)
    return idx * np.asarray(spacing) + np.asarray(origin)


def generate_phantom(kind: str, size, amplitude_mm: float, seed: int,
                     spacing=(1.0, 1.0, 1.0)) -> Phantom:
    """Build a deterministic phantom; same arguments give identical bytes.

    ``size`` is the voxel count per axis (int for a cube). The requested
    field is rejected (PhantomParameterError) if its Jacobian determinant
    drops to MIN_DET anywhere on the grid.
    """
    if kind not in _FIELDS:
        raise PhantomParameterError(
            f"unknown phantom kind {kind!r}; have {PHANTOM_KINDS}")
    if np.isscalar(size):
        dims = (int(size),) * 3
    else:
        dims = tuple(int(s) for s in size)
    if min(dims) < 4:
        raise PhantomParameterError("phantom needs at least 4 voxels per axis")
    if amplitude_mm < 0:
        raise PhantomParameterError("amplitude must be nonnegative")
    spacing = tuple(float(s) for s in spacing)
    origin = (0.0, 0.0, 0.0)
    extent = np.array([d * s for d, s in zip(dims, spacing)])

    rng = make_rng(seed, ROLE_PHANTOM)
    texture = _make_texture(rng)
    u, ju = _FIELDS[kind](extent, float(amplitude_mm), rng)

    world = _voxel_centers_world(dims, spacing, origin)
    dets = det3(np.eye(3)[None] + ju(world))
    mindet = float(dets.min())
    if mindet <= MIN_DET:
        at = world[int(dets.argmin())]
        raise PhantomParameterError(
            f"{kind} field with amplitude {amplitude_mm} mm folds: min "
            f"det(grad Phi) = {mindet:.4f} <= {MIN_DET} at ({at[0]:.1f}, "
            f"{at[1]:.1f}, {at[2]:.1f}) mm")

    nx, ny, nz = dims
    fixed_vals = texture(world).astype(np.float32)
    fixed = Volume3D(dims=dims, spacing=spacing, origin=origin,
                     data=fixed_vals.reshape(nz, ny, nx), dtype="float32")
    if amplitude_mm == 0.0:
        moving_vals = fixed_vals
    else:
        src = _invert_field(u, ju, world)
        moving_vals = texture(src).astype(np.float32)
    moving = Volume3D(dims=dims, spacing=spacing, origin=origin,
                      data=moving_vals.reshape(nz, ny, nx), dtype="float32")

    # ellipsoidal foreground, comfortably inside the border
    center = (np.asarray(dims, dtype=np.float64) - 1.0) * np.asarray(spacing) / 2.0
    semi = 0.42 * extent
    q = (world - center) / semi
    inside = (np.sum(q * q, axis=1) <= 1.0).astype(np.uint8)
    mask = Volume3D(dims=dims, spacing=spacing, origin=origin,
                    data=inside.reshape(nz, ny, nx), dtype="uint8")

    # 100 landmarks uniform in a shrunken ellipsoid, grouped z-wise so each
    # group of 10 is spatially coherent (segment surrogate for consensus
    # statistics)
    pts = []
    need = N_LANDMARKS
    while need > 0:
        cand = center + (rng.uniform(-1.0, 1.0, (4 * need, 3)) * 0.85 * semi)
        r2 = np.sum(((cand - center) / (0.85 * semi)) ** 2, axis=1)
        keep = cand[r2 <= 1.0][:need]
        pts.append(keep)
        need -= keep.shape[0]
    pts = np.concatenate(pts, axis=0)
    order = np.lexsort((pts[:, 0], pts[:, 1], pts[:, 2]))
    pts = pts[order]
    group = N_LANDMARKS // LANDMARK_GROUPS
    labels = [f"g{i // group}" for i in range(N_LANDMARKS)]
    lm_fixed = LandmarkSet(points=pts, labels=labels)
    lm_moving = LandmarkSet(points=pts + u(pts), labels=labels)

    tf = {}
    disp = u(world)
    for axis, name in enumerate(("disp_x", "disp_y", "disp_z")):
        tf[name] = Volume3D(dims=dims, spacing=spacing, origin=origin,
                            data=disp[:, axis].reshape(nz, ny, nx)
                            .astype(np.float32), dtype="float32")

    return Phantom(fixed=fixed, moving=moving, mask=mask,
                   landmarks_fixed=lm_fixed, landmarks_moving=lm_moving,
                   kind=kind, amplitude_mm=float(amplitude_mm),
                   seed=int(seed), field=u, field_jac=ju, true_field=tf)
