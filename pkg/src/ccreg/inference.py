"""Consensus inference: forward estimate, Taylor-inverted backward estimate,
their midpoint, and the disagreement norm as an uncertainty map.

For a query x in the target domain the forward network gives
fwd = Phi_F(x). The backward network is numerically inverted around
z = Phi_B(fwd) by a second-order Taylor expansion:

    inv_b = fwd + J^{-1} d - 1/2 J^{-1} H[J^{-1} d, J^{-1} d],  d = x - z

with J, H the Jacobian/Hessian of Phi_B at fwd. This is the exact
second-order expansion of the inverse function, so the residual error is
third order in ||d||. Samples with ill-conditioned J are flagged degenerate
and surface with saturated uncertainty rather than exploding estimates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import backend
from .errors import ContractError
from .linalg3 import cond2, det3, inv3
from .siren import SpatialEval, eval_spatial
from .training import InrPair
from .volume_io import LandmarkSet, Volume3D

DEGENERATE_COND = 1e6
UNCERTAINTY_CAP_MM = 10.0
_CHUNK = 2048


class DeformationSample(NamedTuple):
    x: np.ndarray
    fwd: np.ndarray
    inv_b: np.ndarray
    mid: np.ndarray
    uncertainty_mm: float
    degenerate: bool


@dataclass
class DeformationBatch:
    """Vectorized cc_transform result; index for per-sample views."""

    x: np.ndarray               # (n, 3) queries, target-domain normalized
    fwd: np.ndarray             # (n, 3) Phi_F(x)
    inv_b: np.ndarray           # (n, 3) inverted-backward estimate
    mid: np.ndarray             # (n, 3) consensus midpoint
    uncertainty_mm: np.ndarray  # (n,)
    degenerate: np.ndarray      # (n,) bool

    def __len__(self) -> int:
        return self.x.shape[0]

    def __getitem__(self, i: int) -> DeformationSample:
        return DeformationSample(self.x[i], self.fwd[i], self.inv_b[i],
                                 self.mid[i], float(self.uncertainty_mm[i]),
                                 bool(self.degenerate[i]))


def taylor_invert(x: np.ndarray, fwd: np.ndarray, ev_b: SpatialEval,
                  cond_threshold: float = DEGENERATE_COND):
    """Second-order inverse estimate from a Phi_B evaluation at fwd.

    ``ev_b`` must be an order-2 evaluation of the backward network at the
    forward estimates. Returns (inv_b, degenerate); degenerate samples fall
    back to the forward estimate so downstream midpoints stay finite.
    """
    if ev_b.hess is None:
        raise ContractError("taylor_invert needs an order-2 evaluation")
    x = np.asarray(x, dtype=np.float64)
    d = x - ev_b.phi
    j = ev_b.jac
    degenerate = ~np.isfinite(j).all(axis=(1, 2))
    cond = np.where(degenerate, np.inf, cond2(np.where(
        np.isfinite(j), j, 0.0)))
    degenerate |= cond > cond_threshold
    det = det3(j)
    safe_j = np.where(degenerate[:, None, None], np.eye(3)[None], j)
    jinv = inv3(safe_j)
    v = np.einsum("nij,nj->ni", jinv, d)
    hvv = np.einsum("nkij,ni,nj->nk", ev_b.hess, v, v)
    corr = v - 0.5 * np.einsum("nij,nj->ni", jinv, hvv)
    inv_b = fwd + corr
    bad = degenerate | ~np.isfinite(inv_b).all(axis=1)
    inv_b = np.where(bad[:, None], fwd, inv_b)
    return inv_b, bad


def cc_transform(pair: InrPair, x, cond_threshold: float = DEGENERATE_COND,
                 cap_mm: float = UNCERTAINTY_CAP_MM,
                 chunk: int = _CHUNK) -> DeformationBatch:
    """Consensus estimates for queries in the target domain (normalized).

    The uncertainty is the physical-space norm of fwd - inv_b, converted to
    mm through the source-domain transform and clipped at ``cap_mm``;
    degenerate samples are pinned to the cap.
    """
    if pair.backward is None:
        raise ContractError("cc_transform needs a trained backward network")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    fwd = np.empty((n, 3))
    inv_b = np.empty((n, 3))
    degen = np.empty(n, dtype=bool)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        xc = x[s:e]
        f = eval_spatial(pair.forward, xc, order=0).phi
        ev_b = eval_spatial(pair.backward, f, order=2)
        ib, dg = taylor_invert(xc, f, ev_b, cond_threshold)
        fwd[s:e] = f
        inv_b[s:e] = ib
        degen[s:e] = dg
    diff_mm = (fwd - inv_b) / pair.t_source.scale
    unc = np.linalg.norm(diff_mm, axis=1)
    unc = np.minimum(unc, cap_mm)
    unc[degen] = cap_mm
    mid = (fwd + inv_b) / 2.0
    return DeformationBatch(x=x, fwd=fwd, inv_b=inv_b, mid=mid,
                            uncertainty_mm=unc, degenerate=degen)


def invert_backward(pair: InrPair, x,
                    cond_threshold: float = DEGENERATE_COND):
    """Invert Phi_B at target-domain queries; see taylor_invert."""
    if pair.backward is None:
        raise ContractError("invert_backward needs a backward network")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fwd = eval_spatial(pair.forward, x, order=0).phi
    ev_b = eval_spatial(pair.backward, fwd, order=2)
    return taylor_invert(x, fwd, ev_b, cond_threshold)


def _grid_world_coords(grid: Volume3D, zi, yi, xi) -> np.ndarray:
    idx = np.stack([xi, yi, zi], axis=1).astype(np.float64)
    return grid.voxel_to_world(idx)


def dense_field(pair: InrPair, grid: Volume3D, roi: Volume3D | None = None,
                cond_threshold: float = DEGENERATE_COND,
                cap_mm: float = UNCERTAINTY_CAP_MM) -> dict[str, Volume3D]:
    """Rasterize consensus displacements and uncertainty over a voxel grid.

    Returns volumes keyed disp_x/disp_y/disp_z (mm, float32) and
    uncertainty (mm, float32). Voxels outside ``roi`` are zero. The
    displacement maps a target voxel's world position to the consensus
    source-domain world position.
    """
    nz, ny, nx = grid.data.shape
    if roi is not None:
        if not roi.same_grid(grid):
            raise ContractError("roi grid does not match the field grid")
        sel = roi.data.reshape(-1).astype(bool)
    else:
        sel = np.ones(nz * ny * nx, dtype=bool)
    zi, yi, xi = np.unravel_index(np.flatnonzero(sel), (nz, ny, nx))
    world_t = _grid_world_coords(grid, zi, yi, xi)
    xn = pair.t_target.world_to_norm(world_t)
    batch = cc_transform(pair, xn, cond_threshold, cap_mm)
    world_s = pair.t_source.norm_to_world(batch.mid)
    disp = world_s - world_t

    out = {}
    names = ("disp_x", "disp_y", "disp_z")
    for axis, name in enumerate(names):
        flat = np.zeros(nz * ny * nx, dtype=np.float64)
        flat[sel] = disp[:, axis]
        out[name] = Volume3D(dims=grid.dims, spacing=grid.spacing,
                             origin=grid.origin,
                             data=flat.reshape(nz, ny, nx).astype(np.float32),
                             dtype="float32")
    flat = np.zeros(nz * ny * nx, dtype=np.float64)
    flat[sel] = batch.uncertainty_mm
    out["uncertainty"] = Volume3D(dims=grid.dims, spacing=grid.spacing,
                                  origin=grid.origin,
                                  data=flat.reshape(nz, ny, nx).astype(np.float32),
                                  dtype="float32")
    return out


def warp_image(moving: Volume3D, field: dict[str, Volume3D]) -> Volume3D:
    """Resample ``moving`` through a displacement field (mm, target grid).

    Per target voxel, trilinear-samples moving at world + displacement with
    border clamp. The field dict must carry disp_x/disp_y/disp_z volumes on
    one shared grid.
    """
    fx, fy, fz = field["disp_x"], field["disp_y"], field["disp_z"]
    if not (fx.same_grid(fy) and fx.same_grid(fz)):
        raise ContractError("displacement component grids differ")
    grid = fx
    nz, ny, nx = grid.data.shape
    zi, yi, xi = np.unravel_index(np.arange(nz * ny * nx), (nz, ny, nx))
    world = _grid_world_coords(grid, zi, yi, xi)
    disp = np.stack([fx.data.reshape(-1), fy.data.reshape(-1),
                     fz.data.reshape(-1)], axis=1).astype(np.float64)
    vox = moving.world_to_voxel(world + disp)
    vals, _ = backend.trilinear(moving.data, vox)
    return Volume3D(dims=grid.dims, spacing=grid.spacing, origin=grid.origin,
                    data=vals.reshape(nz, ny, nx).astype(np.float32),
                    dtype="float32")


def transform_landmarks(pair: InrPair, lm: LandmarkSet,
                        mode: str = "midpoint",
                        cond_threshold: float = DEGENERATE_COND,
                        cap_mm: float = UNCERTAINTY_CAP_MM):
    """Map target-domain landmarks (world mm) into the source domain.

    mode "midpoint" uses the consensus estimate and returns per-point
    uncertainty; mode "forward" uses Phi_F alone (the only choice for
    single-network results) and returns uncertainty None.
    """
    if mode not in ("midpoint", "forward"):
        raise ContractError(f"unknown landmark transform mode {mode!r}")
    xn = pair.t_target.world_to_norm(lm.points)
    if mode == "forward" or pair.backward is None:
        if mode == "midpoint":
            raise ContractError(
                "midpoint mode needs a backward network; this checkpoint "
                "was trained without one")
        out_n = eval_spatial(pair.forward, xn, order=0).phi
        unc = None
    else:
        batch = cc_transform(pair, xn, cond_threshold, cap_mm)
        out_n = batch.mid
        unc = batch.uncertainty_mm
    pts = pair.t_source.norm_to_world(out_n)
    return LandmarkSet(points=pts, labels=lm.labels), unc
