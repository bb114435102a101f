"""Loss terms of the six-component registration objective and their adjoints.

Each term returns its scalar value together with exact adjoints w.r.t. the
network outputs it touches (phi, Jacobian or Hessian); the trainer merges
adjoints per network and runs one reverse pass. Means are over the batch;
accumulation order is fixed by the underlying numpy reductions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coords import CoordBatch, NormTransform, trilinear_sample
from .errors import ContractError
from .linalg3 import cofactor3, det3
from .siren import SirenParams, SpatialEval, eval_spatial, param_gradients
from .volume_io import Volume3D

REG_KINDS = ("jacobian", "symmetric_jacobian", "bending")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective.

    alpha scales the volume-change or bending regularizer (0.05 for the
    determinant penalties, 10 recommended for bending), beta the cycle
    terms, tau clips the symmetric determinant penalty.
    """

    alpha: float = 0.05
    beta: float = 1e-3
    tau: float = 10.0
    reg_kind: str = "symmetric_jacobian"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("alpha and beta must be nonnegative")
        if not self.tau > 0:
            raise ContractError("tau must be positive")
        if self.reg_kind not in REG_KINDS:
            raise ContractError(
                f"reg_kind must be one of {REG_KINDS}, got {self.reg_kind!r}")

    @property
    def required_order(self) -> int:
        """Derivative order the regularizer needs from eval_spatial."""
        return 2 if self.reg_kind == "bending" else 1


@dataclass(frozen=True)
class LossBreakdown:
    data_f: float
    data_b: float
    reg_f: float
    reg_b: float
    cycle_fb: float
    cycle_bf: float
    total: float

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("data_f", "data_b", "reg_f", "reg_b",
                 "cycle_fb", "cycle_bf", "total")}


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson normalized cross-correlation of two intensity vectors.

    Zero-variance input correlates with nothing: returns 0 by convention.
    """
    r, _ = _ncc_and_bgrad(np.asarray(a, dtype=np.float64),
                          np.asarray(b, dtype=np.float64))
    return r


def _ncc_and_bgrad(a: np.ndarray, b: np.ndarray):
    """NCC and its gradient w.r.t. b. Degenerate input: (0, zeros)."""
    if a.ndim != 1 or a.shape != b.shape:
        raise ContractError(f"ncc needs equal-length vectors, got "
                            f"{a.shape} and {b.shape}")
    if a.size < 2:
        raise ContractError("ncc needs at least 2 samples")
    ac = a - a.mean()
    bc = b - b.mean()
    saa = float(ac @ ac)
    sbb = float(bc @ bc)
    if saa == 0.0 or sbb == 0.0:
        return 0.0, np.zeros_like(b)
    sab = float(ac @ bc)
    denom = np.sqrt(saa * sbb)
    r = sab / denom
    grad_b = ac / denom - (r / sbb) * bc
    return float(r), grad_b


def data_loss(img_fixed: Volume3D, img_moving: Volume3D, batch: CoordBatch,
              phi_eval: SpatialEval, t_fixed: NormTransform,
              t_moving: NormTransform):
    """-NCC between fixed intensities at the batch and moving at Phi(batch).

    One NCC over the whole half-batch. Returns (loss, phibar) where phibar
    is dLoss/dPhi per sample via the interpolation gradient.
    """
    if len(batch) != len(phi_eval):
        raise ContractError("batch and phi_eval lengths differ")
    a, _ = trilinear_sample(img_fixed, batch.coords, t_fixed)
    b, grad_b = trilinear_sample(img_moving, phi_eval.phi, t_moving)
    r, dr_db = _ncc_and_bgrad(a, b)
    phibar = (-dr_db)[:, None] * grad_b
    return -r, phibar


def jac_det_loss(ev: SpatialEval):
    """Mean |1 - det(J)| with cofactor adjoints; subgradient 0 at det = 1."""
    if ev.jac is None:
        raise ContractError("jac_det_loss needs an order>=1 evaluation")
    d = det3(ev.jac)
    n = d.shape[0]
    loss = float(np.abs(1.0 - d).mean())
    jacbar = (np.sign(d - 1.0) / n)[:, None, None] * cofactor3(ev.jac)
    return loss, jacbar


def sym_jac_det_loss(ev: SpatialEval, tau: float = 10.0):
    """Mean clipped symmetric volume-change penalty min((d-1)^2/d, tau).

    Equal growth and shrinkage cost the same: f(d) = f(1/d) exactly.
    Non-positive determinants (folding) saturate the clip; the adjoint is
    zero wherever the clip is active.
    """
    if ev.jac is None:
        raise ContractError("sym_jac_det_loss needs an order>=1 evaluation")
    if not tau > 0:
        raise ContractError("tau must be positive")
    d = det3(ev.jac)
    n = d.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(d > 0, (d - 1.0) ** 2 / d, tau)
    clipped = f >= tau
    val = float(np.where(clipped, tau, f).mean())
    with np.errstate(divide="ignore", invalid="ignore"):
        fprime = np.where((d > 0) & ~clipped, 1.0 - 1.0 / d ** 2, 0.0)
    jacbar = (fprime / n)[:, None, None] * cofactor3(ev.jac)
    return val, jacbar


def bending_loss(ev: SpatialEval):
    """Mean bending energy: squared pure seconds plus twice the mixed ones.

    On the full symmetric Hessian tensor this is the plain squared
    Frobenius norm per sample (mixed entries appear twice), so the adjoint
    is 2 H / n.
    """
    if ev.hess is None:
        raise ContractError("bending_loss needs an order-2 evaluation")
    h = ev.hess
    n = h.shape[0]
    loss = float(np.sum(h * h) / n)
    hessbar = (2.0 / n) * h
    return loss, hessbar


def cycle_terms(inner_phi: np.ndarray, x: np.ndarray, outer: SirenParams):
    """Cycle error through a precomputed inner evaluation.

    Computes mean ||Phi_outer(inner_phi) - x||^2. Returns
    (value, inner_phibar, outer_grads): the adjoint to merge into the inner
    network's phi output, and ready-made parameter gradients for the outer
    network (which is evaluated here, at the inner outputs).
    """
    x = np.asarray(x, dtype=np.float64)
    if inner_phi.shape != x.shape:
        raise ContractError("inner_phi and x shapes differ")
    n = x.shape[0]
    ev_out = eval_spatial(outer, inner_phi, order=0, keep_cache=True)
    r = ev_out.phi - x
    value = float(np.sum(r * r) / n)
    rbar = (2.0 / n) * r
    outer_grads, inner_phibar = param_gradients(outer, ev_out, phibar=rbar,
                                                need_xbar=True)
    return value, inner_phibar, outer_grads


def cycle_loss(batch: CoordBatch, inner: SirenParams, outer: SirenParams):
    """Mean squared cycle error, with parameter gradients for both networks."""
    ev_in = eval_spatial(inner, batch, order=0, keep_cache=True)
    value, inner_phibar, outer_grads = cycle_terms(ev_in.phi, batch.coords,
                                                   outer)
    inner_grads, _ = param_gradients(inner, ev_in, phibar=inner_phibar)
    return value, inner_grads, outer_grads


def regularizer(ev: SpatialEval, weights: LossWeights):
    """Dispatch to the configured regularizer.

    Returns (value, jacbar, hessbar); exactly one adjoint is non-None.
    """
    if weights.reg_kind == "jacobian":
        val, jacbar = jac_det_loss(ev)
        return val, jacbar, None
    if weights.reg_kind == "symmetric_jacobian":
        val, jacbar = sym_jac_det_loss(ev, weights.tau)
        return val, jacbar, None
    val, hessbar = bending_loss(ev)
    return val, None, hessbar


def total_loss(data_f: float, data_b: float, reg_f: float, reg_b: float,
               cycle_fb: float, cycle_bf: float,
               weights: LossWeights) -> LossBreakdown:
    """Weighted six-component sum; the breakdown is kept for logging."""
    total = (data_f + data_b + weights.alpha * (reg_f + reg_b)
             + weights.beta * (cycle_fb + cycle_bf))
    return LossBreakdown(data_f=float(data_f), data_b=float(data_b),
                         reg_f=float(reg_f), reg_b=float(reg_b),
                         cycle_fb=float(cycle_fb), cycle_bf=float(cycle_bf),
                         total=float(total))
