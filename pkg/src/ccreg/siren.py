"""Sinusoidal coordinate networks and their exact derivative machinery.

A network maps a normalized coordinate x to a displacement u(x); the
deformation is Phi(x) = x + u(x). All layers but the last apply
sin(w0 * (W h + b)); the last is linear. Spatial derivatives (Jacobian and
Hessian of Phi) come from exact forward-mode propagation, parameter
gradients from an exact reverse pass through value, Jacobian and Hessian
outputs. Everything runs in float64 with a fixed summation order, so a
given (seed, inputs) pair reproduces bit-identical results.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import backend
from .backend.numpy_impl import PAIR_I, PAIR_J
from .errors import ContractError, NumericalAbort, VolumeFormatError

CHECKPOINT_FORMAT = "ccreg-siren-v1"


@dataclass(frozen=True)
class SirenParams:
    """Layer weights/biases plus the frequency factor w0."""

    weights: tuple      # of (out, in) float64 arrays
    biases: tuple       # of (out,) float64 arrays
    w0: float

    def __post_init__(self):
        ws = tuple(np.ascontiguousarray(w, dtype=np.float64) for w in self.weights)
        bs = tuple(np.ascontiguousarray(b, dtype=np.float64) for b in self.biases)
        if len(ws) != len(bs) or len(ws) < 2:
            raise ContractError("need matching weights/biases, at least 2 layers")
        if ws[0].shape[1] != 3 or ws[-1].shape[0] != 3:
            raise ContractError("network must map 3 inputs to 3 outputs")
        for l in range(1, len(ws)):
            if ws[l].shape[1] != ws[l - 1].shape[0]:
                raise ContractError(
                    f"layer {l} input {ws[l].shape[1]} does not chain from "
                    f"layer {l - 1} output {ws[l - 1].shape[0]}")
        for l, (w, b) in enumerate(zip(ws, bs)):
            if b.shape != (w.shape[0],):
                raise ContractError(f"layer {l} bias shape {b.shape} mismatch")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractError(f"layer {l} has non-finite parameters")
        if not self.w0 > 0:
            raise ContractError("w0 must be positive")
        for a in ws + bs:
            a.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "w0", float(self.w0))

    @property
    def layer_sizes(self) -> list[int]:
        return [3] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)


class SampleEval(NamedTuple):
    phi: np.ndarray          # (3,)
    jac: np.ndarray | None   # (3, 3)
    hess: np.ndarray | None  # (3, 3, 3)


@dataclass
class SpatialEval:
    """Batched network evaluation: Phi, its Jacobian and Hessian.

    ``jac[n, k, i] = dPhi_k/dx_i``; ``hess[n, k, i, j]`` is symmetric in
    (i, j). Index to get a per-sample view.
    """

    phi: np.ndarray
    jac: np.ndarray | None
    hess: np.ndarray | None
    order: int
    cache: dict | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.phi.shape[0]

    def __getitem__(self, n: int) -> SampleEval:
        return SampleEval(self.phi[n],
                          None if self.jac is None else self.jac[n],
                          None if self.hess is None else self.hess[n])


def init_siren(hidden_layers: int, width: int, w0: float,
               rng: np.random.Generator) -> SirenParams:
    """Initialize a 3 -> width^hidden_layers -> 3 sinusoidal network.

    First layer uniform in [-1/3, 1/3] (1/in_features); hidden layers
    uniform in +-sqrt(6/fan_in)/w0; the final linear layer is shrunk by a
    further 1/w0 so the initial displacement field is near zero. Biases are
    zero. Deterministic per generator state.
    """
    if hidden_layers < 1 or width < 1:
        raise ContractError("hidden_layers and width must be positive")
    sizes = [3] + [width] * hidden_layers + [3]
    weights, biases = [], []
    for l in range(len(sizes) - 1):
        fan_in, fan_out = sizes[l], sizes[l + 1]
        if l == 0:
            bound = 1.0 / fan_in
        elif l < len(sizes) - 2:
            bound = np.sqrt(6.0 / fan_in) / w0
        else:
            bound = np.sqrt(6.0 / fan_in) / (w0 * w0)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return SirenParams(weights=tuple(weights), biases=tuple(biases), w0=w0)


def _coords_array(coords) -> np.ndarray:
    c = coords.coords if hasattr(coords, "coords") else np.asarray(coords)
    c = np.ascontiguousarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ContractError("coords must have shape (n, 3)")
    return c


def eval_spatial(p: SirenParams, coords, order: int = 0,
                 keep_cache: bool = False) -> SpatialEval:
    """Evaluate Phi(x) = x + u(x) and spatial derivatives up to ``order``.

    ``coords`` is a CoordBatch or a raw (n, 3) array (inference queries may
    legitimately leave the [-1, 1] cube). Pass keep_cache=True when
    param_gradients will be called on the result.
    """
    if order not in (0, 1, 2):
        raise ContractError(f"order must be 0, 1 or 2, got {order}")
    x = _coords_array(coords)
    u, du, d2u, cache = backend.siren_forward(
        list(p.weights), list(p.biases), p.w0, x, order)
    phi = x + u
    jac = None
    hess = None
    if order >= 1:
        jac = du.copy()
        jac[:, 0, 0] += 1.0
        jac[:, 1, 1] += 1.0
        jac[:, 2, 2] += 1.0
    if order >= 2:
        n = x.shape[0]
        hess = np.empty((n, 3, 3, 3))
        for q in range(6):
            i, j = int(PAIR_I[q]), int(PAIR_J[q])
            hess[:, :, i, j] = d2u[:, :, q]
            hess[:, :, j, i] = d2u[:, :, q]
    return SpatialEval(phi=phi, jac=jac, hess=hess, order=order,
                       cache=cache if keep_cache else None)


def param_gradients(p: SirenParams, ev: SpatialEval, phibar=None, jacbar=None,
                    hessbar=None, need_xbar: bool = False):
    """Exact dLoss/d(parameters) for adjoints attached to phi/jac/hess.

    ``hessbar`` is the full (n, 3, 3, 3) adjoint tensor; both (i, j) and
    (j, i) entries contribute. Returns (grads, xbar) where grads is a list
    of (dW, db) aligned with p.weights, accumulated in a fixed order, and
    xbar is dLoss/dx (None unless requested).
    """
    if ev.cache is None:
        raise ContractError("eval_spatial must be called with keep_cache=True")
    n = len(ev)
    if phibar is not None:
        phibar = np.asarray(phibar, dtype=np.float64)
        if phibar.shape != (n, 3):
            raise ContractError(f"phibar shape {phibar.shape} != {(n, 3)}")
    if jacbar is not None:
        jacbar = np.asarray(jacbar, dtype=np.float64)
        if jacbar.shape != (n, 3, 3):
            raise ContractError(f"jacbar shape {jacbar.shape} != {(n, 3, 3)}")
        if ev.order < 1:
            raise ContractError("jac adjoints need an order>=1 evaluation")
    d2ubar = None
    if hessbar is not None:
        hessbar = np.asarray(hessbar, dtype=np.float64)
        if hessbar.shape != (n, 3, 3, 3):
            raise ContractError(f"hessbar shape {hessbar.shape} != {(n, 3, 3, 3)}")
        if ev.order < 2:
            raise ContractError("hess adjoints need an order-2 evaluation")
        d2ubar = np.empty((n, 3, 6))
        for q in range(6):
            i, j = int(PAIR_I[q]), int(PAIR_J[q])
            if i == j:
                d2ubar[:, :, q] = hessbar[:, :, i, i]
            else:
                d2ubar[:, :, q] = hessbar[:, :, i, j] + hessbar[:, :, j, i]
    grads, xbar = backend.siren_backward(ev.cache, phibar, jacbar, d2ubar,
                                         need_xbar=need_xbar)
    if need_xbar:
        if xbar is None:
            xbar = np.zeros((n, 3))
        if phibar is not None:
            xbar = xbar + phibar  # identity part of Phi(x) = x + u(x)
    return grads, xbar


def zero_gradients(p: SirenParams):
    return [(np.zeros_like(w), np.zeros_like(b))
            for w, b in zip(p.weights, p.biases)]


def add_gradients(acc, extra, scale: float = 1.0):
    """acc += scale * extra, blockwise, in place; returns acc."""
    for (aw, ab), (ew, eb) in zip(acc, extra):
        aw += scale * ew
        ab += scale * eb
    return acc


@dataclass(frozen=True)
class AdamState:
    """Adam first/second moments per parameter block plus the step count."""

    m_w: tuple
    v_w: tuple
    m_b: tuple
    v_b: tuple
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, p: SirenParams, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamState":
        return cls(m_w=tuple(np.zeros_like(w) for w in p.weights),
                   v_w=tuple(np.zeros_like(w) for w in p.weights),
                   m_b=tuple(np.zeros_like(b) for b in p.biases),
                   v_b=tuple(np.zeros_like(b) for b in p.biases),
                   step=0, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(p: SirenParams, grads, s: AdamState, lr: float):
    """One bias-corrected Adam update. Returns (new_params, new_state).

    Raises on non-finite gradients, naming the offending block: clamping
    would silently corrupt the field the uncertainty map is meant to expose.
    """
    if len(grads) != p.n_layers:
        raise ContractError("gradient block count does not match parameters")
    t = s.step + 1
    b1, b2, eps = s.beta1, s.beta2, s.eps
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_w, new_b = [], []
    m_w, v_w, m_b, v_b = [], [], [], []
    for l, (gw, gb) in enumerate(grads):
        if not np.all(np.isfinite(gw)):
            raise NumericalAbort(f"non-finite gradient in layer {l} weights")
        if not np.all(np.isfinite(gb)):
            raise NumericalAbort(f"non-finite gradient in layer {l} biases")
        mw = b1 * s.m_w[l] + (1.0 - b1) * gw
        vw = b2 * s.v_w[l] + (1.0 - b2) * gw * gw
        mb = b1 * s.m_b[l] + (1.0 - b1) * gb
        vb = b2 * s.v_b[l] + (1.0 - b2) * gb * gb
        new_w.append(p.weights[l] - lr * (mw / c1) / (np.sqrt(vw / c2) + eps))
        new_b.append(p.biases[l] - lr * (mb / c1) / (np.sqrt(vb / c2) + eps))
        m_w.append(mw)
        v_w.append(vw)
        m_b.append(mb)
        v_b.append(vb)
    return (SirenParams(weights=tuple(new_w), biases=tuple(new_b), w0=p.w0),
            AdamState(m_w=tuple(m_w), v_w=tuple(v_w), m_b=tuple(m_b),
                      v_b=tuple(v_b), step=t, beta1=b1, beta2=b2, eps=eps))


def save_siren(p: SirenParams, path: str | os.PathLike,
               extra: dict | None = None) -> None:
    """Write a checkpoint: JSON manifest + raw little-endian float64 payload.

    The payload file (same path, .bin suffix) holds each layer's weight
    matrix (row-major) then bias, in layer order; the manifest records
    per-layer offsets and the payload's sha256.
    """
    path = os.fspath(path)
    payload_path = path[:-5] + ".bin" if path.endswith(".json") else path + ".bin"
    chunks = []
    layers = []
    offset = 0
    for w, b in zip(p.weights, p.biases):
        for name, a in (("weight", w), ("bias", b)):
            raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
            layers.append({"name": name, "shape": list(a.shape),
                           "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "layer_sizes": p.layer_sizes,
        "w0": p.w0,
        "payload": os.path.basename(payload_path),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": layers,
    }
    if extra:
        manifest.update(extra)
    with open(payload_path, "wb") as f:
        f.write(payload)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_siren(path: str | os.PathLike) -> tuple[SirenParams, dict]:
    """Load a checkpoint; returns (params, manifest). Verifies the payload hash."""
    path = os.fspath(path)
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise VolumeFormatError(
            f"unexpected checkpoint format {manifest.get('format')!r}")
    payload_path = os.path.join(os.path.dirname(path) or ".",
                                manifest["payload"])
    with open(payload_path, "rb") as f:
        payload = f.read()
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest["payload_sha256"]:
        raise VolumeFormatError(
            f"checkpoint payload hash mismatch for {payload_path}: "
            f"manifest {manifest['payload_sha256'][:12]}, file {digest[:12]}")
    arrays = []
    for spec_ in manifest["arrays"]:
        start = spec_["offset"]
        raw = payload[start:start + spec_["nbytes"]]
        arrays.append(np.frombuffer(raw, dtype="<f8").reshape(spec_["shape"]))
    weights = tuple(arrays[0::2])
    biases = tuple(arrays[1::2])
    return (SirenParams(weights=weights, biases=biases, w0=manifest["w0"]),
            manifest)
