"""Numpy reference implementation of the hot kernels.

Three entry points, shared contract with the compiled core:

* ``siren_forward``  - sinusoidal MLP evaluation with exact first/second
  spatial derivatives propagated layer by layer (forward mode, 3 input
  directions, 6 symmetric second-order pairs).
* ``siren_backward`` - exact reverse pass: parameter gradients (and
  optionally input gradients) for a loss that attaches adjoints to the
  value, Jacobian and Hessian outputs of ``siren_forward``.
* ``trilinear``      - batched trilinear interpolation with its analytic
  gradient, border-clamped.

Everything is float64 and uses plain full-batch numpy ops, so summation
order is fixed and results are reproducible bit-for-bit run to run.

Derivative bookkeeping: tangents ``T[i] = dh/dx_i`` have shape (3, n, w);
second-order terms ``S[p] = d2h/dx_i dx_j`` store the 6 unique pairs of a
symmetric Hessian in the fixed order (xx, yy, zz, xy, xz, yz).
"""

from __future__ import annotations

import numpy as np

NAME = "python"

# Symmetric pair order used everywhere: d2/dx_i dx_j for (i, j).
PAIR_I = np.array([0, 1, 2, 0, 0, 1])
PAIR_J = np.array([0, 1, 2, 1, 2, 2])


def _mm(t: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply a weight matrix to stacked tangents: (k,n,i) x (o,i) -> (k,n,o)."""
    k, n, i = t.shape
    return (t.reshape(k * n, i) @ w.T).reshape(k, n, -1)


def siren_forward(ws, bs, w0, x, order):
    """Evaluate the network and its spatial derivatives up to ``order``.

    Args:
        ws, bs: layer weights (out,in) and biases (out,); all layers but the
            last are sine layers, the last is linear.
        w0: frequency factor multiplying pre-activations inside the sine.
        x: (n, 3) float64 input coordinates.
        order: 0, 1 or 2.

    Returns:
        (u, du, d2u, cache) where u is (n,3); du is (n,3,3) with
        du[n,k,i] = du_k/dx_i, or None; d2u is (n,3,6) in pair order, or
        None. ``cache`` feeds siren_backward.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    n_hidden = len(ws) - 1

    h = x
    T = None
    S = None
    layers = []
    for l in range(n_hidden):
        w, b = ws[l], bs[l]
        z = w0 * (h @ w.T + b)
        if order >= 1:
            if l == 0:
                # input tangents are the identity, so Ta is just columns of w
                Ta = np.broadcast_to(w.T[:, None, :], (3, n, w.shape[0]))
            else:
                Ta = _mm(T, w)
        else:
            Ta = None
        Sa = _mm(S, w) if (order >= 2 and l > 0) else None
        layers.append({"z": z, "Ta": Ta, "Sa": Sa})

        s = np.sin(z)
        h = s
        if order >= 1:
            c = w0 * np.cos(z)
            T = c[None] * Ta
            if order >= 2:
                quad = (w0 * w0 * s)[None] * (Ta[PAIR_I] * Ta[PAIR_J])
                S = (c[None] * Sa - quad) if Sa is not None else -quad

    wl, bl = ws[-1], bs[-1]
    u = h @ wl.T + bl
    du = None
    d2u = None
    if order >= 1:
        du = _mm(T, wl).transpose(1, 2, 0)
    if order >= 2:
        d2u = _mm(S, wl).transpose(1, 2, 0)

    cache = {"ws": ws, "bs": bs, "w0": float(w0), "x": x, "order": int(order),
             "layers": layers, "h_last": h, "T_last": T, "S_last": S}
    return u, du, d2u, cache


def _layer_outputs(cache, l):
    """Recompute (h, T, S) emitted by hidden layer ``l`` from its cache."""
    w0 = cache["w0"]
    entry = cache["layers"][l]
    z, Ta, Sa = entry["z"], entry["Ta"], entry["Sa"]
    s = np.sin(z)
    if cache["order"] < 1:
        return s, None, None
    c = w0 * np.cos(z)
    T = c[None] * Ta
    S = None
    if cache["order"] >= 2:
        quad = (w0 * w0 * s)[None] * (Ta[PAIR_I] * Ta[PAIR_J])
        S = (c[None] * Sa - quad) if Sa is not None else -quad
    return s, T, S


def siren_backward(cache, ubar, dubar, d2ubar, need_xbar=False):
    """Reverse pass for adjoints on (u, du, d2u).

    Args:
        cache: from siren_forward.
        ubar: (n,3) adjoint of u, or None.
        dubar: (n,3,3) adjoint of du (same index convention), or None.
        d2ubar: (n,3,6) adjoint of d2u in pair storage, or None. Off-diagonal
            pair entries must already hold the sum of both symmetric
            full-tensor adjoints.
        need_xbar: also return d(loss)/dx.

    Returns:
        (grads, xbar): grads is a list of (dW, db) matching ws/bs; xbar is
        (n,3) or None. Accumulation order is fixed.
    """
    ws, bs, w0 = cache["ws"], cache["bs"], cache["w0"]
    x, order = cache["x"], cache["order"]
    n = x.shape[0]
    n_hidden = len(ws) - 1
    need1 = dubar is not None
    need2 = d2ubar is not None
    # hessian outputs depend on the tangents, so second-order adjoints
    # force tangent-adjoint tracking even without direct jacobian adjoints
    track_t = need1 or need2
    if need1 and order < 1:
        raise ValueError("jacobian adjoints given but forward ran with order<1")
    if need2 and order < 2:
        raise ValueError("hessian adjoints given but forward ran with order<2")
    if ubar is None:
        ubar = np.zeros((n, 3))

    grads: list = [None] * len(ws)

    # final linear layer
    wl = ws[-1]
    h_last, T_last, S_last = cache["h_last"], cache["T_last"], cache["S_last"]
    wl_bar = ubar.T @ h_last
    Tbar = None
    if need1:
        Tbar = np.einsum("nki,kw->inw", dubar, wl)
        wl_bar += np.einsum("nki,inw->kw", dubar, T_last)
    elif track_t:
        Tbar = np.zeros((3, n, wl.shape[1]))
    if need2:
        Sbar = np.einsum("nkp,kw->pnw", d2ubar, wl)
        wl_bar += np.einsum("nkp,pnw->kw", d2ubar, S_last)
    else:
        Sbar = None
    grads[-1] = (wl_bar, ubar.sum(axis=0))
    hbar = ubar @ wl

    for l in range(n_hidden - 1, -1, -1):
        w = ws[l]
        entry = cache["layers"][l]
        z, Ta, Sa = entry["z"], entry["Ta"], entry["Sa"]
        s = np.sin(z)
        co = np.cos(z)
        c = w0 * co

        abar = c * hbar
        if track_t:
            abar -= (w0 * w0) * s * np.einsum("knw,knw->nw", Tbar, Ta)
            Tabar = c[None] * Tbar
        if need2:
            if Sa is not None:
                abar -= (w0 * w0) * s * np.einsum("pnw,pnw->nw", Sbar, Sa)
            abar -= (w0 ** 3) * co * np.einsum(
                "pnw,pnw->nw", Sbar, Ta[PAIR_I] * Ta[PAIR_J])
            # the -w0^2 s Ta_i Ta_j term feeds both tangent directions
            coef = (w0 * w0) * s
            for p in range(6):
                i, j = PAIR_I[p], PAIR_J[p]
                Tabar[i] -= coef * Sbar[p] * Ta[j]
                Tabar[j] -= coef * Sbar[p] * Ta[i]
            Sabar = c[None] * Sbar if Sa is not None else None

        # linear part  a = h_in w^T + b,  Ta = T_in w^T,  Sa = S_in w^T
        if l == 0:
            h_in, T_in, S_in = x, None, None
        else:
            h_in, T_in, S_in = _layer_outputs(cache, l - 1)
        wbar = abar.T @ h_in
        if track_t:
            if l == 0:
                # input tangents are the identity: column i collects Tabar[i]
                wbar += np.stack([Tabar[i].sum(axis=0) for i in range(3)],
                                 axis=1)
            else:
                wbar += np.einsum("inw,inv->wv", Tabar, T_in)
        if need2 and l > 0 and Sabar is not None:
            wbar += np.einsum("pnw,pnv->wv", Sabar, S_in)
        grads[l] = (wbar, abar.sum(axis=0))

        if l > 0:
            hbar = abar @ w
            if track_t:
                Tbar = _mm(Tabar, w.T)
            if need2:
                Sbar = _mm(Sabar, w.T) if Sabar is not None else None
        elif need_xbar:
            hbar = abar @ w

    xbar = hbar if need_xbar else None
    return grads, xbar


def trilinear(vol, pts):
    """Trilinear interpolation of ``vol`` (nz,ny,nx) at voxel coords (n,3).

    Points are (x, y, z) in voxel units. Out-of-range queries clamp to the
    border voxel; the gradient component across a clamped axis is zero.

    Returns (values (n,), gradient (n,3)) in voxel units.
    """
    vol = np.asarray(vol, dtype=np.float64)
    nz, ny, nx = vol.shape
    pts = np.asarray(pts, dtype=np.float64)
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    inside = (pts >= 0.0) & (pts <= hi)
    p = np.clip(pts, 0.0, hi)

    i0 = np.floor(p).astype(np.intp)
    np.minimum(i0, np.maximum(np.array([nx, ny, nz]) - 2, 0), out=i0)
    f = p - i0
    i1 = np.minimum(i0 + 1, np.array([nx - 1, ny - 1, nz - 1]))
    # degenerate single-voxel axes interpolate nothing
    for ax, dim in enumerate((nx, ny, nz)):
        if dim == 1:
            f[:, ax] = 0.0

    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    c000 = vol[z0, y0, x0]
    c100 = vol[z0, y0, x1]
    c010 = vol[z0, y1, x0]
    c110 = vol[z0, y1, x1]
    c001 = vol[z1, y0, x0]
    c101 = vol[z1, y0, x1]
    c011 = vol[z1, y1, x0]
    c111 = vol[z1, y1, x1]

    w00 = gy * gz
    w10 = fy * gz
    w01 = gy * fz
    w11 = fy * fz
    vals = (gx * (c000 * w00 + c010 * w10 + c001 * w01 + c011 * w11)
            + fx * (c100 * w00 + c110 * w10 + c101 * w01 + c111 * w11))

    ddx = ((c100 - c000) * w00 + (c110 - c010) * w10
           + (c101 - c001) * w01 + (c111 - c011) * w11)
    ddy = (gx * ((c010 - c000) * gz + (c011 - c001) * fz)
           + fx * ((c110 - c100) * gz + (c111 - c101) * fz))
    ddz = (gx * ((c001 - c000) * gy + (c011 - c010) * fy)
           + fx * ((c101 - c100) * gy + (c111 - c110) * fy))
    grad = np.stack([ddx, ddy, ddz], axis=1)
    grad[~inside] = 0.0
    return vals, grad
