"""Compiled implementation of the hot kernels.

Same three-entry contract as ccreg.backend.numpy_impl, which is the
readable reference for the math. Matrix products still go through BLAS
via numpy; everything elementwise between them (sine activations, the
tangent and curvature propagation, the adjoint couplings) is fused into
single C passes over the batch, which removes the temporary-array traffic
that dominates the numpy version.

Caches produced here use the same dict layout as the numpy backend, so
forward/backward calls can be mixed across backends.
"""

import numpy as np

from libc.math cimport cos, floor, sin

NAME = "cython"

PAIR_I = np.array([0, 1, 2, 0, 0, 1])
PAIR_J = np.array([0, 1, 2, 1, 2, 2])

# stand-ins for memoryview arguments a kernel will not read
_D1 = np.zeros(1)
_D2 = np.zeros((1, 1))
_D3 = np.zeros((1, 1, 1))


cdef void _sine_layer(double[:, ::1] a, const double[::1] b, double w0,
                      bint compute_z, int order,
                      const double[:, :, ::1] ta, const double[:, ::1] wt,
                      bint first,
                      const double[:, :, ::1] sa, bint have_sa,
                      double[:, ::1] h, double[:, :, ::1] t_out,
                      double[:, :, ::1] s_out) noexcept nogil:
    # a holds the pre-activation (no bias, no w0) when compute_z, else z
    # itself; compute_z overwrites a with z so the caller can cache it.
    # first layer tangents are the identity, so they are read as columns
    # of the transposed weight matrix wt instead of a (3,n,w) array.
    cdef Py_ssize_t n = a.shape[0], w = a.shape[1], nn, col
    cdef double zz, s, c, q, t0, t1, t2
    for nn in range(n):
        for col in range(w):
            if compute_z:
                zz = w0 * (a[nn, col] + b[col])
                a[nn, col] = zz
            else:
                zz = a[nn, col]
            s = sin(zz)
            h[nn, col] = s
            if order >= 1:
                c = w0 * cos(zz)
                if first:
                    t0 = wt[0, col]
                    t1 = wt[1, col]
                    t2 = wt[2, col]
                else:
                    t0 = ta[0, nn, col]
                    t1 = ta[1, nn, col]
                    t2 = ta[2, nn, col]
                t_out[0, nn, col] = c * t0
                t_out[1, nn, col] = c * t1
                t_out[2, nn, col] = c * t2
                if order >= 2:
                    q = (w0 * w0) * s
                    if have_sa:
                        s_out[0, nn, col] = c * sa[0, nn, col] - q * t0 * t0
                        s_out[1, nn, col] = c * sa[1, nn, col] - q * t1 * t1
                        s_out[2, nn, col] = c * sa[2, nn, col] - q * t2 * t2
                        s_out[3, nn, col] = c * sa[3, nn, col] - q * t0 * t1
                        s_out[4, nn, col] = c * sa[4, nn, col] - q * t0 * t2
                        s_out[5, nn, col] = c * sa[5, nn, col] - q * t1 * t2
                    else:
                        s_out[0, nn, col] = -q * t0 * t0
                        s_out[1, nn, col] = -q * t1 * t1
                        s_out[2, nn, col] = -q * t2 * t2
                        s_out[3, nn, col] = -q * t0 * t1
                        s_out[4, nn, col] = -q * t0 * t2
                        s_out[5, nn, col] = -q * t1 * t2


cdef void _sine_bwd(const double[:, ::1] z, double w0,
                    const double[:, :, ::1] ta, const double[:, ::1] wt,
                    bint first,
                    const double[:, :, ::1] sa, bint have_sa,
                    const double[:, ::1] hbar,
                    const double[:, :, ::1] tbar, bint track_t,
                    const double[:, :, ::1] sbar, bint need2, bint want_sabar,
                    double[:, ::1] abar, double[:, :, ::1] tabar,
                    double[:, :, ::1] sabar) noexcept nogil:
    # adjoints through one sine layer; diagonal pairs couple twice into
    # the tangent adjoints, off-diagonal pairs once per direction
    cdef Py_ssize_t n = z.shape[0], w = z.shape[1], nn, col
    cdef double zz, s, co, c, ab, q, t0, t1, t2, tb0, tb1, tb2
    cdef double tab0, tab1, tab2, sb0, sb1, sb2, sb3, sb4, sb5
    for nn in range(n):
        for col in range(w):
            zz = z[nn, col]
            s = sin(zz)
            co = cos(zz)
            c = w0 * co
            ab = c * hbar[nn, col]
            if track_t:
                if first:
                    t0 = wt[0, col]
                    t1 = wt[1, col]
                    t2 = wt[2, col]
                else:
                    t0 = ta[0, nn, col]
                    t1 = ta[1, nn, col]
                    t2 = ta[2, nn, col]
                tb0 = tbar[0, nn, col]
                tb1 = tbar[1, nn, col]
                tb2 = tbar[2, nn, col]
                q = (w0 * w0) * s
                ab -= q * (tb0 * t0 + tb1 * t1 + tb2 * t2)
                tab0 = c * tb0
                tab1 = c * tb1
                tab2 = c * tb2
                if need2:
                    sb0 = sbar[0, nn, col]
                    sb1 = sbar[1, nn, col]
                    sb2 = sbar[2, nn, col]
                    sb3 = sbar[3, nn, col]
                    sb4 = sbar[4, nn, col]
                    sb5 = sbar[5, nn, col]
                    if have_sa:
                        ab -= q * (sb0 * sa[0, nn, col] + sb1 * sa[1, nn, col]
                                   + sb2 * sa[2, nn, col]
                                   + sb3 * sa[3, nn, col]
                                   + sb4 * sa[4, nn, col]
                                   + sb5 * sa[5, nn, col])
                    ab -= (w0 * w0 * w0) * co * (
                        sb0 * t0 * t0 + sb1 * t1 * t1 + sb2 * t2 * t2
                        + sb3 * t0 * t1 + sb4 * t0 * t2 + sb5 * t1 * t2)
                    tab0 -= q * (2.0 * sb0 * t0 + sb3 * t1 + sb4 * t2)
                    tab1 -= q * (2.0 * sb1 * t1 + sb3 * t0 + sb5 * t2)
                    tab2 -= q * (2.0 * sb2 * t2 + sb4 * t0 + sb5 * t1)
                    if want_sabar:
                        sabar[0, nn, col] = c * sb0
                        sabar[1, nn, col] = c * sb1
                        sabar[2, nn, col] = c * sb2
                        sabar[3, nn, col] = c * sb3
                        sabar[4, nn, col] = c * sb4
                        sabar[5, nn, col] = c * sb5
                tabar[0, nn, col] = tab0
                tabar[1, nn, col] = tab1
                tabar[2, nn, col] = tab2
            abar[nn, col] = ab


def _mm(t, w):
    """Apply a weight matrix to stacked tangents: (k,n,i) x (o,i) -> (k,n,o)."""
    k, n, i = t.shape
    return np.dot(t.reshape(k * n, i), w.T).reshape(k, n, -1)


def siren_forward(ws, bs, w0, x, order):
    """Evaluate the network and its spatial derivatives up to ``order``.

    Contract identical to the numpy backend: returns (u, du, d2u, cache)
    with du[n,k,i] = du_k/dx_i and d2u in symmetric pair storage.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    w0 = float(w0)
    order = int(order)
    n = x.shape[0]
    n_hidden = len(ws) - 1

    h = x
    T = None
    S = None
    layers = []
    for l in range(n_hidden):
        w_arr = np.ascontiguousarray(ws[l], dtype=np.float64)
        b = np.ascontiguousarray(bs[l], dtype=np.float64)
        wd = w_arr.shape[0]
        first = l == 0
        a = np.dot(h, w_arr.T)

        Ta = None
        Sa = None
        ta_k = _D3
        wt = _D2
        if order >= 1:
            if first:
                wt = np.ascontiguousarray(w_arr.T)
                Ta = np.broadcast_to(wt[:, None, :], (3, n, wd))
            else:
                Ta = _mm(T, w_arr)
                ta_k = Ta
        have_sa = order >= 2 and not first
        if have_sa:
            Sa = _mm(S, w_arr)

        h_new = np.empty((n, wd))
        t_new = np.empty((3, n, wd)) if order >= 1 else _D3
        s_new = np.empty((6, n, wd)) if order >= 2 else _D3
        _sine_layer(a, b, w0, True, order, ta_k, wt, first,
                    Sa if have_sa else _D3, have_sa, h_new, t_new, s_new)
        layers.append({"z": a, "Ta": Ta, "Sa": Sa})
        h = h_new
        if order >= 1:
            T = t_new
        if order >= 2:
            S = s_new

    # no negative container indices here: the module compiles with
    # wraparound off, which only memoryview code is allowed to rely on
    wl = np.ascontiguousarray(ws[n_hidden], dtype=np.float64)
    u = np.dot(h, wl.T) + bs[n_hidden]
    du = _mm(T, wl).transpose(1, 2, 0) if order >= 1 else None
    d2u = _mm(S, wl).transpose(1, 2, 0) if order >= 2 else None

    cache = {"ws": ws, "bs": bs, "w0": w0, "x": x, "order": order,
             "layers": layers, "h_last": h, "T_last": T, "S_last": S}
    return u, du, d2u, cache


def _hidden_outputs(cache, l):
    """Recompute (h, T, S) emitted by hidden layer ``l`` from its cache."""
    w0 = cache["w0"]
    order = cache["order"]
    entry = cache["layers"][l]
    z, Sa = entry["z"], entry["Sa"]
    n, wd = z.shape
    first = l == 0
    ta_k = _D3
    wt = _D2
    if order >= 1:
        if first:
            wt = np.ascontiguousarray(
                np.asarray(cache["ws"][0], dtype=np.float64).T)
        else:
            ta_k = entry["Ta"]
    have_sa = Sa is not None
    h = np.empty((n, wd))
    t = np.empty((3, n, wd)) if order >= 1 else _D3
    s = np.empty((6, n, wd)) if order >= 2 else _D3
    _sine_layer(z, _D1, w0, False, order, ta_k, wt, first,
                Sa if have_sa else _D3, have_sa, h, t, s)
    return h, (t if order >= 1 else None), (s if order >= 2 else None)


def siren_backward(cache, ubar, dubar, d2ubar, need_xbar=False):
    """Reverse pass for adjoints on (u, du, d2u); numpy-backend contract."""
    ws, bs, w0 = cache["ws"], cache["bs"], cache["w0"]
    x, order = cache["x"], cache["order"]
    n = x.shape[0]
    n_hidden = len(ws) - 1
    need1 = dubar is not None
    need2 = d2ubar is not None
    track_t = need1 or need2
    if need1 and order < 1:
        raise ValueError("jacobian adjoints given but forward ran with order<1")
    if need2 and order < 2:
        raise ValueError("hessian adjoints given but forward ran with order<2")
    if ubar is None:
        ubar = np.zeros((n, 3))
    ubar = np.ascontiguousarray(ubar, dtype=np.float64)

    grads = [None] * len(ws)

    wl = np.ascontiguousarray(ws[n_hidden], dtype=np.float64)
    h_last, T_last, S_last = cache["h_last"], cache["T_last"], cache["S_last"]
    w_last = wl.shape[1]
    wl_bar = np.dot(ubar.T, h_last)
    Tbar = None
    Sbar = None
    if need1:
        dub = np.ascontiguousarray(
            np.asarray(dubar, dtype=np.float64).transpose(2, 0, 1)
        ).reshape(3 * n, 3)
        Tbar = np.dot(dub, wl).reshape(3, n, w_last)
        wl_bar += np.dot(dub.T, T_last.reshape(3 * n, w_last))
    elif track_t:
        Tbar = np.zeros((3, n, w_last))
    if need2:
        d2b = np.ascontiguousarray(
            np.asarray(d2ubar, dtype=np.float64).transpose(2, 0, 1)
        ).reshape(6 * n, 3)
        Sbar = np.dot(d2b, wl).reshape(6, n, w_last)
        wl_bar += np.dot(d2b.T, S_last.reshape(6 * n, w_last))
    grads[n_hidden] = (wl_bar, ubar.sum(axis=0))
    hbar = np.dot(ubar, wl)

    for l in range(n_hidden - 1, -1, -1):
        w_arr = np.ascontiguousarray(ws[l], dtype=np.float64)
        entry = cache["layers"][l]
        z, Ta, Sa = entry["z"], entry["Ta"], entry["Sa"]
        first = l == 0
        wd = z.shape[1]
        have_sa = Sa is not None
        want_sabar = need2 and have_sa

        ta_k = _D3
        wt = _D2
        if track_t:
            if first:
                wt = np.ascontiguousarray(w_arr.T)
            else:
                ta_k = Ta
        abar = np.empty((n, wd))
        tabar = np.empty((3, n, wd)) if track_t else _D3
        sabar = np.empty((6, n, wd)) if want_sabar else _D3
        _sine_bwd(z, w0, ta_k, wt, first, Sa if have_sa else _D3, have_sa,
                  np.ascontiguousarray(hbar),
                  Tbar if track_t else _D3, track_t,
                  Sbar if need2 else _D3, need2, want_sabar,
                  abar, tabar, sabar)

        if first:
            h_in, T_in, S_in = x, None, None
        else:
            h_in, T_in, S_in = _hidden_outputs(cache, l - 1)
        wbar = np.dot(abar.T, h_in)
        if track_t:
            if first:
                # identity input tangents: column i collects tabar[i]
                wbar += tabar.sum(axis=1).T
            else:
                v = T_in.shape[2]
                wbar += np.dot(tabar.reshape(3 * n, wd).T,
                               T_in.reshape(3 * n, v))
        if want_sabar and not first:
            v = S_in.shape[2]
            wbar += np.dot(sabar.reshape(6 * n, wd).T,
                           S_in.reshape(6 * n, v))
        grads[l] = (wbar, abar.sum(axis=0))

        if not first:
            hbar = np.dot(abar, w_arr)
            if track_t:
                Tbar = _mm(tabar, w_arr.T)
            if need2:
                Sbar = _mm(sabar, w_arr.T) if want_sabar else None
        elif need_xbar:
            hbar = np.dot(abar, w_arr)

    xbar = hbar if need_xbar else None
    return grads, xbar


cdef void _trilinear_kernel(const double[:, :, ::1] vol,
                            const double[:, ::1] pts,
                            double[::1] vals,
                            double[:, ::1] grad) noexcept nogil:
    cdef Py_ssize_t nz = vol.shape[0], ny = vol.shape[1], nx = vol.shape[2]
    cdef Py_ssize_t n = pts.shape[0], r, x0, y0, z0, x1, y1, z1, cap
    cdef double px, py, pz, fx, fy, fz, gx, gy, gz
    cdef double c000, c100, c010, c110, c001, c101, c011, c111
    cdef double w00, w10, w01, w11, ddx, ddy, ddz
    cdef bint okx, oky, okz
    for r in range(n):
        px = pts[r, 0]
        py = pts[r, 1]
        pz = pts[r, 2]
        okx = px >= 0.0 and px <= nx - 1.0
        oky = py >= 0.0 and py <= ny - 1.0
        okz = pz >= 0.0 and pz <= nz - 1.0
        if px < 0.0:
            px = 0.0
        elif px > nx - 1.0:
            px = nx - 1.0
        if py < 0.0:
            py = 0.0
        elif py > ny - 1.0:
            py = ny - 1.0
        if pz < 0.0:
            pz = 0.0
        elif pz > nz - 1.0:
            pz = nz - 1.0

        x0 = <Py_ssize_t>floor(px)
        cap = nx - 2 if nx >= 2 else 0
        if x0 > cap:
            x0 = cap
        fx = px - x0
        x1 = x0 + 1 if x0 + 1 <= nx - 1 else nx - 1
        if nx == 1:
            fx = 0.0

        y0 = <Py_ssize_t>floor(py)
        cap = ny - 2 if ny >= 2 else 0
        if y0 > cap:
            y0 = cap
        fy = py - y0
        y1 = y0 + 1 if y0 + 1 <= ny - 1 else ny - 1
        if ny == 1:
            fy = 0.0

        z0 = <Py_ssize_t>floor(pz)
        cap = nz - 2 if nz >= 2 else 0
        if z0 > cap:
            z0 = cap
        fz = pz - z0
        z1 = z0 + 1 if z0 + 1 <= nz - 1 else nz - 1
        if nz == 1:
            fz = 0.0

        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz

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
        vals[r] = (gx * (c000 * w00 + c010 * w10 + c001 * w01 + c011 * w11)
                   + fx * (c100 * w00 + c110 * w10 + c101 * w01 + c111 * w11))

        ddx = ((c100 - c000) * w00 + (c110 - c010) * w10
               + (c101 - c001) * w01 + (c111 - c011) * w11)
        ddy = (gx * ((c010 - c000) * gz + (c011 - c001) * fz)
               + fx * ((c110 - c100) * gz + (c111 - c101) * fz))
        ddz = (gx * ((c001 - c000) * gy + (c011 - c010) * fy)
               + fx * ((c101 - c100) * gy + (c111 - c110) * fy))
        grad[r, 0] = ddx if okx else 0.0
        grad[r, 1] = ddy if oky else 0.0
        grad[r, 2] = ddz if okz else 0.0


def trilinear(vol, pts):
    """Trilinear interpolation with analytic gradient, border-clamped.

    Same semantics as the numpy backend: out-of-range queries clamp to the
    border voxel and the gradient across a clamped axis is zero.
    """
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("pts must be (n, 3)")
    n = pts.shape[0]
    vals = np.empty(n)
    grad = np.empty((n, 3))
    _trilinear_kernel(vol, pts, vals, grad)
    return vals, grad
