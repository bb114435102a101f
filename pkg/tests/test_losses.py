"""Loss terms: closed-form oracles, symmetry properties, adjoint checks."""

import numpy as np
import pytest

from ccreg.coords import CoordBatch, make_norm_transform
from ccreg.errors import ContractError
from ccreg.losses import (LossWeights, bending_loss, cycle_loss, cycle_terms,
                          data_loss, jac_det_loss, ncc, regularizer,
                          sym_jac_det_loss, total_loss)
from ccreg.rng import make_rng
from ccreg.siren import SirenParams, SpatialEval, eval_spatial, init_siren

from conftest import random_volume, rel_err


def diag_eval(diags):
    """Order-1 evaluation with prescribed diagonal Jacobians."""
    diags = np.atleast_2d(np.asarray(diags, dtype=np.float64))
    n = diags.shape[0]
    jac = np.zeros((n, 3, 3))
    jac[:, [0, 1, 2], [0, 1, 2]] = diags
    return SpatialEval(phi=np.zeros((n, 3)), jac=jac, hess=None, order=1)


def identity_net(seed=0, hidden=1, width=8):
    """Random net with the final layer zeroed: Phi(x) = x exactly."""
    p = init_siren(hidden, width, 30.0, make_rng(seed, "loss_test"))
    return SirenParams(p.weights[:-1] + (np.zeros_like(p.weights[-1]),),
                       p.biases[:-1] + (np.zeros_like(p.biases[-1]),),
                       p.w0)


def perturbed(p, l, kind, idx, h):
    """Copy of params with one weight or bias entry shifted by h."""
    ws = [w.copy() for w in p.weights]
    bs = [b.copy() for b in p.biases]
    (ws if kind == "w" else bs)[l][idx] += h
    return SirenParams(tuple(ws), tuple(bs), p.w0)


def test_ncc_identical_negated_and_scaled():
    rng = np.random.default_rng(7)
    a = rng.normal(size=200)
    assert abs(ncc(a, a) - 1.0) < 1e-12
    assert abs(ncc(a, -a) + 1.0) < 1e-12
    assert abs(ncc(np.array([1.0, 2.0, 3.0]),
                   np.array([2.0, 4.0, 6.0])) - 1.0) < 1e-12


def test_ncc_affine_gain_invariance():
    rng = np.random.default_rng(8)
    a = rng.normal(size=500)
    assert abs(ncc(a, 2.0 * a + 3.0) - 1.0) < 1e-10
    assert abs(ncc(a, -0.5 * a + 11.0) + 1.0) < 1e-10


def test_ncc_zero_variance_returns_zero():
    a = np.random.default_rng(9).normal(size=50)
    assert ncc(a, np.full(50, 2.5)) == 0.0
    assert ncc(np.full(50, -1.0), a) == 0.0


def test_ncc_input_validation():
    with pytest.raises(ContractError):
        ncc(np.zeros(5), np.zeros(6))
    with pytest.raises(ContractError):
        ncc(np.zeros((5, 1)), np.zeros((5, 1)))
    with pytest.raises(ContractError):
        ncc(np.zeros(1), np.zeros(1))


def test_data_loss_perfect_match_and_negation():
    rng = np.random.default_rng(10)
    v = random_volume(rng, (9, 8, 7))
    neg = random_volume(rng, (9, 8, 7))
    neg.data.setflags(write=True)
    neg.data[:] = -v.data
    neg.data.setflags(write=False)
    t = make_norm_transform(v)
    coords = rng.uniform(-0.5, 0.5, size=(40, 3))
    batch = CoordBatch(coords, "source")
    ev = SpatialEval(phi=coords.copy(), jac=None, hess=None, order=0)
    loss_same, phibar = data_loss(v, v, batch, ev, t, t)
    assert abs(loss_same + 1.0) < 1e-12
    loss_neg, _ = data_loss(v, neg, batch, ev, t, t)
    assert abs(loss_neg - 1.0) < 1e-12
    assert phibar.shape == (40, 3)


def test_data_loss_adjoint_matches_finite_differences():
    rng = np.random.default_rng(11)
    v = random_volume(rng, (10, 9, 8), spacing=(1.1, 0.9, 1.4))
    w = random_volume(rng, (8, 10, 9), spacing=(0.8, 1.0, 1.2))
    tv, tw = make_norm_transform(v), make_norm_transform(w)
    coords = rng.uniform(-0.6, 0.6, size=(6, 3))
    batch = CoordBatch(coords, "source")
    phi = coords + rng.uniform(-0.05, 0.05, size=(6, 3))
    _, phibar = data_loss(v, w, batch,
                          SpatialEval(phi, None, None, 0), tv, tw)
    h = 1e-6
    fd = np.zeros_like(phi)
    for s in range(6):
        for k in range(3):
            for sgn in (1.0, -1.0):
                q = phi.copy()
                q[s, k] += sgn * h
                val, _ = data_loss(v, w, batch,
                                   SpatialEval(q, None, None, 0), tv, tw)
                fd[s, k] += sgn * val / (2 * h)
    assert rel_err(phibar, fd) < 1e-5


def test_jac_det_loss_closed_form():
    val, _ = jac_det_loss(diag_eval([[1.0, 1.0, 1.0]]))
    assert val == 0.0
    val2, _ = jac_det_loss(diag_eval([[2.0, 2.0, 2.0]]))
    assert val2 == 7.0
    valh, _ = jac_det_loss(diag_eval([[0.5, 0.5, 0.5]]))
    assert valh == 0.875
    mixed, _ = jac_det_loss(diag_eval([[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]]))
    assert mixed == 3.5


def test_jac_det_loss_is_asymmetric_in_scale():
    grow, _ = jac_det_loss(diag_eval([[2.0, 2.0, 2.0]]))
    shrink, _ = jac_det_loss(diag_eval([[0.5, 0.5, 0.5]]))
    assert grow == 7.0 and shrink == 0.875
    assert grow != shrink


def test_jac_det_loss_adjoint_matches_finite_differences():
    rng = np.random.default_rng(12)
    jac = np.eye(3) + 0.3 * rng.normal(size=(4, 3, 3))
    dets = np.linalg.det(jac)
    assert np.all(np.abs(dets - 1.0) > 0.02), "kink-free fixture"
    ev = SpatialEval(np.zeros((4, 3)), jac, None, 1)
    _, jacbar = jac_det_loss(ev)
    h = 1e-7
    fd = np.zeros_like(jac)
    for s in range(4):
        for i in range(3):
            for j in range(3):
                for sgn in (1.0, -1.0):
                    q = jac.copy()
                    q[s, i, j] += sgn * h
                    val, _ = jac_det_loss(SpatialEval(np.zeros((4, 3)),
                                                      q, None, 1))
                    fd[s, i, j] += sgn * val / (2 * h)
    assert rel_err(jacbar, fd) < 1e-6


def test_sym_jac_det_loss_closed_form():
    for d, want in ((1.0, 0.0), (2.0, 0.5), (0.5, 0.5), (-0.3, 10.0)):
        val, _ = sym_jac_det_loss(diag_eval([[d, 1.0, 1.0]]))
        assert val == want, (d, val)


def test_sym_jac_det_loss_growth_shrinkage_symmetry():
    for d in (2.0, 4.0, 8.0, 0.5, 0.25):
        va, _ = sym_jac_det_loss(diag_eval([[d, 1.0, 1.0]]))
        vb, _ = sym_jac_det_loss(diag_eval([[1.0 / d, 1.0, 1.0]]))
        assert va == vb, d
    rng = np.random.default_rng(13)
    for d in rng.uniform(0.1, 10.0, size=100):
        va, _ = sym_jac_det_loss(diag_eval([[d, 1.0, 1.0]]))
        vb, _ = sym_jac_det_loss(diag_eval([[1.0 / d, 1.0, 1.0]]))
        assert abs(va - vb) <= 1e-11 * max(va, vb, 1e-6), d


def test_sym_jac_det_loss_clip_and_zero_adjoint():
    val, jacbar = sym_jac_det_loss(diag_eval([[-0.3, 1.0, 1.0],
                                              [100.0, 1.0, 1.0]]))
    assert val == 10.0
    assert np.all(jacbar == 0.0)
    val2, _ = sym_jac_det_loss(diag_eval([[-0.3, 1.0, 1.0]]), tau=3.0)
    assert val2 == 3.0
    with pytest.raises(ContractError):
        sym_jac_det_loss(diag_eval([[1.0, 1.0, 1.0]]), tau=0.0)


def test_sym_jac_det_loss_adjoint_matches_finite_differences():
    rng = np.random.default_rng(14)
    jac = np.eye(3) + 0.25 * rng.normal(size=(5, 3, 3))
    assert np.all(np.linalg.det(jac) > 0.1), "unclipped fixture"
    ev = SpatialEval(np.zeros((5, 3)), jac, None, 1)
    _, jacbar = sym_jac_det_loss(ev)
    h = 1e-7
    fd = np.zeros_like(jac)
    for s in range(5):
        for i in range(3):
            for j in range(3):
                for sgn in (1.0, -1.0):
                    q = jac.copy()
                    q[s, i, j] += sgn * h
                    val, _ = sym_jac_det_loss(SpatialEval(np.zeros((5, 3)),
                                                          q, None, 1))
                    fd[s, i, j] += sgn * val / (2 * h)
    assert rel_err(jacbar, fd) < 1e-6


def test_bending_loss_closed_form():
    hz = np.zeros((2, 3, 3, 3))
    val, hessbar = bending_loss(SpatialEval(np.zeros((2, 3)), np.zeros((2, 3, 3)),
                                            hz, 2))
    assert val == 0.0 and np.all(hessbar == 0.0)
    hm = np.zeros((1, 3, 3, 3))
    hm[0, 1, 0, 2] = 0.7
    hm[0, 1, 2, 0] = 0.7
    val_mixed, _ = bending_loss(SpatialEval(np.zeros((1, 3)),
                                            np.zeros((1, 3, 3)), hm, 2))
    assert abs(val_mixed - 2 * 0.7 ** 2) < 1e-15
    hp = np.zeros((1, 3, 3, 3))
    hp[0, 2, 1, 1] = -0.4
    val_pure, _ = bending_loss(SpatialEval(np.zeros((1, 3)),
                                           np.zeros((1, 3, 3)), hp, 2))
    assert abs(val_pure - 0.4 ** 2) < 1e-15


def test_bending_loss_adjoint_matches_finite_differences():
    rng = np.random.default_rng(15)
    h4 = rng.normal(size=(3, 3, 3, 3))
    h4 = 0.5 * (h4 + h4.transpose(0, 1, 3, 2))
    ev = SpatialEval(np.zeros((3, 3)), np.zeros((3, 3, 3)), h4, 2)
    _, hessbar = bending_loss(ev)
    step = 1e-6
    fd = np.zeros_like(h4)
    it = np.nditer(h4, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = h4.copy()
        hi[idx] += step
        lo = h4.copy()
        lo[idx] -= step
        vp, _ = bending_loss(SpatialEval(np.zeros((3, 3)),
                                         np.zeros((3, 3, 3)), hi, 2))
        vm, _ = bending_loss(SpatialEval(np.zeros((3, 3)),
                                         np.zeros((3, 3, 3)), lo, 2))
        fd[idx] = (vp - vm) / (2 * step)
    assert rel_err(hessbar, fd) < 1e-7


def test_cycle_identity_pair_is_zero():
    inner, outer = identity_net(1), identity_net(2)
    coords = np.random.default_rng(16).uniform(-0.8, 0.8, size=(12, 3))
    batch = CoordBatch(coords, "source")
    val, gi, go = cycle_loss(batch, inner, outer)
    assert val == 0.0
    for gw, gb in gi + go:
        assert np.all(gw == 0.0) and np.all(gb == 0.0)


def test_cycle_constant_shift_costs_squared_norm():
    outer = identity_net(3)
    rng = np.random.default_rng(17)
    x = rng.uniform(-0.5, 0.5, size=(30, 3))
    c = np.array([0.01, -0.02, 0.015])
    val, phibar, _ = cycle_terms(x + c, x, outer)
    assert abs(val - float(c @ c)) < 1e-14
    assert np.allclose(phibar, np.tile(2 * c / 30, (30, 1)), atol=1e-12)


def test_cycle_adjoints_match_finite_differences():
    rng = make_rng(18, "cycle_fd")
    inner = init_siren(1, 8, 30.0, rng)
    outer = init_siren(1, 8, 30.0, rng)
    coords = np.random.default_rng(19).uniform(-0.7, 0.7, size=(8, 3))
    batch = CoordBatch(coords, "source")
    _, gi, go = cycle_loss(batch, inner, outer)
    h = 1e-6
    worst = 0.0
    for net, grads, which in ((inner, gi, "inner"), (outer, go, "outer")):
        for l, (gw, gb) in enumerate(grads):
            for kind, g in (("w", gw), ("b", gb)):
                it = np.nditer(g, flags=["multi_index"])
                for _ in it:
                    idx = it.multi_index
                    args = {"inner": inner, "outer": outer}
                    args[which] = perturbed(net, l, kind, idx, h)
                    vp, _, _ = cycle_loss(batch, args["inner"], args["outer"])
                    args[which] = perturbed(net, l, kind, idx, -h)
                    vm, _, _ = cycle_loss(batch, args["inner"], args["outer"])
                    fd = (vp - vm) / (2 * h)
                    worst = max(worst, abs(g[idx] - fd) / max(abs(fd), 1e-3))
    assert worst < 1e-4, worst


def test_cycle_inner_phibar_matches_finite_differences():
    outer = init_siren(1, 8, 30.0, make_rng(20, "cycle_fd"))
    rng = np.random.default_rng(21)
    x = rng.uniform(-0.6, 0.6, size=(5, 3))
    inner_phi = x + rng.uniform(-0.05, 0.05, size=(5, 3))
    _, phibar, _ = cycle_terms(inner_phi, x, outer)
    h = 1e-6
    fd = np.zeros_like(inner_phi)
    for s in range(5):
        for k in range(3):
            for sgn in (1.0, -1.0):
                q = inner_phi.copy()
                q[s, k] += sgn * h
                val, _, _ = cycle_terms(q, x, outer)
                fd[s, k] += sgn * val / (2 * h)
    assert rel_err(phibar, fd) < 1e-5


def test_cycle_shape_mismatch_rejected():
    outer = identity_net(4)
    with pytest.raises(ContractError):
        cycle_terms(np.zeros((4, 3)), np.zeros((5, 3)), outer)


def test_regularizer_dispatch():
    rng = np.random.default_rng(22)
    jac = np.eye(3) + 0.1 * rng.normal(size=(6, 3, 3))
    hess = rng.normal(size=(6, 3, 3, 3))
    hess = 0.5 * (hess + hess.transpose(0, 1, 3, 2))
    ev = SpatialEval(np.zeros((6, 3)), jac, hess, 2)

    wj = LossWeights(reg_kind="jacobian")
    vj, jb, hb = regularizer(ev, wj)
    assert hb is None and jb is not None
    assert vj == jac_det_loss(ev)[0]

    ws = LossWeights(reg_kind="symmetric_jacobian", tau=5.0)
    vs, jb2, hb2 = regularizer(ev, ws)
    assert hb2 is None and jb2 is not None
    assert vs == sym_jac_det_loss(ev, 5.0)[0]

    wb = LossWeights(reg_kind="bending")
    vb, jb3, hb3 = regularizer(ev, wb)
    assert jb3 is None and hb3 is not None
    assert vb == bending_loss(ev)[0]

    assert wj.required_order == 1
    assert ws.required_order == 1
    assert wb.required_order == 2


def test_regularizer_order_requirements_enforced():
    ev1 = SpatialEval(np.zeros((2, 3)), np.zeros((2, 3, 3)), None, 1)
    with pytest.raises(ContractError):
        regularizer(ev1, LossWeights(reg_kind="bending"))
    ev0 = SpatialEval(np.zeros((2, 3)), None, None, 0)
    with pytest.raises(ContractError):
        regularizer(ev0, LossWeights(reg_kind="jacobian"))
    with pytest.raises(ContractError):
        regularizer(ev0, LossWeights(reg_kind="symmetric_jacobian"))


def test_total_loss_decomposition():
    w = LossWeights(alpha=0.05, beta=1e-3)
    br = total_loss(-0.9, -0.8, 0.3, 0.4, 0.02, 0.03, w)
    manual = -0.9 + -0.8 + 0.05 * (0.3 + 0.4) + 1e-3 * (0.02 + 0.03)
    assert abs(br.total - manual) < 1e-12
    d = br.to_dict()
    assert sorted(d) == ["cycle_bf", "cycle_fb", "data_b", "data_f",
                         "reg_b", "reg_f", "total"]
    w0 = LossWeights(alpha=0.0, beta=0.0)
    br0 = total_loss(-0.9, -0.8, 123.0, 456.0, 7.0, 8.0, w0)
    assert br0.total == -0.9 + -0.8


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ContractError):
        LossWeights(beta=-1e-9)
    with pytest.raises(ContractError):
        LossWeights(tau=0.0)
    with pytest.raises(ContractError):
        LossWeights(reg_kind="ridge")
    w = LossWeights()
    assert (w.alpha, w.beta, w.tau, w.reg_kind) == \
        (0.05, 1e-3, 10.0, "symmetric_jacobian")
