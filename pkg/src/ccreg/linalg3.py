"""Closed-form 3x3 determinant, cofactor and inverse for batched Jacobians.

Shapes are (..., 3, 3); everything is vectorized and float64. The cofactor
matrix C satisfies d(det J)/dJ = C and J^{-1} = C^T / det(J) (adjugate
inversion), which keeps the determinant machinery of the volume-change
penalty and the inverse used at inference numerically identical.
"""

from __future__ import annotations

import numpy as np


def det3(j: np.ndarray) -> np.ndarray:
    a, b, c = j[..., 0, 0], j[..., 0, 1], j[..., 0, 2]
    d, e, f = j[..., 1, 0], j[..., 1, 1], j[..., 1, 2]
    g, h, i = j[..., 2, 0], j[..., 2, 1], j[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def cofactor3(j: np.ndarray) -> np.ndarray:
    a, b, c = j[..., 0, 0], j[..., 0, 1], j[..., 0, 2]
    d, e, f = j[..., 1, 0], j[..., 1, 1], j[..., 1, 2]
    g, h, i = j[..., 2, 0], j[..., 2, 1], j[..., 2, 2]
    out = np.empty_like(j)
    out[..., 0, 0] = e * i - f * h
    out[..., 0, 1] = -(d * i - f * g)
    out[..., 0, 2] = d * h - e * g
    out[..., 1, 0] = -(b * i - c * h)
    out[..., 1, 1] = a * i - c * g
    out[..., 1, 2] = -(a * h - b * g)
    out[..., 2, 0] = b * f - c * e
    out[..., 2, 1] = -(a * f - c * d)
    out[..., 2, 2] = a * e - b * d
    return out


def inv3(j: np.ndarray, det: np.ndarray | None = None) -> np.ndarray:
    """Adjugate inverse; caller is responsible for checking conditioning."""
    if det is None:
        det = det3(j)
    adj = np.swapaxes(cofactor3(j), -1, -2)
    return adj / det[..., None, None]


def cond2(j: np.ndarray) -> np.ndarray:
    """Spectral condition number per matrix; inf where singular."""
    s = np.linalg.svd(j, compute_uv=False)
    smin = s[..., -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        c = s[..., 0] / smin
    return np.where(smin > 0, c, np.inf)
