"""Kernel backend selection.

Two interchangeable implementations of the hot kernels exist: a compiled
Cython core (built at install time when a C compiler is available) and the
pure-numpy reference in :mod:`ccreg.backend.numpy_impl`. Both expose

* ``siren_forward(ws, bs, w0, x, order)``
* ``siren_backward(cache, ubar, dubar, d2ubar, need_xbar)``
* ``trilinear(vol, pts)``

with identical semantics; they agree to floating-point roundoff and each is
individually deterministic. The active backend is chosen once at import:
the compiled core when importable, else numpy. Set ``CCREG_BACKEND=python``
or ``CCREG_BACKEND=cython`` to force one (forcing an unavailable backend
raises). ``use()`` switches at runtime, mainly for tests and benchmarks.
"""

from __future__ import annotations

import os

from . import numpy_impl

_IMPLS = {"python": numpy_impl}
try:
    from . import _core  # type: ignore[attr-defined]

    _IMPLS["cython"] = _core
except ImportError:
    _core = None

_active = None


def available_backends() -> tuple[str, ...]:
    """Names of importable backends, reference implementation first."""
    return tuple(sorted(_IMPLS, key=lambda n: (n != "python", n)))


def use(name: str) -> None:
    """Select the active backend by name ('python' or 'cython')."""
    global _active
    if name not in _IMPLS:
        raise ValueError(
            f"backend {name!r} not available; have {sorted(_IMPLS)}")
    _active = name


def active_backend() -> str:
    """Name of the backend the module-level kernels dispatch to."""
    return _active


def _impl():
    return _IMPLS[_active]


def siren_forward(ws, bs, w0, x, order):
    return _impl().siren_forward(ws, bs, w0, x, order)


def siren_backward(cache, ubar, dubar, d2ubar, need_xbar=False):
    return _impl().siren_backward(cache, ubar, dubar, d2ubar, need_xbar)


def trilinear(vol, pts):
    return _impl().trilinear(vol, pts)


_env = os.environ.get("CCREG_BACKEND", "").strip().lower()
if _env:
    use(_env)
else:
    use("cython" if "cython" in _IMPLS else "python")
