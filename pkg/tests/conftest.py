"""Shared fixtures and small builders for the test suite."""

import numpy as np
import pytest

from ccreg import backend
from ccreg.volume_io import Volume3D


@pytest.fixture
def restore_backend():
    """Let a test switch kernel backends and put the original back."""
    before = backend.active_backend()
    yield
    backend.use(before)


def random_volume(rng, dims=(6, 5, 4), spacing=(1.0, 1.0, 1.0),
                  origin=(0.0, 0.0, 0.0), dtype="float32"):
    nx, ny, nz = dims
    if dtype == "uint8":
        data = rng.integers(0, 256, size=(nz, ny, nx), dtype=np.uint8)
    else:
        data = rng.normal(size=(nz, ny, nx)).astype(np.float32)
    return Volume3D(dims=dims, spacing=spacing, origin=origin, data=data,
                    dtype=dtype)


def full_mask(vol):
    nx, ny, nz = vol.dims
    return Volume3D(dims=vol.dims, spacing=vol.spacing, origin=vol.origin,
                    data=np.ones((nz, ny, nx), dtype=np.uint8), dtype="uint8")


def rel_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.abs(want).max()
    if denom == 0.0:
        return np.abs(got).max()
    return np.abs(got - want).max() / denom
