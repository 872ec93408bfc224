"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from warpfit.gradcheck import check_gradients

FD_TOL = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_mask(rng, shape, fill=0.35):
    """Random binary mask as float32 with roughly ``fill`` coverage."""
    return (rng.random(shape) < fill).astype(np.float32)


def fd_ok(fn, *arrays, tol=FD_TOL):
    """Run a finite-difference check and return the worst relative error."""
    err = check_gradients(fn, *arrays)
    assert err < tol, f"finite-difference relative error {err:.3e} >= {tol}"
    return err
