"""Central finite-difference gradient verification.

Gradient checks must run in double precision: the tolerances used in the
test suite are unreachable in single precision.
"""

from __future__ import annotations

import numpy as np


def numeric_gradient(f, x, step=1e-5):
    """Central finite differences of scalar-valued ``f`` at flat array ``x``.

    ``f`` receives a perturbed copy; ``x`` itself is never modified.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        fp = float(f(xp.reshape(x.shape)))
        xm = flat.copy()
        xm[i] -= step
        fm = float(f(xm.reshape(x.shape)))
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(floor, |a|, |n|) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(n)))
    return float(np.max(np.abs(a - n) / denom))


def assert_gradients_close(analytic, numeric, rtol, floor=1e-6):
    err = max_relative_error(analytic, numeric, floor=floor)
    if err > rtol:
        raise AssertionError(f"gradient mismatch: max relative error {err:.3e} > {rtol:.1e}")
