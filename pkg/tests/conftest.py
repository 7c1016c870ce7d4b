"""Shared test helpers: the central finite-difference gradient oracle.

The oracle is independent of the tape: it only re-runs a caller-supplied
forward function, so analytic backward rules are checked against plain
arithmetic.
"""

import numpy as np


def central_diff_grad(f, x, step=1e-5):
    """d f(x) / d x by central differences; f maps ndarray -> scalar."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(analytic, numeric, floor=1e-12):
    """Normwise relative error, robust to zero entries."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), floor)
    return np.abs(analytic - numeric).max(initial=0.0) / denom
