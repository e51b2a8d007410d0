"""Central finite-difference helpers used for gradient checks and corrections."""

import numpy as np


def fd_gradient(f, x, step=1e-4):
    """Central-difference gradient of a scalar function at x."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2.0 * step)
    return g


def fd_jacobian(f, x, step=1e-4):
    """Central-difference Jacobian of a vector (or matrix) valued function.

    Returns an array of shape f(x).shape + x.shape; entry [..., j] is the
    derivative of f with respect to x_j.
    """
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    out = np.empty(f0.shape + (x.size,))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        out[..., j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2.0 * step)
    return out
