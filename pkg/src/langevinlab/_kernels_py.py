"""Pure-Python twin of the compiled chunk integrators.

Same contract and, crucially, the same floating-point operation order as
_kernels.pyx, so either backend yields bit-identical trajectories.
"""

import numpy as np

BACKEND = "python"

_GUARD = 1.0e8

OVERDAMPED = 0
UNDERDAMPED = 1
NONREVERSIBLE = 2
MIRROR = 3
HIGHORDER = 4
HFHR = 5


def integrate_chunk(variant, eta, z, noise, out, par, jmat, d):
    """See _kernels.integrate_chunk; identical semantics."""
    steps = noise.shape[0]
    s2e = np.sqrt(2.0 * eta)

    if variant == UNDERDAMPED:
        gamma = par[0]
        sr = np.sqrt(2.0 * gamma * eta)
    elif variant == MIRROR:
        eps = par[0]
    elif variant == HIGHORDER:
        gamma, alpha = par[0], par[1]
        sr = np.sqrt(2.0 * alpha * eta)
    elif variant == HFHR:
        beta, alpha = par[0], par[1]
        st = np.sqrt(2.0 * beta * eta)
        sr = np.sqrt(2.0 * alpha * eta)

    for k in range(steps):
        xi = noise[k]
        if variant == OVERDAMPED:
            tmp = z + eta * (-z) + s2e * xi
        elif variant == UNDERDAMPED:
            th, r = z[:d], z[d:]
            tmp = np.concatenate([
                th + eta * r,
                r + eta * (-gamma * r - th) + sr * xi[d:],
            ])
        elif variant == NONREVERSIBLE:
            # column-order accumulation matches the compiled inner loop
            acc = z.copy()
            for j in range(d):
                acc = acc + jmat[:, j] * z[j]
            tmp = z + eta * (-acc) + s2e * xi
        elif variant == MIRROR:
            den = 3.0 * z * z + eps
            f = -6.0 * z / (den * den) - z / den
            amp = np.sqrt(2.0 * eta / den)
            tmp = z + eta * f + amp * xi
        elif variant == HIGHORDER:
            th, p, r = z[:d], z[d:2 * d], z[2 * d:]
            tmp = np.concatenate([
                th + eta * p,
                p + eta * (-th + gamma * r),
                r + eta * (-gamma * p - alpha * r) + sr * xi[2 * d:],
            ])
        elif variant == HFHR:
            th, r = z[:d], z[d:]
            tmp = np.concatenate([
                th + eta * (r - beta * th) + st * xi[:d],
                r + eta * (-alpha * r - th) + sr * xi[d:],
            ])
        else:
            return 0

        if not np.all(np.isfinite(tmp)) or np.max(np.abs(tmp)) > _GUARD:
            return k
        z[:] = tmp
        out[k, :] = tmp

    return -1
