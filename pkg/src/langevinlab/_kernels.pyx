# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled Euler-Maruyama chunk integrators for the built-in variants.

Hot path for the isotropic standard-Gaussian target (grad U = theta).  The
pure-Python twin in _kernels_py.py implements the same arithmetic in the same
order; both must produce bit-identical trajectories (the build disables FMA
contraction for this reason).
"""

from libc.math cimport sqrt, isfinite

import numpy as np

BACKEND = "compiled"

DEF GUARD = 1.0e8

OVERDAMPED = 0
UNDERDAMPED = 1
NONREVERSIBLE = 2
MIRROR = 3
HIGHORDER = 4
HFHR = 5


def integrate_chunk(int variant, double eta, double[::1] z, double[:, ::1] noise,
                    double[:, ::1] out, double[::1] par, double[:, ::1] jmat, int d):
    """Advance z through noise.shape[0] EM steps, writing each state to out.

    Returns -1 on success, else the index of the first step whose result was
    non-finite or left |z_i| <= 1e8; z then holds the last valid state and
    only out rows before that index are meaningful.
    """
    cdef Py_ssize_t steps = noise.shape[0]
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t k, i, j
    cdef double s2e = sqrt(2.0 * eta)
    cdef double gamma, alpha, beta, eps, sr, st, acc, den, f, amp, val
    cdef double[::1] tmp = np.empty(n)
    cdef bint bad

    if variant == UNDERDAMPED:
        gamma = par[0]
        sr = sqrt(2.0 * gamma * eta)
    elif variant == MIRROR:
        eps = par[0]
    elif variant == HIGHORDER:
        gamma = par[0]
        alpha = par[1]
        sr = sqrt(2.0 * alpha * eta)
    elif variant == HFHR:
        beta = par[0]
        alpha = par[1]
        st = sqrt(2.0 * beta * eta)
        sr = sqrt(2.0 * alpha * eta)

    for k in range(steps):
        if variant == OVERDAMPED:
            for i in range(n):
                tmp[i] = z[i] + eta * (-z[i]) + s2e * noise[k, i]
        elif variant == UNDERDAMPED:
            for i in range(d):
                tmp[i] = z[i] + eta * z[d + i]
                tmp[d + i] = z[d + i] + eta * (-gamma * z[d + i] - z[i]) + sr * noise[k, d + i]
        elif variant == NONREVERSIBLE:
            for i in range(d):
                acc = z[i]
                for j in range(d):
                    acc = acc + jmat[i, j] * z[j]
                tmp[i] = z[i] + eta * (-acc) + s2e * noise[k, i]
        elif variant == MIRROR:
            for i in range(n):
                den = 3.0 * z[i] * z[i] + eps
                f = -6.0 * z[i] / (den * den) - z[i] / den
                amp = sqrt(2.0 * eta / den)
                tmp[i] = z[i] + eta * f + amp * noise[k, i]
        elif variant == HIGHORDER:
            for i in range(d):
                tmp[i] = z[i] + eta * z[d + i]
                tmp[d + i] = z[d + i] + eta * (-z[i] + gamma * z[2 * d + i])
                tmp[2 * d + i] = (z[2 * d + i]
                                  + eta * (-gamma * z[d + i] - alpha * z[2 * d + i])
                                  + sr * noise[k, 2 * d + i])
        elif variant == HFHR:
            for i in range(d):
                tmp[i] = z[i] + eta * (z[d + i] - beta * z[i]) + st * noise[k, i]
                tmp[d + i] = z[d + i] + eta * (-alpha * z[d + i] - z[i]) + sr * noise[k, d + i]
        else:
            return 0

        bad = False
        for i in range(n):
            val = tmp[i]
            if not isfinite(val) or val > GUARD or val < -GUARD:
                bad = True
                break
        if bad:
            return k
        for i in range(n):
            z[i] = tmp[i]
            out[k, i] = tmp[i]

    return -1
