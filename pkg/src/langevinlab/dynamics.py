"""Generalized Langevin dynamics assembled from diffusion/curl/Hamiltonian data.

A DynamicsSpec bundles the state dimension, the diffusion matrix D(z), an
anti-symmetric curl matrix Q(z), the Hamiltonian H(z) with its gradient, and
the row-divergence correction Gamma(z).  The drift is
f(z) = -[D(z)+Q(z)] grad H(z) + Gamma(z); for each built-in variant a closed
form of f is used at runtime, and the generic assembly is kept for
cross-checks.  Stationarity of exp(-H) is verified numerically through
finite-difference Fokker-Planck residuals.
"""

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from ._fd import fd_jacobian
from .errors import NumericError, UsageError
from .potentials import MirrorMetric, PotentialModel

__all__ = [
    "AugLayout",
    "DynamicsSpec",
    "VARIANTS",
    "build_variant_spec",
    "build_custom_spec",
    "random_antisymmetric",
    "mirror_paper_curl",
    "drift",
    "generic_drift",
    "gamma_correction",
    "stationarity_residual",
    "curl_condition_residual",
]

VARIANTS = ("overdamped", "underdamped", "nonreversible", "mirror", "highorder", "hfhr")


@dataclass(frozen=True)
class AugLayout:
    """Which coordinates of the augmented state are theta, p and r."""

    n: int
    theta: slice
    p: Optional[slice] = None
    r: Optional[slice] = None

    @property
    def d(self):
        return self.theta.stop - self.theta.start


@dataclass(frozen=True)
class DynamicsSpec:
    """The (n, D, Q, H, Gamma) bundle of one Langevin dynamics.

    ``diff_diag_const`` holds the diagonal of D when D is constant and
    diagonal (all built-ins except mirror); ``diff_diag_fn`` evaluates the
    diagonal at a point for position-dependent diagonal D (mirror).  Custom
    specs with dense D leave both unset and fall back to a dense square root.
    """

    n: int
    variant: str
    D: Callable[[np.ndarray], np.ndarray]
    Q: Callable[[np.ndarray], np.ndarray]
    H: Callable[[np.ndarray], float]
    grad_H: Callable[[np.ndarray], np.ndarray]
    Gamma: Optional[Callable[[np.ndarray], np.ndarray]]
    params: dict
    aug_layout: AugLayout
    potential: Optional[PotentialModel] = None
    mirror: Optional[MirrorMetric] = None
    diff_diag_const: Optional[np.ndarray] = None
    diff_diag_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None


def random_antisymmetric(dim: int, seed: int = 0, scale: float = 1.0) -> np.ndarray:
    """J = A - A^T with standard normal A, optionally rescaled."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x4A]))
    a = rng.standard_normal((dim, dim))
    return scale * (a - a.T)


def _block_diag_vector(n, pieces):
    out = np.zeros(n)
    for sl, val in pieces:
        out[sl] = val
    return out


def _require(params, keys, kind):
    missing = [k for k in keys if k not in params or params[k] is None]
    if missing:
        raise UsageError(f"variant {kind!r} requires parameters {missing}")


def build_variant_spec(kind: str, potential: PotentialModel, params: Optional[dict] = None,
                       mirror: Optional[MirrorMetric] = None) -> DynamicsSpec:
    """Assemble the DynamicsSpec of one of the six built-in variants.

    Required params: gamma (underdamped); gamma, alpha (highorder);
    alpha, beta (hfhr); J (nonreversible).  The mirror variant takes its
    metric from ``mirror``.
    """
    params = dict(params or {})
    d = potential.dim
    U, gU = potential.eval, potential.grad

    if kind == "overdamped":
        n = d
        layout = AugLayout(n, slice(0, d))
        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.eye(n),
            Q=lambda z: np.zeros((n, n)),
            H=lambda z: float(U(z)),
            grad_H=lambda z: np.asarray(gU(z), dtype=float),
            Gamma=lambda z: np.zeros(n),
            params=params, aug_layout=layout, potential=potential,
            diff_diag_const=np.ones(n),
        )

    elif kind == "nonreversible":
        _require(params, ["J"], kind)
        J = np.asarray(params["J"], dtype=float)
        if J.shape != (d, d):
            raise UsageError(f"J has shape {J.shape}, expected ({d}, {d})")
        if np.max(np.abs(J + J.T)) > 1e-12:
            raise UsageError("J must be anti-symmetric (J + J^T = 0)")
        n = d
        layout = AugLayout(n, slice(0, d))
        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.eye(n),
            Q=lambda z: J,
            H=lambda z: float(U(z)),
            grad_H=lambda z: np.asarray(gU(z), dtype=float),
            Gamma=lambda z: np.zeros(n),
            params={**params, "J": J}, aug_layout=layout, potential=potential,
            diff_diag_const=np.ones(n),
        )

    elif kind == "underdamped":
        _require(params, ["gamma"], kind)
        gamma = float(params["gamma"])
        n = 2 * d
        th, rr = slice(0, d), slice(d, 2 * d)
        layout = AugLayout(n, th, r=rr)
        Qmat = np.zeros((n, n))
        Qmat[th, rr] = -np.eye(d)
        Qmat[rr, th] = np.eye(d)

        def _H(z):
            return float(U(z[th])) + 0.5 * float(np.dot(z[rr], z[rr]))

        def _gH(z):
            return np.concatenate([np.asarray(gU(z[th]), dtype=float), z[rr]])

        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.diag(_block_diag_vector(n, [(rr, gamma)])),
            Q=lambda z: Qmat,
            H=_H, grad_H=_gH,
            Gamma=lambda z: np.zeros(n),
            params=params, aug_layout=layout, potential=potential,
            diff_diag_const=_block_diag_vector(n, [(rr, gamma)]),
        )

    elif kind == "highorder":
        _require(params, ["gamma", "alpha"], kind)
        gamma, alpha = float(params["gamma"]), float(params["alpha"])
        n = 3 * d
        th, pp, rr = slice(0, d), slice(d, 2 * d), slice(2 * d, 3 * d)
        layout = AugLayout(n, th, p=pp, r=rr)
        Qmat = np.zeros((n, n))
        Qmat[th, pp] = -np.eye(d)
        Qmat[pp, th] = np.eye(d)
        Qmat[pp, rr] = -gamma * np.eye(d)
        Qmat[rr, pp] = gamma * np.eye(d)

        def _H(z):
            return (float(U(z[th])) + 0.5 * float(np.dot(z[pp], z[pp]))
                    + 0.5 * float(np.dot(z[rr], z[rr])))

        def _gH(z):
            return np.concatenate([np.asarray(gU(z[th]), dtype=float), z[pp], z[rr]])

        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.diag(_block_diag_vector(n, [(rr, alpha)])),
            Q=lambda z: Qmat,
            H=_H, grad_H=_gH,
            Gamma=lambda z: np.zeros(n),
            params=params, aug_layout=layout, potential=potential,
            diff_diag_const=_block_diag_vector(n, [(rr, alpha)]),
        )

    elif kind == "hfhr":
        _require(params, ["alpha", "beta"], kind)
        alpha, beta = float(params["alpha"]), float(params["beta"])
        n = 2 * d
        th, rr = slice(0, d), slice(d, 2 * d)
        layout = AugLayout(n, th, r=rr)
        Qmat = np.zeros((n, n))
        Qmat[th, rr] = -np.eye(d)
        Qmat[rr, th] = np.eye(d)

        def _H(z):
            return float(U(z[th])) + 0.5 * float(np.dot(z[rr], z[rr]))

        def _gH(z):
            return np.concatenate([np.asarray(gU(z[th]), dtype=float), z[rr]])

        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.diag(_block_diag_vector(n, [(th, beta), (rr, alpha)])),
            Q=lambda z: Qmat,
            H=_H, grad_H=_gH,
            Gamma=lambda z: np.zeros(n),
            params=params, aug_layout=layout, potential=potential,
            diff_diag_const=_block_diag_vector(n, [(th, beta), (rr, alpha)]),
        )

    elif kind == "mirror":
        if mirror is None:
            raise UsageError("mirror variant requires a MirrorMetric")
        if mirror.dim != d:
            raise UsageError("mirror metric dimension does not match potential")
        n = d
        layout = AugLayout(n, slice(0, d))
        # The canonical spec uses Q = 0: the curl matrix with exp(U) entries
        # generates an identically vanishing anti-symmetric part, and its
        # entries overflow for confining U.  mirror_paper_curl() rebuilds it
        # for bounded-region residual diagnostics.
        spec = DynamicsSpec(
            n=n, variant=kind,
            D=lambda z: np.asarray(mirror.metric(z), dtype=float),
            Q=lambda z: np.zeros((n, n)),
            H=lambda z: float(U(z)),
            grad_H=lambda z: np.asarray(gU(z), dtype=float),
            Gamma=lambda z: np.asarray(mirror.metric_divergence(z), dtype=float),
            params={**params, "mirror_eps": mirror.regularization_eps},
            aug_layout=layout, potential=potential, mirror=mirror,
            diff_diag_fn=lambda z: np.diag(np.asarray(mirror.metric(z), dtype=float)),
        )

    else:
        raise UsageError(f"unknown variant {kind!r}; expected one of {VARIANTS}")

    return spec


def build_custom_spec(n, D, Q, H, grad_H=None, Gamma=None, params=None,
                      aug_layout=None, probe_points=None) -> DynamicsSpec:
    """DynamicsSpec from raw callables, validated at probe points.

    Q must be anti-symmetric to 1e-12 and D symmetric with eigenvalues
    >= -1e-12 at every probe; grad_H (if given) must match finite differences
    of H.  Violations raise UsageError.
    """
    if probe_points is None:
        rng = np.random.Generator(np.random.Philox(key=[7, 0x51]))
        probe_points = [np.zeros(n)] + [rng.uniform(-1.0, 1.0, size=n) for _ in range(4)]
    if grad_H is None:
        from ._fd import fd_gradient

        def grad_H(z, _H=H):
            return fd_gradient(_H, z, 1e-5)

    for z in probe_points:
        q = np.asarray(Q(z), dtype=float)
        if q.shape != (n, n) or np.max(np.abs(q + q.T)) > 1e-12:
            raise UsageError("Q(z) must be an anti-symmetric (n, n) matrix")
        dmat = np.asarray(D(z), dtype=float)
        if dmat.shape != (n, n) or np.max(np.abs(dmat - dmat.T)) > 1e-10:
            raise UsageError("D(z) must be a symmetric (n, n) matrix")
        if np.min(np.linalg.eigvalsh(dmat)) < -1e-12:
            raise UsageError("D(z) must be positive semidefinite")

    layout = aug_layout or AugLayout(n, slice(0, n))
    return DynamicsSpec(
        n=n, variant="custom", D=D, Q=Q, H=H, grad_H=grad_H, Gamma=Gamma,
        params=dict(params or {}), aug_layout=layout,
    )


def mirror_paper_curl(spec: DynamicsSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Curl matrix with +-exp(U) entries above/below the diagonal.

    Only meaningful on regions where U stays moderate; used by the
    curl-condition diagnostic, never by the runtime drift.
    """
    if spec.variant != "mirror":
        raise UsageError("paper curl matrix is defined for the mirror variant")
    U = spec.potential.eval
    n = spec.n
    signs = np.triu(np.ones((n, n)), 1) - np.tril(np.ones((n, n)), -1)

    def _curl(z):
        return signs * np.exp(float(U(z)))

    return _curl


def gamma_correction(spec: DynamicsSpec, z, fd_step: float = 1e-3) -> np.ndarray:
    """Row divergence of D + Q: Gamma_i = sum_j d/dz_j (D+Q)_ij.

    Uses the spec's analytic divergence when present, otherwise central finite
    differences with per-coordinate step fd_step * (1 + |z_j|).
    """
    z = np.asarray(z, dtype=float)
    if spec.Gamma is not None:
        return np.asarray(spec.Gamma(z), dtype=float)
    n = spec.n
    out = np.zeros(n)
    for j in range(n):
        h = fd_step * (1.0 + abs(z[j]))
        e = np.zeros(n)
        e[j] = h
        mp = np.asarray(spec.D(z + e), dtype=float) + np.asarray(spec.Q(z + e), dtype=float)
        mm = np.asarray(spec.D(z - e), dtype=float) + np.asarray(spec.Q(z - e), dtype=float)
        out += (mp[:, j] - mm[:, j]) / (2.0 * h)
    return out


def generic_drift(spec: DynamicsSpec, z, fd_step: float = 1e-3) -> np.ndarray:
    """f(z) = -[D(z)+Q(z)] grad H(z) + Gamma(z), assembled from the callables."""
    z = np.asarray(z, dtype=float)
    m = np.asarray(spec.D(z), dtype=float) + np.asarray(spec.Q(z), dtype=float)
    return -m @ np.asarray(spec.grad_H(z), dtype=float) + gamma_correction(spec, z, fd_step)


def drift(spec: DynamicsSpec, z) -> np.ndarray:
    """Drift of the dynamics; closed form per built-in variant.

    Raises NumericError when an intermediate is non-finite, naming the first
    offending coordinate.
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (spec.n,):
        raise UsageError(f"state has shape {z.shape}, expected ({spec.n},)")
    lay = spec.aug_layout
    kind = spec.variant

    if kind == "overdamped":
        f = -np.asarray(spec.potential.grad(z), dtype=float)
    elif kind == "nonreversible":
        g = np.asarray(spec.potential.grad(z), dtype=float)
        f = -(g + spec.params["J"] @ g)
    elif kind == "underdamped":
        gamma = spec.params["gamma"]
        th, r = z[lay.theta], z[lay.r]
        g = np.asarray(spec.potential.grad(th), dtype=float)
        f = np.concatenate([r, -gamma * r - g])
    elif kind == "highorder":
        gamma, alpha = spec.params["gamma"], spec.params["alpha"]
        th, p, r = z[lay.theta], z[lay.p], z[lay.r]
        g = np.asarray(spec.potential.grad(th), dtype=float)
        f = np.concatenate([p, -g + gamma * r, -gamma * p - alpha * r])
    elif kind == "hfhr":
        alpha, beta = spec.params["alpha"], spec.params["beta"]
        th, r = z[lay.theta], z[lay.r]
        g = np.asarray(spec.potential.grad(th), dtype=float)
        f = np.concatenate([r - beta * g, -alpha * r - g])
    elif kind == "mirror":
        g = np.asarray(spec.potential.grad(z), dtype=float)
        diag = spec.diff_diag_fn(z)
        f = np.asarray(spec.mirror.metric_divergence(z), dtype=float) - diag * g
    else:
        f = generic_drift(spec, z)

    if not np.all(np.isfinite(f)):
        bad = int(np.flatnonzero(~np.isfinite(f))[0])
        raise NumericError(f"non-finite drift component {bad} at z={z!r}")
    return f


def _shifted_weight(spec, z, z0_energy):
    # exp(-H + H(z0)); the shift avoids under/overflow far from the query point
    return float(np.exp(-(spec.H(z) - z0_energy)))


def stationarity_residual(spec: DynamicsSpec, z, fd_step: float = 1e-3) -> float:
    """Fokker-Planck residual of exp(-H) at z by central finite differences.

    r(z) = sum_i d_i[f_i w] - sum_ij d2_ij[D_ij w] with w = exp(-H + H(z)).
    Exactly stationary dynamics give r ~ 0 up to truncation error O(fd_step^2).
    The step is used as given (unscaled) so tolerances stated in terms of
    fd_step stay meaningful.
    """
    z = np.asarray(z, dtype=float)
    n = spec.n
    h = float(fd_step)
    e0 = float(spec.H(z))

    def fw(x):
        return residual_drift(spec, x) * _shifted_weight(spec, x, e0)

    def dw(x, i, j):
        return float(np.asarray(spec.D(x), dtype=float)[i, j]) * _shifted_weight(spec, x, e0)

    res = 0.0
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        res += (fw(z + ei)[i] - fw(z - ei)[i]) / (2.0 * h)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        for j in range(n):
            if i == j:
                res -= (dw(z + ei, i, i) - 2.0 * dw(z, i, i) + dw(z - ei, i, i)) / (h * h)
            else:
                ej = np.zeros(n)
                ej[j] = h
                res -= (dw(z + ei + ej, i, j) - dw(z + ei - ej, i, j)
                        - dw(z - ei + ej, i, j) + dw(z - ei - ej, i, j)) / (4.0 * h * h)
    if not np.isfinite(res):
        raise NumericError(f"non-finite stationarity residual at z={z!r}")
    return float(res)


def curl_condition_residual(spec: DynamicsSpec, z, fd_step: float = 1e-3,
                            curl: Optional[Callable] = None) -> float:
    """sum_ij d2_ij(Q_ij w) with w = exp(-H + H(z)); diagnostic for custom Q.

    ``curl`` overrides the spec's Q (used to probe the exp(U) mirror curl on
    bounded regions).
    """
    z = np.asarray(z, dtype=float)
    n = spec.n
    h = float(fd_step)
    e0 = float(spec.H(z))
    Q = curl if curl is not None else spec.Q

    def qw(x, i, j):
        return float(np.asarray(Q(x), dtype=float)[i, j]) * _shifted_weight(spec, x, e0)

    res = 0.0
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        for j in range(n):
            if i == j:
                res += (qw(z + ei, i, i) - 2.0 * qw(z, i, i) + qw(z - ei, i, i)) / (h * h)
            else:
                ej = np.zeros(n)
                ej[j] = h
                res += (qw(z + ei + ej, i, j) - qw(z + ei - ej, i, j)
                        - qw(z - ei + ej, i, j) + qw(z - ei - ej, i, j)) / (4.0 * h * h)
    if not np.isfinite(res):
        raise NumericError(f"non-finite curl-condition residual at z={z!r}")
    return float(res)


def corrupt_drift(spec: DynamicsSpec) -> DynamicsSpec:
    """Negative-control copy whose drift misses one term (for residual tests).

    Removes the velocity-damping term of the aux block (or halves the gradient
    term for one-block variants), which breaks stationarity.
    """
    lay = spec.aug_layout
    kind = spec.variant

    def corrupted(z):
        f = np.array(drift(spec, z))
        if kind == "underdamped":
            f[lay.r] += spec.params["gamma"] * z[lay.r]
        elif kind == "highorder":
            f[lay.r] += spec.params["alpha"] * z[lay.r]
        elif kind == "hfhr":
            f[lay.r] += spec.params["alpha"] * z[lay.r]
        else:
            f -= 0.5 * np.asarray(spec.grad_H(z), dtype=float)
        return f

    return replace(spec, params={**spec.params, "_corrupted_drift": corrupted})


def residual_drift(spec: DynamicsSpec, z) -> np.ndarray:
    """Drift used by residual checks; honors a corrupted-drift override."""
    override = spec.params.get("_corrupted_drift")
    if override is not None:
        return override(z)
    return drift(spec, z)
