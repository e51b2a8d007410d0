"""Numeric verification of exponential Lyapunov drift bounds.

Candidate functions have the form W = exp(F^delta) with F a shifted
log-exponent built per recipe: a*H + b*theta.r for the Hessian-free
high-resolution dynamics, h*H + a*L(theta).p + a*p.r (with a cutoff-smoothed
vector field L) for the high-order dynamics, and exp(eta*U) Gibbs powers for
one-block dynamics.  The drift quantity -(LW)/W is evaluated through the
stable identity L e^g = e^g (f . grad g + D : hess g + grad g . D grad g),
and quadratic lower bounds are checked (or searched for) on grids.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize

from .dynamics import DynamicsSpec, drift
from .errors import NumericError, UsageError
from .ratelab import GridDomain

__all__ = [
    "LyapunovSpec",
    "BoundReport",
    "build_lyapunov",
    "neg_generator_ratio",
    "verify_quadratic_bound",
]


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return ((6.0 * t - 15.0) * t + 10.0) * t**3


def _smoothstep_d1(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, ((30.0 * t - 60.0) * t + 30.0) * t**2, 0.0)


def _smoothstep_d2(t):
    inside = (t > 0.0) & (t < 1.0)
    t = np.clip(t, 0.0, 1.0)
    return np.where(inside, ((120.0 * t - 180.0) * t + 60.0) * t, 0.0)


def _cutoff(x):
    """chi(x): 0 for |x| <= 1, 1 for |x| >= 2, quintic smoothstep between."""
    return _smoothstep(np.abs(x) - 1.0)


def _cutoff_d1(x):
    return _smoothstep_d1(np.abs(x) - 1.0) * np.sign(x)


def _cutoff_d2(x):
    return _smoothstep_d2(np.abs(x) - 1.0)


@dataclass(frozen=True)
class LyapunovSpec:
    """Candidate W = exp(phi^delta), phi shifted so inf phi >= 1.

    ``phi``/``grad_phi``/``hess_phi`` evaluate the shifted log-exponent and
    its derivatives at a state vector of the companion dynamics.
    """

    kind: str
    dim: int
    delta: float
    phi: Callable[[np.ndarray], float]
    grad_phi: Callable[[np.ndarray], np.ndarray]
    hess_phi: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)


def _check(cond, message, allow_unchecked):
    if not cond:
        if allow_unchecked:
            return
        raise UsageError(f"Lyapunov recipe constraint violated: {message}")


def build_lyapunov(kind: str, potential, params: Optional[dict] = None,
                   allow_unchecked: bool = False) -> LyapunovSpec:
    """Build a Lyapunov candidate per recipe; validates the recipe constraints.

    kinds:
      "gibbs-power":  W = exp(eta U), params {eta} with eta in (0, 1).
      "hfhr":         phi = a (U + |r|^2/2) + b theta.r, params {a, alpha,
                      beta, c1, b?}; requires a in (0,1) and b < c1/(2 alpha)
                      (default b = 0.1 c1 / (2 alpha)).
      "highorder":    phi0 = h H + a L(theta).p + a p.r on (theta, p, r) with
                      L = kappa * theta |theta|^(beta_exp - 1) * cutoff,
                      kappa = gamma / (2 sup|L'|); params {h, a, delta, gamma,
                      alpha, k?, m_U?, box?}; scalar theta block only.
                      The shift -inf phi0 + 1 is found by numeric minimization
                      over the evaluation box.

    ``allow_unchecked`` skips the constraint gate (used for negative
    controls); the construction itself is unchanged.
    """
    params = dict(params or {})

    if kind == "gibbs-power":
        eta = float(params.get("eta", 0.5))
        _check(0.0 < eta < 1.0, f"eta={eta} outside (0, 1)", allow_unchecked)
        d = potential.dim
        if potential.hessian is None:
            raise UsageError("gibbs-power Lyapunov needs a potential Hessian")
        return LyapunovSpec(
            kind=kind, dim=d, delta=1.0,
            phi=lambda z: eta * float(potential.eval(z)),
            grad_phi=lambda z: eta * np.asarray(potential.grad(z), dtype=float),
            hess_phi=lambda z: eta * np.asarray(potential.hessian(z), dtype=float),
            params={"eta": eta},
        )

    if kind == "hfhr":
        a = float(params["a"])
        alpha = float(params["alpha"])
        c1 = float(params.get("c1", 1.0))
        b = float(params.get("b", 0.1 * c1 / (2.0 * alpha)))
        _check(0.0 < a < 1.0, f"a={a} outside (0, 1)", allow_unchecked)
        _check(b > 0.0, f"b={b} must be positive", allow_unchecked)
        _check(b < c1 / (2.0 * alpha),
               f"b={b} violates b < c1/(2 alpha) = {c1 / (2 * alpha)}",
               allow_unchecked)
        d = potential.dim
        n = 2 * d

        def phi(z):
            th, r = z[:d], z[d:]
            return (a * (float(potential.eval(th)) + 0.5 * float(np.dot(r, r)))
                    + b * float(np.dot(th, r)))

        def grad_phi(z):
            th, r = z[:d], z[d:]
            return np.concatenate([
                a * np.asarray(potential.grad(th), dtype=float) + b * r,
                a * r + b * th,
            ])

        def hess_phi(z):
            th = z[:d]
            out = np.zeros((n, n))
            hU = (np.asarray(potential.hessian(th), dtype=float)
                  if potential.hessian is not None else np.eye(d))
            out[:d, :d] = a * hU
            out[:d, d:] = b * np.eye(d)
            out[d:, :d] = b * np.eye(d)
            out[d:, d:] = a * np.eye(d)
            return out

        return LyapunovSpec(kind=kind, dim=n, delta=1.0, phi=phi,
                            grad_phi=grad_phi, hess_phi=hess_phi,
                            params={"a": a, "b": b, "alpha": alpha, "c1": c1})

    if kind == "highorder":
        if potential.dim != 1:
            raise UsageError("high-order Lyapunov construction supports a "
                             "scalar theta block only")
        h = float(params["h"])
        a = float(params["a"])
        delta = float(params["delta"])
        gamma = float(params["gamma"])
        alpha = float(params["alpha"])
        k = float(params.get("k", 2.0))
        m_U = float(params.get("m_U", 0.5))
        box = float(params.get("box", 5.0))
        beta_exp = k - 1.0

        # kappa = gamma / (2 sup|L'|) keeps |Jac L| <= gamma/2
        th_grid = np.linspace(-box - 2.0, box + 2.0, 4001)
        base = np.sign(th_grid) * np.abs(th_grid) ** beta_exp
        base_d1 = np.where(np.abs(th_grid) > 0, beta_exp * np.abs(th_grid) ** (beta_exp - 1.0), 0.0)
        raw_d1 = base_d1 * _cutoff(th_grid) + base * _cutoff_d1(th_grid)
        c_j = float(np.max(np.abs(raw_d1)))
        kappa = gamma / (2.0 * c_j)

        _check(1.0 < k <= 2.0, f"k={k} outside (1, 2]", allow_unchecked)
        _check((2.0 - k) / k < delta <= 1.0,
               f"delta={delta} outside ((2-k)/k, 1]", allow_unchecked)
        _check(0.0 < h < alpha / (2.0 * delta),
               f"h={h} violates 0 < h < alpha/(2 delta) = {alpha / (2 * delta)}",
               allow_unchecked)
        p1 = k / (k - 1.0)
        _check(0.0 < a < 1.0, f"a={a} outside (0, 1)", allow_unchecked)
        _check(a * kappa / p1 < m_U * h,
               f"a={a} violates a kappa/p1 < m_U h ({a * kappa / p1:.4g} >= "
               f"{m_U * h:.4g})", allow_unchecked)
        _check(a * kappa / k + a / 2.0 < h / 2.0,
               f"a={a} violates a kappa/k + a/2 < h/2", allow_unchecked)

        def Lfun(th):
            return kappa * np.sign(th) * np.abs(th) ** beta_exp * _cutoff(th)

        def Lfun_d1(th):
            ath = np.abs(th)
            g = np.sign(th) * ath ** beta_exp
            g1 = np.where(ath > 0, beta_exp * ath ** (beta_exp - 1.0), 0.0)
            return kappa * (g1 * _cutoff(th) + g * _cutoff_d1(th))

        def Lfun_d2(th):
            ath = np.abs(th)
            g = np.sign(th) * ath ** beta_exp
            g1 = np.where(ath > 0, beta_exp * ath ** (beta_exp - 1.0), 0.0)
            g2 = np.where(ath > 0,
                          beta_exp * (beta_exp - 1.0) * np.sign(th) * ath ** (beta_exp - 2.0),
                          0.0)
            return kappa * (g2 * _cutoff(th) + 2.0 * g1 * _cutoff_d1(th)
                            + g * _cutoff_d2(th))

        def phi0(th, p, r):
            with np.errstate(over="ignore", invalid="ignore"):
                val = (h * (float(potential.eval(np.atleast_1d(th)))
                            + 0.5 * p * p + 0.5 * r * r)
                       + a * float(Lfun(th)) * p + a * p * r)
            return val if np.isfinite(val) else np.inf

        # shift so phi0 - inf phi0 + 1 >= 1 on the evaluation box; the
        # minimization is restricted to the box (for non-compliant parameters
        # phi0 has no global infimum at all)
        gg = np.linspace(-box, box, 41)
        TH, P, R = np.meshgrid(gg, gg, gg, indexing="ij")
        Uvals = (potential.eval_batch(gg.reshape(-1, 1)).reshape(-1)
                 if potential.eval_batch is not None
                 else np.array([potential.eval(np.array([t])) for t in gg]))
        F0 = (h * (Uvals[:, None, None] + 0.5 * P**2 + 0.5 * R**2)
              + a * Lfun(TH) * P + a * P * R)
        i0 = np.unravel_index(np.argmin(F0), F0.shape)
        x0 = np.array([gg[i0[0]], gg[i0[1]], gg[i0[2]]])
        res = minimize(lambda x: phi0(x[0], x[1], x[2]), x0, method="L-BFGS-B",
                       bounds=[(-box, box)] * 3)
        inf0 = min(float(np.min(F0)), float(res.fun))
        shift = -inf0 + 1.0

        def phi(z):
            return phi0(z[0], z[1], z[2]) + shift

        def grad_phi(z):
            th, p, r = z
            dU = float(potential.grad(np.atleast_1d(th))[0])
            return np.array([
                h * dU + a * float(Lfun_d1(th)) * p,
                h * p + a * float(Lfun(th)) + a * r,
                h * r + a * p,
            ])

        def hess_phi(z):
            th, p, r = z
            d2U = (float(potential.hessian(np.atleast_1d(th))[0, 0])
                   if potential.hessian is not None else 1.0)
            return np.array([
                [h * d2U + a * float(Lfun_d2(th)) * p, a * float(Lfun_d1(th)), 0.0],
                [a * float(Lfun_d1(th)), h, a],
                [0.0, a, h],
            ])

        return LyapunovSpec(
            kind=kind, dim=3, delta=delta, phi=phi, grad_phi=grad_phi,
            hess_phi=hess_phi,
            params={"h": h, "a": a, "delta": delta, "gamma": gamma,
                    "alpha": alpha, "k": k, "beta_exp": beta_exp,
                    "kappa": kappa, "c_j": c_j, "shift": shift, "m_U": m_U,
                    "box": box, "L": Lfun, "L_d1": Lfun_d1, "L_d2": Lfun_d2},
        )

    raise UsageError(f"unknown Lyapunov kind {kind!r}")


def neg_generator_ratio(spec: DynamicsSpec, lyap: LyapunovSpec, z,
                        use_fd: bool = False, fd_step: float = 1e-4) -> float:
    """-(L W)(z) / W(z) via L e^g = e^g (f.grad g + D:hess g + grad g.D grad g).

    ``use_fd`` replaces the analytic derivatives of g = phi^delta by central
    finite differences (cross-check path).
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (lyap.dim,):
        raise UsageError(f"state has shape {z.shape}, expected ({lyap.dim},)")
    if spec.n != lyap.dim:
        raise UsageError("dynamics and Lyapunov candidate dimensions differ")
    f = drift(spec, z)
    Dmat = np.asarray(spec.D(z), dtype=float)

    if use_fd:
        def g(x):
            val = lyap.phi(x)
            return val ** lyap.delta

        from ._fd import fd_gradient, fd_jacobian
        grad_g = fd_gradient(g, z, fd_step)
        hess_g = fd_jacobian(lambda x: fd_gradient(g, x, fd_step), z, fd_step)
        hess_g = 0.5 * (hess_g + hess_g.T)
    else:
        gphi = np.asarray(lyap.grad_phi(z), dtype=float)
        hphi = np.asarray(lyap.hess_phi(z), dtype=float)
        de = lyap.delta
        if de == 1.0:
            grad_g = gphi
            hess_g = hphi
        else:
            F = float(lyap.phi(z))
            if F <= 0:
                raise NumericError(f"shifted log-exponent is {F} <= 0 at z={z!r}")
            grad_g = de * F ** (de - 1.0) * gphi
            hess_g = (de * F ** (de - 1.0) * hphi
                      + de * (de - 1.0) * F ** (de - 2.0) * np.outer(gphi, gphi))

    val = float(f @ grad_g) + float(np.sum(Dmat * hess_g)) + float(grad_g @ Dmat @ grad_g)
    if not np.isfinite(val):
        raise NumericError(f"non-finite generator ratio at z={z!r}")
    return -val


@dataclass
class BoundReport:
    kind: str
    constants: dict
    min_residual: float
    argmin: list
    passed: bool
    searched: bool
    grid_meta: dict

    def to_dict(self):
        return {
            "kind": self.kind,
            "constants": self.constants,
            "min_residual": self.min_residual,
            "argmin": self.argmin,
            "pass": self.passed,
            "searched": self.searched,
            "grid_meta": self.grid_meta,
        }


def _ratio_on_grid(spec: DynamicsSpec, lyap: LyapunovSpec, grid: GridDomain):
    """Vectorized -(LW)/W on the grid for the built-in pairings; falls back
    to pointwise evaluation otherwise."""
    pts = grid.points()
    kind = (spec.variant, lyap.kind)
    p = spec.params
    lp = lyap.params
    pot = spec.potential

    if kind == ("hfhr", "hfhr") and spec.aug_layout.d == 1:
        th, r = pts[:, 0], pts[:, 1]
        a, b = lp["a"], lp["b"]
        alpha, beta = p["alpha"], p["beta"]
        dU = pot.grad_batch(th.reshape(-1, 1))[:, 0]
        d2U = np.array([pot.hessian(np.array([t]))[0, 0] for t in th])
        gyth = a * dU + b * r
        gyr = a * r + b * th
        fth = r - beta * dU
        fr = -alpha * r - dU
        val = (fth * gyth + fr * gyr
               + beta * (a * d2U) + alpha * a
               + beta * gyth * gyth + alpha * gyr * gyr)
        return (-val).reshape(grid.shape)

    if kind == ("highorder", "highorder"):
        th, pp, rr = pts[:, 0], pts[:, 1], pts[:, 2]
        h, a, de, shift = lp["h"], lp["a"], lp["delta"], lp["shift"]
        gamma, alpha = p["gamma"], p["alpha"]
        L, L1, L2 = lp["L"], lp["L_d1"], lp["L_d2"]
        U = pot.eval_batch(th.reshape(-1, 1))
        dU = pot.grad_batch(th.reshape(-1, 1))[:, 0]
        F = h * (U + 0.5 * pp**2 + 0.5 * rr**2) + a * L(th) * pp + a * pp * rr + shift
        gth = h * dU + a * L1(th) * pp
        gp = h * pp + a * L(th) + a * rr
        gr = h * rr + a * pp
        fth = pp
        fp = -dU + gamma * rr
        fr = -gamma * pp - alpha * rr
        fdot = fth * gth + fp * gp + fr * gr
        dhess = alpha * h                     # D : hess phi, D = diag(0,0,alpha)
        quad = alpha * gr * gr                # grad phi . D grad phi
        val = (de * F ** (de - 1.0) * (fdot + dhess)
               + (de * (de - 1.0) * F ** (de - 2.0) + de**2 * F ** (2.0 * de - 2.0)) * quad)
        return (-val).reshape(grid.shape)

    if lyap.kind == "gibbs-power" and spec.variant in ("overdamped", "nonreversible", "mirror"):
        eta = lp["eta"]
        dU = pot.grad_batch(pts)
        if spec.variant == "mirror":
            diag = np.stack([spec.mirror.metric_diag_batch(pts[:, i])
                             for i in range(spec.n)], axis=1)
            div = np.stack([spec.mirror.metric_divergence(pt) for pt in pts])
            tr = np.array([np.sum(np.diag(spec.mirror.metric(pt))
                                  * np.diag(pot.hessian(pt))) for pt in pts])
            val = (np.sum(div * (eta * dU), axis=1)
                   - np.sum(dU * diag * dU, axis=1) * eta
                   + eta * tr
                   + eta**2 * np.sum(dU * diag * dU, axis=1))
        else:
            lap = np.array([np.trace(pot.hessian(pt)) for pt in pts])
            grad2 = np.sum(dU * dU, axis=1)
            # the curl part contributes J grad U . grad U = 0 exactly
            val = -eta * grad2 + eta * lap + eta**2 * grad2
        return (-val).reshape(grid.shape)

    vals = np.array([neg_generator_ratio(spec, lyap, pt) for pt in pts])
    return vals.reshape(grid.shape)


def _bound_features(lyap: LyapunovSpec, grid: GridDomain):
    pts = grid.points()
    if lyap.kind == "hfhr":
        names = ["A", "B"]
        feats = [pts[:, 0] ** 2, pts[:, 1] ** 2]
    elif lyap.kind == "highorder":
        k = lyap.params["k"]
        names = ["A", "B", "C"]
        feats = [np.abs(pts[:, 0]) ** (2.0 * (k - 1.0)), pts[:, 1] ** 2, pts[:, 2] ** 2]
    else:
        raise UsageError(f"no quadratic bound template for kind {lyap.kind!r}")
    return names, [f.reshape(grid.shape) for f in feats]


def verify_quadratic_bound(spec: DynamicsSpec, lyap: LyapunovSpec,
                           grid: GridDomain, constants: Optional[dict] = None,
                           dc_max: float = 10.0, coef_floor: float = 1e-3,
                           sweeps: int = 8) -> BoundReport:
    """Check (or search) -(LW)/W >= sum coef_i feature_i - Dc on the grid.

    With ``constants`` given, evaluates the residual and reports its minimum.
    Otherwise runs a coordinate-ascent search maximizing the sum of the
    quadratic coefficients with the offset capped at ``dc_max`` (an uncapped
    offset would make any bound vacuously feasible on a bounded box); the
    report's pass flag then requires every quadratic coefficient to clear
    ``coef_floor``.  Infeasibility is a report outcome, not an error.
    """
    ratio = _ratio_on_grid(spec, lyap, grid)
    names, feats = _bound_features(lyap, grid)
    meta = {"bounds": [list(b) for b in grid.bounds], "npoints": list(grid.npoints)}

    if constants is not None:
        missing = [k for k in names + ["Dc"] if k not in constants]
        if missing:
            raise UsageError(f"constants missing entries {missing}")
        if any(constants[k] < 0 for k in names) or constants["Dc"] < 0:
            raise UsageError("bound constants must be nonnegative")
        model = -constants["Dc"] * np.ones(grid.shape)
        for nm, ft in zip(names, feats):
            model = model + constants[nm] * ft
        resid = ratio - model
        i = np.unravel_index(np.argmin(resid), resid.shape)
        arg = [float(ax[j]) for ax, j in zip(grid.axes, i)]
        return BoundReport(kind=lyap.kind, constants=dict(constants),
                           min_residual=float(resid[i]), argmin=arg,
                           passed=bool(resid[i] >= 0.0), searched=False,
                           grid_meta=meta)

    # balanced start: largest uniform coefficient, then coordinate-ascent
    # sweeps (a greedy start from zero would park at a vertex with some
    # coefficients exactly zero)
    dc = float(dc_max)
    fsum = np.zeros(grid.shape)
    for ft in feats:
        fsum = fsum + ft
    pos = fsum > 0
    uniform = max(0.0, float(np.min((ratio[pos] + dc) / fsum[pos])))
    coefs = np.full(len(names), uniform)
    for _ in range(sweeps):
        for k in range(len(names)):
            slack = ratio + dc
            for j, ft in enumerate(feats):
                if j != k:
                    slack = slack - coefs[j] * ft
            posk = feats[k] > 0
            coefs[k] = max(0.0, float(np.min(slack[posk] / feats[k][posk])))
    model = -dc * np.ones(grid.shape)
    for c, ft in zip(coefs, feats):
        model = model + c * ft
    resid = ratio - model
    # tighten the offset to the smallest value the found coefficients allow
    dc_tight = max(0.0, dc - float(np.min(resid)))
    consts = {nm: float(c) for nm, c in zip(names, coefs)}
    consts["Dc"] = dc_tight
    model = -dc_tight * np.ones(grid.shape)
    for c, ft in zip(coefs, feats):
        model = model + c * ft
    resid = ratio - model
    i = np.unravel_index(np.argmin(resid), resid.shape)
    arg = [float(ax[j]) for ax, j in zip(grid.axes, i)]
    passed = bool(resid[i] >= -1e-12 and all(c >= coef_floor for c in coefs))
    return BoundReport(kind=lyap.kind, constants=consts,
                       min_residual=float(resid[i]), argmin=arg, passed=passed,
                       searched=True, grid_meta=meta)
