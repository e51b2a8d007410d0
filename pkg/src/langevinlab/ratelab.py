"""Grid-based evaluation of empirical-measure rate functions.

Works on a rectangular truncation of the state space (1-3 axes, one scalar
coordinate per state block).  A perturbed measure d nu = e^v d mu with
mu ~ exp(-H) is represented by its normalized density on the grid.  The rate
of a variant splits into a symmetric part, a weighted Dirichlet form
1/4 int grad v . D grad v d nu, and an anti-symmetric part obtained by solving
the nu-weighted Poisson equation  adj_grad(D grad psi) = b_A . grad v  where
adj_grad is the adjoint of the gradient in L2(nu).  The discrete operator is
assembled in flux form so it is exactly self-adjoint in the discrete
nu-inner product; the constant nullspace is pinned by a zero-nu-mean shift.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import DynamicsSpec
from .errors import CompatibilityError, DomainError, SolverError, UsageError

__all__ = [
    "GridDomain",
    "GridField",
    "PerturbationSpec",
    "measure_from_perturbation",
    "gradient_fields",
    "integrate",
    "symmetric_rate",
    "antisymmetric_rhs",
    "solve_poisson",
    "total_rate",
    "compare_rates",
    "baseline_rate",
    "random_smooth_perturbation",
    "gaussian_shift_perturbation",
    "RateReport",
    "ComparisonReport",
]

_NODE_CAP = 2_000_000


# ---------------------------------------------------------------------------
# grid plumbing


@dataclass(frozen=True)
class GridDomain:
    """Rectangular grid: per-axis [lo, hi] bounds and node counts."""

    bounds: tuple
    npoints: tuple
    node_cap: int = _NODE_CAP

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        npoints = tuple(int(m) for m in self.npoints)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "npoints", npoints)
        if not 1 <= len(bounds) <= 3 or len(bounds) != len(npoints):
            raise UsageError("grid needs 1-3 axes with matching bounds/npoints")
        if any(m < 3 for m in npoints):
            raise UsageError("each axis needs at least 3 nodes")
        if any(hi <= lo for lo, hi in bounds):
            raise UsageError("each axis needs hi > lo")
        if int(np.prod(npoints)) > self.node_cap:
            raise UsageError(f"grid exceeds the {self.node_cap} node cap")

    @property
    def dims(self):
        return len(self.bounds)

    @property
    def shape(self):
        return self.npoints

    @property
    def axes(self):
        return [np.linspace(lo, hi, m) for (lo, hi), m in zip(self.bounds, self.npoints)]

    @property
    def spacing(self):
        return [(hi - lo) / (m - 1) for (lo, hi), m in zip(self.bounds, self.npoints)]

    def mesh(self):
        """Open (broadcastable) coordinate arrays, ij indexing."""
        return np.meshgrid(*self.axes, indexing="ij", sparse=True)

    def axis_weights(self):
        """Per-axis trapezoid weights (h inside, h/2 at the ends)."""
        out = []
        for h, m in zip(self.spacing, self.npoints):
            w = np.full(m, h)
            w[0] = w[-1] = 0.5 * h
            out.append(w)
        return out

    def node_weights(self):
        """Full tensor-product trapezoid weight array."""
        w = self.axis_weights()
        out = w[0]
        for ww in w[1:]:
            out = np.multiply.outer(out, ww)
        return out.reshape(self.shape)

    def points(self):
        """All nodes as an (n_nodes, dims) array, C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


@dataclass
class GridField:
    """Scalar field sampled on a GridDomain's nodes."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.domain.shape:
            raise UsageError(
                f"field shape {self.values.shape} does not match grid {self.domain.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise UsageError("field values must be finite")


@dataclass(frozen=True)
class PerturbationSpec:
    """Log-density perturbation v, vectorized over grid meshes.

    ``fn`` takes the tuple of (broadcastable) coordinate arrays and returns
    the field.  ``depends_on`` restricts which axes v may vary along; when it
    is set, constancy along the remaining axes is spot-checked on evaluation.
    """

    fn: Callable
    depends_on: Optional[tuple] = None
    label: str = "v"

    def on_grid(self, grid: GridDomain) -> np.ndarray:
        vals = np.broadcast_to(np.asarray(self.fn(tuple(grid.mesh())), dtype=float),
                               grid.shape).copy()
        if self.depends_on is not None:
            frozen = [a for a in range(grid.dims) if a not in self.depends_on]
            for a in frozen:
                sl0 = [slice(None)] * grid.dims
                sl0[a] = slice(0, 1)
                if not np.allclose(vals, vals[tuple(sl0)], atol=1e-12, rtol=0):
                    raise UsageError(
                        f"perturbation {self.label!r} varies along masked axis {a}"
                    )
        return vals


def grid_eval(grid: GridDomain, fn) -> np.ndarray:
    """Evaluate a callable on the grid; vectorized call first, loop fallback."""
    if isinstance(fn, GridField):
        return fn.values
    if isinstance(fn, PerturbationSpec):
        return fn.on_grid(grid)
    try:
        vals = np.asarray(fn(tuple(grid.mesh())), dtype=float)
        return np.broadcast_to(vals, grid.shape).copy()
    except Exception:
        pts = grid.points()
        vals = np.array([float(fn(p)) for p in pts])
        return vals.reshape(grid.shape)


# ---------------------------------------------------------------------------
# measures and quadrature


def _boundary_shell_fraction(density, weights):
    shell = np.zeros(density.shape, dtype=bool)
    for a in range(density.ndim):
        sl = [slice(None)] * density.ndim
        sl[a] = 0
        shell[tuple(sl)] = True
        sl[a] = -1
        shell[tuple(sl)] = True
    total = float(np.sum(density * weights))
    return float(np.sum(density[shell] * weights[shell])) / total


def _suggest_bounds(grid, factor=1.5):
    return [
        [factor * lo if lo < 0 else lo / factor, factor * hi if hi > 0 else hi / factor]
        for lo, hi in grid.bounds
    ]


def measure_from_perturbation(grid: GridDomain, H, v, boundary_tol: float = 1e-6):
    """Normalized densities of mu ~ exp(-H) and nu ~ exp(v - H) on the grid.

    Raises DomainError (with suggested bounds) when the outermost node shell
    carries more than ``boundary_tol`` of either measure's mass.
    """
    Hvals = grid_eval(grid, H)
    vvals = grid_eval(grid, v) if v is not None else np.zeros(grid.shape)
    weights = grid.node_weights()

    def _normalize(logw, name):
        logw = logw - np.max(logw)
        w = np.exp(logw)
        frac = _boundary_shell_fraction(w, weights)
        if frac > boundary_tol:
            raise DomainError(
                f"boundary shell holds {frac:.2e} of the {name} mass "
                f"(tolerance {boundary_tol:.1e}); enlarge the box",
                suggested_bounds=_suggest_bounds(grid),
            )
        return w / float(np.sum(w * weights))

    mu = GridField(grid, _normalize(-Hvals, "mu"))
    nu = GridField(grid, _normalize(vvals - Hvals, "nu"))
    return mu, nu


def gradient_fields(grid: GridDomain, values) -> list:
    """Per-axis central-difference gradients (second-order at the edges)."""
    values = values.values if isinstance(values, GridField) else np.asarray(values)
    if grid.dims == 1:
        return [np.gradient(values, grid.axes[0], edge_order=2)]
    grads = np.gradient(values, *grid.axes, edge_order=2)
    return list(grads)


def _gradient4(values, axis, h):
    """Fourth-order central differences in the interior, second-order edges."""
    g = np.gradient(values, h, axis=axis, edge_order=2)
    if values.shape[axis] < 5:
        return g
    sl = lambda a, b: tuple(
        slice(a, b) if ax == axis else slice(None) for ax in range(values.ndim)
    )
    g[sl(2, -2)] = (values[sl(0, -4)] - 8.0 * values[sl(1, -3)]
                    + 8.0 * values[sl(3, -1)] - values[sl(4, None)]) / (12.0 * h)
    return g


def integrate(grid: GridDomain, density, integrand) -> float:
    """Trapezoid integral of ``integrand`` against a density field."""
    dens = density.values if isinstance(density, GridField) else np.asarray(density)
    return float(np.sum(np.broadcast_to(integrand, grid.shape) * dens * grid.node_weights()))


# ---------------------------------------------------------------------------
# diffusion coefficients on grids


def as_axis_coefficients(D, grid: GridDomain) -> list:
    """Per-axis diagonal diffusion coefficients as broadcastable arrays.

    Accepts a list/tuple of scalars or arrays (one per axis), a constant
    diagonal matrix, or a point->matrix callable (must be diagonal; evaluated
    nodewise, so only sensible on small grids).
    """
    dims = grid.dims
    if isinstance(D, (list, tuple)):
        if len(D) != dims:
            raise UsageError("need one diffusion coefficient per axis")
        return [np.asarray(c, dtype=float) for c in D]
    arr = None
    if isinstance(D, np.ndarray):
        arr = D
    if arr is not None:
        if arr.shape != (dims, dims):
            raise UsageError(f"diffusion matrix must be ({dims}, {dims})")
        if np.max(np.abs(arr - np.diag(np.diag(arr)))) > 0:
            raise UsageError("grid operators support diagonal diffusion only")
        return [np.asarray(arr[a, a]) for a in range(dims)]
    if callable(D):
        pts = grid.points()
        if pts.shape[0] > 200_000:
            raise UsageError("pointwise diffusion callable on a grid this large; "
                             "pass per-axis coefficient arrays instead")
        diags = np.empty((pts.shape[0], dims))
        for i, p in enumerate(pts):
            m = np.asarray(D(p), dtype=float)
            if m.shape != (dims, dims):
                raise UsageError(f"diffusion matrix must be ({dims}, {dims})")
            off = m - np.diag(np.diag(m))
            if np.max(np.abs(off)) > 1e-14:
                raise UsageError("grid operators support diagonal diffusion only")
            diags[i] = np.diag(m)
        return [diags[:, a].reshape(grid.shape) for a in range(dims)]
    raise UsageError("unsupported diffusion specification")


def symmetric_rate(grid: GridDomain, nu, v, D) -> float:
    """1/4 int grad v . D grad v d nu for diagonal D."""
    coeffs = as_axis_coefficients(D, grid)
    vvals = grid_eval(grid, v)
    grads = gradient_fields(grid, vvals)
    quad = np.zeros(grid.shape)
    for c, g in zip(coeffs, grads):
        quad = quad + np.broadcast_to(c, grid.shape) * g * g
    return 0.25 * integrate(grid, nu, quad)


# ---------------------------------------------------------------------------
# variant descriptors on grids (one scalar coordinate per state block)


def _scalar_potential_fns(spec: DynamicsSpec):
    pot = spec.potential
    if pot is None:
        raise UsageError("rate lab requires a potential-backed spec")

    def U(arr):
        pts = np.asarray(arr, dtype=float).reshape(-1, 1)
        if pot.eval_batch is not None:
            return pot.eval_batch(pts).reshape(np.shape(arr))
        return np.array([pot.eval(p) for p in pts]).reshape(np.shape(arr))

    def dU(arr):
        pts = np.asarray(arr, dtype=float).reshape(-1, 1)
        if pot.grad_batch is not None:
            return pot.grad_batch(pts)[:, 0].reshape(np.shape(arr))
        return np.array([pot.grad(p)[0] for p in pts]).reshape(np.shape(arr))

    return U, dU


def _full_potential_fns(spec: DynamicsSpec, dims):
    pot = spec.potential

    def U(mesh):
        pts = np.stack(np.broadcast_arrays(*mesh), axis=-1).reshape(-1, dims)
        if pot.eval_batch is not None:
            vals = pot.eval_batch(pts)
        else:
            vals = np.array([pot.eval(p) for p in pts])
        return vals.reshape(np.broadcast_shapes(*[m.shape for m in mesh]))

    def dU(mesh):
        pts = np.stack(np.broadcast_arrays(*mesh), axis=-1).reshape(-1, dims)
        if pot.grad_batch is not None:
            vals = pot.grad_batch(pts)
        else:
            vals = np.array([pot.grad(p) for p in pts])
        shape = np.broadcast_shapes(*[m.shape for m in mesh])
        return [vals[:, a].reshape(shape) for a in range(dims)]

    return U, dU


def grid_hamiltonian(spec: DynamicsSpec):
    """H as a vectorized mesh callable for a d=1-per-block grid."""
    kind = spec.variant
    if kind in ("overdamped", "nonreversible", "mirror"):
        dims = spec.n
        U, _ = _full_potential_fns(spec, dims)

        def H(mesh):
            return U(mesh)
    elif kind in ("underdamped", "hfhr"):
        U, _ = _scalar_potential_fns(spec)

        def H(mesh):
            th, r = mesh
            return U(th) + 0.5 * r * r
    elif kind == "highorder":
        U, _ = _scalar_potential_fns(spec)

        def H(mesh):
            th, p, r = mesh
            return U(th) + 0.5 * p * p + 0.5 * r * r
    else:
        raise UsageError(f"no grid Hamiltonian for variant {kind!r}")
    return H


def grid_antisym_drift(spec: DynamicsSpec):
    """Anti-symmetric drift components -Q grad H + div Q as mesh callables.

    Returns None when the anti-symmetric generator vanishes (overdamped,
    mirror).
    """
    kind = spec.variant
    if kind in ("overdamped", "mirror"):
        return None
    if kind in ("underdamped", "hfhr"):
        _, dU = _scalar_potential_fns(spec)

        def bA(mesh):
            th, r = mesh
            shape = np.broadcast_shapes(th.shape, r.shape)
            return [np.broadcast_to(r, shape), np.broadcast_to(-dU(th), shape)]

        return bA
    if kind == "highorder":
        gamma = spec.params["gamma"]
        _, dU = _scalar_potential_fns(spec)

        def bA(mesh):
            th, p, r = mesh
            shape = np.broadcast_shapes(th.shape, p.shape, r.shape)
            return [
                np.broadcast_to(p, shape),
                np.broadcast_to(-dU(th) + gamma * r, shape),
                np.broadcast_to(-gamma * p, shape),
            ]

        return bA
    if kind == "nonreversible":
        J = spec.params["J"]
        dims = spec.n
        _, dU = _full_potential_fns(spec, dims)

        def bA(mesh):
            g = dU(mesh)
            return [-sum(J[i, j] * g[j] for j in range(dims)) for i in range(dims)]

        return bA
    raise UsageError(f"no anti-symmetric drift for variant {kind!r}")


def grid_diffusion(spec: DynamicsSpec, grid: GridDomain) -> list:
    """Per-axis diagonal diffusion coefficients of a variant on the grid."""
    kind = spec.variant
    if kind in ("overdamped", "nonreversible"):
        return [np.asarray(1.0) for _ in range(grid.dims)]
    if kind == "underdamped":
        return [np.asarray(0.0), np.asarray(spec.params["gamma"])]
    if kind == "hfhr":
        return [np.asarray(spec.params["beta"]), np.asarray(spec.params["alpha"])]
    if kind == "highorder":
        return [np.asarray(0.0), np.asarray(0.0), np.asarray(spec.params["alpha"])]
    if kind == "mirror":
        mm = spec.mirror
        if mm.metric_diag_batch is None:
            return as_axis_coefficients(mm.metric, grid)
        mesh = grid.mesh()
        out = []
        for a in range(grid.dims):
            diag = mm.metric_diag_batch(np.broadcast_to(mesh[a], grid.shape))
            out.append(np.asarray(diag))
        return out
    raise UsageError(f"no grid diffusion for variant {kind!r}")


def antisymmetric_rhs(spec: DynamicsSpec, grid: GridDomain, nu, v,
                      compat_tol: float = 1e-6):
    """Nodewise L_A v = b_A . grad v, plus its nu-integral.

    The integral is the solvability condition of the Poisson step and must
    vanish; values beyond ``compat_tol`` raise CompatibilityError.
    """
    vvals = grid_eval(grid, v)
    bA = grid_antisym_drift(spec)
    if bA is None:
        field = GridField(grid, np.zeros(grid.shape))
        return field, 0.0
    comps = bA(tuple(grid.mesh()))
    grads = gradient_fields(grid, vvals)
    out = np.zeros(grid.shape)
    for b, g in zip(comps, grads):
        out = out + b * g
    # the solvability integral is analytically zero; estimate it with
    # fourth-order gradients so the check is not dominated by h^2 FD noise
    hi = np.zeros(grid.shape)
    for a, (b, h) in enumerate(zip(comps, grid.spacing)):
        hi = hi + b * _gradient4(vvals, a, h)
    compat = integrate(grid, nu, hi)
    if abs(compat) > compat_tol:
        raise CompatibilityError(
            f"int (L_A v) d nu = {compat:.3e} exceeds tolerance {compat_tol:.1e}"
        )
    return GridField(grid, out), compat


# ---------------------------------------------------------------------------
# weighted Poisson solve


def _face_weights(dens, coeff, axis, axis_w, spacing):
    """Per-face rho * D / h weights along one axis, scaled by transverse
    trapezoid weights."""
    sl_lo = [slice(None)] * dens.ndim
    sl_hi = [slice(None)] * dens.ndim
    sl_lo[axis] = slice(0, -1)
    sl_hi[axis] = slice(1, None)
    rho_f = np.sqrt(dens[tuple(sl_lo)] * dens[tuple(sl_hi)])
    cfull = np.broadcast_to(coeff, dens.shape)
    d_f = 0.5 * (cfull[tuple(sl_lo)] + cfull[tuple(sl_hi)])
    trans = np.ones(dens.shape)
    for b, w in enumerate(axis_w):
        if b == axis:
            continue
        shape = [1] * dens.ndim
        shape[b] = len(w)
        trans = trans * w.reshape(shape)
    return rho_f * d_f * trans[tuple(sl_lo)] / spacing[axis]


def _assemble_stiffness(grid: GridDomain, dens, coeffs, active):
    """Sparse SPD stiffness K with zero-flux boundary closure.

    E(psi, phi) = psi^T K phi approximates int grad phi . D grad psi d nu
    (unnormalized by the density's mass); exactly symmetric by construction.
    """
    shape = grid.shape
    size = int(np.prod(shape))
    idx = np.arange(size).reshape(shape)
    axis_w = grid.axis_weights()
    spacing = grid.spacing
    rows, cols, vals = [], [], []
    for a in active:
        w = _face_weights(dens, coeffs[a], a, axis_w, spacing)
        sl_lo = [slice(None)] * grid.dims
        sl_hi = [slice(None)] * grid.dims
        sl_lo[a] = slice(0, -1)
        sl_hi[a] = slice(1, None)
        i_lo = idx[tuple(sl_lo)].ravel()
        i_hi = idx[tuple(sl_hi)].ravel()
        wf = w.ravel()
        rows.extend([i_lo, i_hi, i_lo, i_hi])
        cols.extend([i_lo, i_hi, i_hi, i_lo])
        vals.extend([wf, wf, -wf, -wf])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()


def solve_poisson(grid: GridDomain, nu, D, rhs, method: str = "auto",
                  compat_tol: float = 1e-6) -> GridField:
    """Solve adj_grad(D grad psi) = rhs in L2(nu) with int psi d nu = 0.

    Diagonal D only.  Axes with identically zero diffusion decouple the
    operator into independent slices; each slice then needs (and is checked
    for) its own compatibility, and is pinned to conditional nu-mean zero.
    method: "auto" (sparse direct, CG for very large systems), "cg",
    "direct", or "dense" (brute-force oracle, <= 5000 unknowns).
    """
    dens = (nu.values if isinstance(nu, GridField) else np.asarray(nu, dtype=float)).copy()
    rhsv = rhs.values if isinstance(rhs, GridField) else np.asarray(rhs, dtype=float)
    if np.any(dens <= 0):
        raise SolverError("nu density must be strictly positive on the grid")
    coeffs = [np.broadcast_to(c, grid.shape) for c in as_axis_coefficients(D, grid)]
    active = [a for a in range(grid.dims) if float(np.max(np.abs(coeffs[a]))) > 0.0]
    if not active:
        raise UsageError("diffusion vanishes along every axis")

    weights = grid.node_weights()
    m_full = dens * weights

    global_compat = float(np.sum(rhsv * m_full))
    if abs(global_compat) > compat_tol:
        raise CompatibilityError(
            f"int rhs d nu = {global_compat:.3e} exceeds tolerance {compat_tol:.1e}"
        )

    inactive = [a for a in range(grid.dims) if a not in active]
    if not inactive:
        psi = _solve_block(grid, dens, coeffs, active, rhsv, m_full, method, compat_tol)
        return GridField(grid, psi)

    if len(active) == 1 and method in ("auto", "direct"):
        psi = _solve_slices_tridiag(grid, dens, coeffs, active[0], rhsv, compat_tol)
        return GridField(grid, psi)

    # decoupled: iterate over the inactive-axis indices, solving a reduced
    # problem on the active-axis subgrid for each slice
    sub_bounds = tuple(grid.bounds[a] for a in active)
    sub_points = tuple(grid.npoints[a] for a in active)
    subgrid = GridDomain(sub_bounds, sub_points)
    psi = np.zeros(grid.shape)
    it = np.ndindex(*[grid.npoints[a] for a in inactive])
    for multi in it:
        sl = [slice(None)] * grid.dims
        idx_pos = 0
        full = []
        for a in range(grid.dims):
            if a in inactive:
                full.append(multi[idx_pos])
                idx_pos += 1
            else:
                full.append(slice(None))
        sl = tuple(full)
        dens_s = dens[sl]
        rhs_s = rhsv[sl]
        coeffs_s = [coeffs[a][sl] for a in active]
        w_s = subgrid.node_weights()
        m_s = dens_s * w_s
        mass = float(np.sum(m_s))
        compat_s = float(np.sum(rhs_s * m_s)) / mass
        if abs(compat_s) > compat_tol:
            raise CompatibilityError(
                f"slice {multi} conditional int rhs d nu = {compat_s:.3e} "
                f"exceeds tolerance {compat_tol:.1e}"
            )
        psi[sl] = _solve_block(subgrid, dens_s / mass, coeffs_s, list(range(len(active))),
                               rhs_s, m_s / mass, method, compat_tol)
    return GridField(grid, psi)


def _solve_slices_tridiag(grid, dens, coeffs, axis, rhsv, compat_tol):
    """Batched solve when only one axis diffuses: every slice along the other
    axes is an independent weighted 1D Poisson problem; all slices are solved
    together with a vectorized Thomas sweep (node 0 grounded)."""
    mlen = grid.npoints[axis]
    h = grid.spacing[axis]
    dmove = np.moveaxis(dens, axis, -1).reshape(-1, mlen)
    rmove = np.moveaxis(rhsv, axis, -1).reshape(-1, mlen)
    cfull = np.broadcast_to(coeffs[axis], grid.shape)
    cmove = np.moveaxis(cfull, axis, -1).reshape(-1, mlen)

    aw = np.full(mlen, h)
    aw[0] = aw[-1] = 0.5 * h
    mass = dmove * aw
    total = mass.sum(axis=1, keepdims=True)
    compat = np.abs((rmove * mass).sum(axis=1, keepdims=True) / total)
    if float(compat.max()) > compat_tol:
        raise CompatibilityError(
            f"slice conditional int rhs d nu = {float(compat.max()):.3e} "
            f"exceeds tolerance {compat_tol:.1e}"
        )
    rproj = rmove - (rmove * mass).sum(axis=1, keepdims=True) / total

    w = np.sqrt(dmove[:, :-1] * dmove[:, 1:]) * 0.5 * (cmove[:, :-1] + cmove[:, 1:]) / h
    diag = np.zeros_like(dmove)
    diag[:, :-1] += w
    diag[:, 1:] += w
    if np.any(diag <= 0):
        raise SolverError("degenerate slice stiffness; diffusion vanished on a slice")
    b = rproj * mass
    s = 1.0 / np.sqrt(diag)
    dd = np.ones_like(diag)              # scaled diagonal
    off = -w * s[:, :-1] * s[:, 1:]      # scaled off-diagonal
    bb = b * s
    # ground node 0: psi_0 = 0
    dd[:, 0] = 1.0
    bb[:, 0] = 0.0
    up = off.copy()
    up[:, 0] = 0.0
    lo = off
    # Thomas forward sweep
    cp = np.empty_like(up)
    dp = np.empty_like(bb)
    cp[:, 0] = up[:, 0] / dd[:, 0]
    dp[:, 0] = bb[:, 0] / dd[:, 0]
    for k in range(1, mlen):
        denom = dd[:, k] - lo[:, k - 1] * cp[:, k - 1]
        if k < mlen - 1:
            cp[:, k] = up[:, k] / denom
        dp[:, k] = (bb[:, k] - lo[:, k - 1] * dp[:, k - 1]) / denom
    y = np.empty_like(bb)
    y[:, -1] = dp[:, -1]
    for k in range(mlen - 2, -1, -1):
        y[:, k] = dp[:, k] - cp[:, k] * y[:, k + 1]
    psi = y * s
    psi = psi - (psi * mass).sum(axis=1, keepdims=True) / total
    moved = tuple(grid.npoints[a] for a in range(grid.dims) if a != axis) + (mlen,)
    return np.moveaxis(psi.reshape(moved), -1, axis)


def _solve_block(grid, dens, coeffs, active, rhsv, m_full, method, compat_tol):
    size = int(np.prod(grid.shape))
    K = _assemble_stiffness(grid, dens, coeffs, active)
    m = m_full.ravel()
    b = rhsv.ravel() * m
    b = b - m * (np.sum(b) / np.sum(m))  # exact discrete compatibility

    if method == "auto":
        method = "direct" if size <= 300_000 else "cg"
    if method == "dense" and size > 5000:
        raise UsageError("dense solves are limited to 5000 unknowns")

    # symmetric equilibration: the density (hence K) spans many orders of
    # magnitude across the box; scaling by 1/sqrt(diag K) keeps every solver
    # path well conditioned
    dK = K.diagonal()
    if np.any(dK <= 0):
        raise SolverError("stiffness diagonal is not positive; "
                          "check the diffusion coefficients")
    s = 1.0 / np.sqrt(dK)
    S = sp.diags(s)
    Ks = (S @ K @ S).tocsr()
    bs = s * b
    ms = m / s  # nullspace of the scaled operator is span(1/s)

    if method == "dense":
        sigma = (Ks.diagonal().mean() + 1.0) / float(np.dot(ms, ms))
        A = Ks.toarray() + sigma * np.outer(ms, ms)
        cond = np.linalg.cond(A)
        if cond > 1e14:
            raise SolverError(f"pinned system is ill-conditioned (cond ~ {cond:.2e})")
        y = np.linalg.solve(A, bs)
    elif method == "direct":
        # the rank-one pin would densify the matrix; ground one node of the
        # consistent singular system instead, then shift to nu-mean zero
        Kg = Ks.tolil()
        j = int(np.argmax(m))
        Kg[j, :] = 0.0
        Kg[j, j] = 1.0
        bg = bs.copy()
        bg[j] = 0.0
        try:
            y = spla.spsolve(Kg.tocsc(), bg)
        except RuntimeError as exc:
            raise SolverError(f"sparse solve failed: {exc}") from exc
        if not np.all(np.isfinite(y)):
            raise SolverError("sparse solve produced non-finite values")
    else:  # cg
        sigma = (Ks.diagonal().mean() + 1.0) / float(np.dot(ms, ms))

        def matvec(x):
            return Ks @ x + sigma * ms * float(np.dot(ms, x))

        A = spla.LinearOperator((size, size), matvec=matvec)
        y, info = spla.cg(A, bs, rtol=1e-13, atol=0.0, maxiter=40 * size)
        if info != 0:
            raise SolverError(f"CG failed to converge (info={info}) "
                              f"on {size} unknowns")

    psi = s * y
    psi = psi - float(np.dot(psi, m)) / float(np.sum(m))
    return psi.reshape(grid.shape)


# ---------------------------------------------------------------------------
# assembled rates and comparisons


@dataclass
class RateReport:
    variant: str
    symmetric: float
    antisymmetric: float

    @property
    def total(self):
        return self.symmetric + self.antisymmetric

    def to_dict(self):
        return {
            "variant": self.variant,
            "symmetric": self.symmetric,
            "antisymmetric": self.antisymmetric,
            "total": self.total,
        }


def total_rate(variant: str, grid: GridDomain, spec: DynamicsSpec, v,
               nu: Optional[GridField] = None, method: str = "auto") -> RateReport:
    """Assemble a variant's rate: Dirichlet part plus Poisson-solve part."""
    if variant != spec.variant:
        raise UsageError(f"variant {variant!r} does not match spec {spec.variant!r}")
    if nu is None:
        _, nu = measure_from_perturbation(grid, grid_hamiltonian(spec), v)
    coeffs = grid_diffusion(spec, grid)
    sym = symmetric_rate(grid, nu, v, coeffs)
    bA = grid_antisym_drift(spec)
    if bA is None:
        return RateReport(variant=variant, symmetric=sym, antisymmetric=0.0)
    rhs, _ = antisymmetric_rhs(spec, grid, nu, v)
    # solvability was just checked against the 4th-order estimate; the
    # nodewise 2nd-order field itself carries O(h^2) integral noise, which the
    # solver projects out, so its own gate only guards structural mistakes
    h2 = max(grid.spacing) ** 2
    rms = float(np.sqrt(integrate(grid, nu, rhs.values**2)))
    psi = solve_poisson(grid, nu, coeffs, rhs, method=method,
                        compat_tol=max(1e-6, 10.0 * h2 * max(rms, 1.0)))
    anti = symmetric_rate(grid, nu, psi, coeffs)
    return RateReport(variant=variant, symmetric=sym, antisymmetric=anti)


def baseline_rate(grid: GridDomain, nu, v) -> float:
    """Expanded overdamped baseline 1/4 int |grad v|^2 d nu (identity D)."""
    return symmetric_rate(grid, nu, v, [np.asarray(1.0)] * grid.dims)


_BASELINES = {
    "overdamped": "overdamped",
    "mirror": "overdamped",
    "nonreversible": "overdamped",
    "underdamped": "expanded-2nd-overdamped",
    "hfhr": "expanded-2nd-overdamped",
    "highorder": "expanded-3rd-overdamped",
}


@dataclass
class ComparisonEntry:
    index: int
    rate_variant: float
    rate_baseline: float
    margin: float
    passed: Optional[bool]
    extra: dict = field(default_factory=dict)


@dataclass
class ComparisonReport:
    variant: str
    baseline: str
    status: str                   # "ok" | "hypothesis not met"
    hypothesis: str
    epsilon: float
    entries: list

    @property
    def all_passed(self):
        return self.status == "ok" and all(e.passed for e in self.entries)

    def to_dict(self):
        return {
            "variant": self.variant,
            "baseline": self.baseline,
            "status": self.status,
            "hypothesis": self.hypothesis,
            "epsilon": self.epsilon,
            "all_passed": self.all_passed if self.status == "ok" else None,
            "entries": [
                {
                    "index": e.index,
                    "rate_variant": e.rate_variant,
                    "rate_baseline": e.rate_baseline,
                    "margin": e.margin,
                    "pass": e.passed,
                    **e.extra,
                }
                for e in self.entries
            ],
        }

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            extra_keys = sorted({k for e in self.entries for k in e.extra})
            writer.writerow(["index", "rate_variant", "rate_baseline", "margin", "pass"]
                            + extra_keys)
            for e in self.entries:
                writer.writerow(
                    [e.index, repr(e.rate_variant), repr(e.rate_baseline),
                     repr(e.margin), e.passed]
                    + [repr(e.extra[k]) if isinstance(e.extra[k], float) else e.extra[k]
                       for k in extra_keys])


def _hypothesis(spec: DynamicsSpec, grid: GridDomain):
    kind = spec.variant
    if kind == "hfhr":
        ok = min(spec.params["alpha"], spec.params["beta"]) >= 1.0
        return ok, "min(alpha, beta) >= 1"
    if kind == "underdamped":
        return spec.params["gamma"] >= 1.0, "gamma >= 1"
    if kind == "highorder":
        return spec.params["alpha"] >= 1.0, "alpha >= 1"
    if kind == "mirror":
        coeffs = grid_diffusion(spec, grid)
        low = min(float(np.min(np.broadcast_to(c, grid.shape))) for c in coeffs)
        return low >= 1.0 - 1e-12, "metric - identity PSD on the box"
    if kind in ("overdamped", "nonreversible"):
        return True, "none"
    raise UsageError(f"no comparison hypothesis for {kind!r}")


def compare_rates(family: Sequence, variant: str, spec: DynamicsSpec,
                  grid: GridDomain, epsilon: float = 1e-4,
                  check_theta_contraction: bool = False,
                  method: str = "auto") -> ComparisonReport:
    """Rate-vs-baseline margins for a family of perturbations.

    Each margin is rate_variant - rate_baseline; the pass flag requires
    margin >= -epsilon.  If the variant's parameter hypothesis fails, the
    report status is "hypothesis not met" and no flags are set.  With
    ``check_theta_contraction`` (HFHR), each entry also reports the
    theta-marginal overdamped rate, which the variant rate must dominate.
    """
    ok, hyp = _hypothesis(spec, grid)
    baseline_name = _BASELINES[variant]
    if not ok:
        return ComparisonReport(variant=variant, baseline=baseline_name,
                                status="hypothesis not met", hypothesis=hyp,
                                epsilon=epsilon, entries=[])
    H = grid_hamiltonian(spec)
    entries = []
    for i, v in enumerate(family):
        _, nu = measure_from_perturbation(grid, H, v)
        rep = total_rate(variant, grid, spec, v, nu=nu, method=method)
        base = baseline_rate(grid, nu, v)
        margin = rep.total - base
        extra = {}
        passed = margin >= -epsilon
        if check_theta_contraction:
            th_rate = _theta_marginal_overdamped_rate(grid, spec, nu)
            extra["rate_theta_marginal"] = th_rate
            extra["margin_theta"] = rep.total - th_rate
            passed = passed and rep.total >= th_rate - epsilon
        entries.append(ComparisonEntry(
            index=i, rate_variant=rep.total, rate_baseline=base,
            margin=margin, passed=passed, extra=extra,
        ))
    return ComparisonReport(variant=variant, baseline=baseline_name, status="ok",
                            hypothesis=hyp, epsilon=epsilon, entries=entries)


def _theta_marginal_overdamped_rate(grid: GridDomain, spec: DynamicsSpec,
                                    nu: GridField) -> float:
    """Overdamped rate of the theta-marginal of nu (first axis)."""
    if grid.dims < 2:
        raise UsageError("marginal contraction check needs an augmented grid")
    # integrate out every axis but the first
    axis_w = grid.axis_weights()
    dens = nu.values
    for a in range(grid.dims - 1, 0, -1):
        shape = [1] * dens.ndim
        shape[a] = len(axis_w[a])
        dens = np.sum(dens * axis_w[a].reshape(shape), axis=a)
    g1 = GridDomain((grid.bounds[0],), (grid.npoints[0],))
    nu_th = GridField(g1, dens)
    U, _ = _scalar_potential_fns(spec)
    th = g1.axes[0]
    mu_log = -U(th)
    mu_log -= np.max(mu_log)
    mu_dens = np.exp(mu_log)
    mu_dens /= float(np.sum(mu_dens * g1.node_weights()))
    v_th = np.log(dens) - np.log(mu_dens)
    return symmetric_rate(g1, nu_th, GridField(g1, v_th), [np.asarray(1.0)])


# ---------------------------------------------------------------------------
# perturbation families


def gaussian_shift_perturbation(m: float, axis: int = 0) -> PerturbationSpec:
    """v = m x - m^2/2 along one axis: shifts a unit Gaussian marginal by m."""

    def fn(mesh):
        return m * mesh[axis] - 0.5 * m * m

    return PerturbationSpec(fn=fn, label=f"shift{m}")


def random_smooth_perturbation(grid: GridDomain, seed: int, n_bumps: int = 3,
                               amplitude: float = 0.5, width_range=(0.8, 2.0),
                               restrict_to: Optional[tuple] = None,
                               even: bool = False) -> PerturbationSpec:
    """Sum of Gaussian bumps; optionally restricted to a subset of axes.

    ``even=True`` symmetrizes v in the restricted coordinates, which keeps
    perturbations of degenerate-diffusion variants inside the admissible
    class (slice-wise Poisson solvability).
    """
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x9B]))
    axes = list(restrict_to) if restrict_to is not None else list(range(grid.dims))
    centers = []
    for a in axes:
        lo, hi = grid.bounds[a]
        half = 0.4 * (hi - lo) / 2.0
        centers.append(rng.uniform(-half, half, size=n_bumps))
    amps = rng.uniform(-amplitude, amplitude, size=n_bumps)
    widths = rng.uniform(width_range[0], width_range[1], size=n_bumps)

    def bumps(coords):
        out = 0.0
        for k in range(n_bumps):
            q = 0.0
            for ia, _ in enumerate(axes):
                dx = coords[ia] - centers[ia][k]
                q = q + dx * dx
            out = out + amps[k] * np.exp(-q / (2.0 * widths[k] ** 2))
        return out

    def fn(mesh):
        coords = [mesh[a] for a in axes]
        if even:
            return 0.5 * (bumps(coords) + bumps([-c for c in coords]))
        return bumps(coords)

    mask = tuple(axes) if restrict_to is not None else None
    return PerturbationSpec(fn=fn, depends_on=mask, label=f"bumps{seed}")
