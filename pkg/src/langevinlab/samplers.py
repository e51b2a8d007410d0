"""Euler-Maruyama integration of a DynamicsSpec, ensembles and diagnostics.

One scheme for every variant: z' = z + f(z) eta + sqrt(2 eta) S(z) xi with
S S^T = D.  Chains own counter-based RNG streams keyed by (seed, chain id),
so ensembles are reproducible and merge order independent.  Chains targeting
the standard Gaussian through a built-in variant run on the compiled chunk
kernel (or its pure-Python twin); everything else goes through a per-variant
numpy stepper or the raw drift callable.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import backend
from .dynamics import DynamicsSpec, drift
from .errors import DivergenceError, UsageError

__all__ = [
    "IntegratorConfig",
    "ChainState",
    "EnsembleSummary",
    "EnsembleResult",
    "make_chain_state",
    "em_step",
    "run_chain",
    "run_ensemble",
    "ks_distance_marginal",
    "summary_to_dict",
    "summary_from_dict",
]

_GUARD = 1.0e8
_CHUNK = 8192


@dataclass(frozen=True)
class IntegratorConfig:
    eta: float
    n_steps: int
    burn_in: int = 0
    thinning: int = 1
    n_chains: int = 1
    seed: int = 0
    hist_bins: int = 64
    hist_range: tuple = (-10.0, 10.0)
    threads: int = 1

    def __post_init__(self):
        if self.eta <= 0:
            raise UsageError("eta must be positive")
        if self.n_steps < 1 or self.thinning < 1 or self.n_chains < 1:
            raise UsageError("n_steps, thinning and n_chains must be positive")
        if not 0 <= self.burn_in < self.n_steps:
            raise UsageError("burn_in must satisfy 0 <= burn_in < n_steps")


@dataclass
class ChainState:
    """Sampler state: current point, step counter and its RNG stream."""

    z: np.ndarray
    step: int
    seed: int
    stream: int
    rng: np.random.Generator


def make_chain_state(init, seed: int, stream: int = 0) -> ChainState:
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream]))
    return ChainState(z=np.array(init, dtype=float), step=0, seed=seed, stream=stream, rng=rng)


# ---------------------------------------------------------------------------
# stepping


def _fast_descriptor(spec: DynamicsSpec):
    """(variant_code, par, jmat, d) when the chunk kernels apply, else None."""
    if spec.potential is None or spec.potential.name != "gaussian":
        return None
    if spec.variant not in backend.VARIANT_CODES:
        return None
    if spec.variant == "mirror" and spec.mirror.name != "quartic_mirror":
        return None
    code = backend.VARIANT_CODES[spec.variant]
    d = spec.aug_layout.d
    par = np.zeros(2)
    jmat = np.zeros((1, 1))
    p = spec.params
    if spec.variant == "underdamped":
        par[0] = p["gamma"]
    elif spec.variant == "mirror":
        par[0] = p["mirror_eps"]
    elif spec.variant == "highorder":
        par[0], par[1] = p["gamma"], p["alpha"]
    elif spec.variant == "hfhr":
        par[0], par[1] = p["beta"], p["alpha"]
    elif spec.variant == "nonreversible":
        jmat = np.ascontiguousarray(p["J"], dtype=float)
    return code, par, jmat, d


def _variant_stepper(spec: DynamicsSpec, eta: float):
    """Per-variant numpy step(z, xi) using the potential's gradient.

    Mirrors the kernel formulas but with an arbitrary grad U; used for
    non-Gaussian targets (e.g. BLR posteriors).
    """
    d = spec.aug_layout.d
    p = spec.params
    kind = spec.variant
    s2e = np.sqrt(2.0 * eta)
    grad = spec.potential.grad if spec.potential is not None else None

    if kind == "overdamped":
        def step(z, xi):
            return z + eta * (-grad(z)) + s2e * xi
    elif kind == "nonreversible":
        J = p["J"]

        def step(z, xi):
            g = grad(z)
            return z + eta * (-(g + J @ g)) + s2e * xi
    elif kind == "underdamped":
        gamma = p["gamma"]
        sr = np.sqrt(2.0 * gamma * eta)

        def step(z, xi):
            th, r = z[:d], z[d:]
            return np.concatenate([
                th + eta * r,
                r + eta * (-gamma * r - grad(th)) + sr * xi[d:],
            ])
    elif kind == "highorder":
        gamma, alpha = p["gamma"], p["alpha"]
        sr = np.sqrt(2.0 * alpha * eta)

        def step(z, xi):
            th, pp, r = z[:d], z[d:2 * d], z[2 * d:]
            return np.concatenate([
                th + eta * pp,
                pp + eta * (-grad(th) + gamma * r),
                r + eta * (-gamma * pp - alpha * r) + sr * xi[2 * d:],
            ])
    elif kind == "hfhr":
        alpha, beta = p["alpha"], p["beta"]
        st = np.sqrt(2.0 * beta * eta)
        sr = np.sqrt(2.0 * alpha * eta)

        def step(z, xi):
            th, r = z[:d], z[d:]
            return np.concatenate([
                th + eta * (r - beta * grad(th)) + st * xi[:d],
                r + eta * (-alpha * r - grad(th)) + sr * xi[d:],
            ])
    elif kind == "mirror":
        metric_diag = spec.diff_diag_fn
        divergence = spec.mirror.metric_divergence

        def step(z, xi):
            diag = metric_diag(z)
            f = divergence(z) - diag * grad(z)
            amp = np.sqrt(2.0 * eta * diag)
            return z + eta * f + amp * xi
    else:
        # custom spec: raw drift callable; diffusion from the diag fields or
        # a dense symmetric square root per step
        def step(z, xi):
            f = drift(spec, z)
            if spec.diff_diag_const is not None:
                amp = np.sqrt(2.0 * eta * spec.diff_diag_const)
                return z + eta * f + amp * xi
            if spec.diff_diag_fn is not None:
                amp = np.sqrt(2.0 * eta * spec.diff_diag_fn(z))
                return z + eta * f + amp * xi
            w, v = np.linalg.eigh(np.asarray(spec.D(z), dtype=float))
            s = (v * np.sqrt(np.maximum(w, 0.0))) @ v.T
            return z + eta * f + s2e * (s @ xi)

    return step


def make_stepper(spec: DynamicsSpec, eta: float):
    """Return step(z, xi) -> z' for one EM update of this spec (no guards)."""
    return _variant_stepper(spec, eta)


def em_step(spec: DynamicsSpec, state: ChainState, eta: float) -> ChainState:
    """One Euler-Maruyama step; draws spec.n normals from the state's stream."""
    if eta <= 0:
        raise UsageError("eta must be positive")
    xi = state.rng.standard_normal(spec.n)
    fast = _fast_descriptor(spec)
    z = np.array(state.z, dtype=float)
    if fast is not None:
        code, par, jmat, d = fast
        out = np.empty((1, spec.n))
        bad = backend.integrate_chunk(code, eta, z, xi.reshape(1, -1), out, par, jmat, d)
        if bad >= 0:
            raise DivergenceError(
                f"chain diverged at step {state.step + 1} (eta={eta})",
                step=state.step + 1, eta=eta, last_state=np.array(state.z),
            )
        z_new = out[0]
    else:
        z_new = _variant_stepper(spec, eta)(z, xi)
        if not np.all(np.isfinite(z_new)) or np.max(np.abs(z_new)) > _GUARD:
            raise DivergenceError(
                f"chain diverged at step {state.step + 1} (eta={eta})",
                step=state.step + 1, eta=eta, last_state=np.array(state.z),
            )
    return ChainState(z=z_new, step=state.step + 1, seed=state.seed,
                      stream=state.stream, rng=state.rng)


# ---------------------------------------------------------------------------
# streaming summary


@dataclass
class EnsembleSummary:
    """Streaming moments and per-coordinate histograms of retained states.

    Internally stores plain sums so that merging is exactly commutative and
    associative up to floating-point rounding.
    """

    n: int
    theta_dim: int
    hist_edges: np.ndarray
    count: int = 0
    sum1: np.ndarray = None
    sum2: np.ndarray = None
    hist_counts: np.ndarray = None

    def __post_init__(self):
        if self.sum1 is None:
            self.sum1 = np.zeros(self.n)
        if self.sum2 is None:
            self.sum2 = np.zeros((self.n, self.n))
        if self.hist_counts is None:
            self.hist_counts = np.zeros((self.n, len(self.hist_edges) - 1), dtype=np.int64)

    @property
    def mean(self):
        return self.sum1 / max(self.count, 1)

    @property
    def second_moment(self):
        return self.sum2 / max(self.count, 1)

    @property
    def cov(self):
        m = self.mean
        return self.second_moment - np.outer(m, m)

    @property
    def theta_mean(self):
        return self.mean[: self.theta_dim]

    @property
    def marginal_histograms(self):
        return [(self.hist_edges, self.hist_counts[i]) for i in range(self.n)]

    def add_states(self, states: np.ndarray):
        if states.size == 0:
            return
        self.count += states.shape[0]
        self.sum1 += states.sum(axis=0)
        self.sum2 += states.T @ states
        lo, hi = self.hist_edges[0], self.hist_edges[-1]
        clipped = np.clip(states, lo, hi - 1e-12 * (hi - lo))
        for i in range(self.n):
            self.hist_counts[i] += np.histogram(clipped[:, i], bins=self.hist_edges)[0]

    def merge(self, other: "EnsembleSummary") -> "EnsembleSummary":
        if other.n != self.n or len(other.hist_edges) != len(self.hist_edges):
            raise UsageError("summaries with different layouts cannot be merged")
        return EnsembleSummary(
            n=self.n, theta_dim=self.theta_dim, hist_edges=self.hist_edges,
            count=self.count + other.count,
            sum1=self.sum1 + other.sum1,
            sum2=self.sum2 + other.sum2,
            hist_counts=self.hist_counts + other.hist_counts,
        )


def summary_to_dict(s: EnsembleSummary) -> dict:
    return {
        "count": s.count,
        "mean": s.mean.tolist(),
        "second_moment": s.second_moment.tolist(),
        "theta_mean": s.theta_mean.tolist(),
        "marginal_histograms": [
            {"edges": s.hist_edges.tolist(), "counts": s.hist_counts[i].tolist()}
            for i in range(s.n)
        ],
    }


def summary_from_dict(d: dict, theta_dim: Optional[int] = None) -> EnsembleSummary:
    mean = np.asarray(d["mean"], dtype=float)
    n = mean.size
    count = int(d["count"])
    edges = np.asarray(d["marginal_histograms"][0]["edges"], dtype=float)
    s = EnsembleSummary(
        n=n,
        theta_dim=theta_dim if theta_dim is not None else len(d["theta_mean"]),
        hist_edges=edges,
        count=count,
        sum1=mean * count,
        sum2=np.asarray(d["second_moment"], dtype=float) * count,
        hist_counts=np.asarray(
            [h["counts"] for h in d["marginal_histograms"]], dtype=np.int64
        ),
    )
    return s


# ---------------------------------------------------------------------------
# chains and ensembles


@dataclass
class TrajectoryHandle:
    path: Optional[Path] = None
    last_state: Optional[np.ndarray] = None


@dataclass
class EnsembleResult:
    summary: EnsembleSummary
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.failures


def _retained_mask(step_offset, chunk_len, burn_in, thinning):
    # global step index of row i is step_offset + i + 1 (states are post-step)
    ks = step_offset + 1 + np.arange(chunk_len)
    mask = ks > burn_in
    if thinning > 1:
        mask &= ((ks - burn_in - 1) % thinning) == 0
    return mask


def run_chain(spec: DynamicsSpec, config: IntegratorConfig, init,
              chain_id: int = 0, spill_dir=None):
    """Run one chain; returns (TrajectoryHandle, EnsembleSummary).

    Divergence raises DivergenceError carrying the last finite state.
    """
    init = np.asarray(init, dtype=float)
    if init.shape != (spec.n,):
        raise UsageError(f"init has shape {init.shape}, expected ({spec.n},)")
    state = make_chain_state(init, config.seed, chain_id)
    summary = EnsembleSummary(
        n=spec.n, theta_dim=spec.aug_layout.d,
        hist_edges=np.linspace(config.hist_range[0], config.hist_range[1],
                               config.hist_bins + 1),
    )
    fast = _fast_descriptor(spec)
    stepper = None if fast is not None else _variant_stepper(spec, config.eta)

    writer = None
    fh = None
    path = None
    if spill_dir is not None:
        path = Path(spill_dir) / f"chain_{chain_id:03d}.csv"
        fh = open(path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"z{i}" for i in range(spec.n)])

    z = np.array(init)
    done = 0
    try:
        while done < config.n_steps:
            chunk = min(_CHUNK, config.n_steps - done)
            noise = state.rng.standard_normal((chunk, spec.n))
            out = np.empty((chunk, spec.n))
            if fast is not None:
                code, par, jmat, d = fast
                bad = backend.integrate_chunk(code, config.eta, z, noise, out,
                                              par, jmat, d)
            else:
                bad = -1
                for i in range(chunk):
                    z_new = stepper(z, noise[i])
                    if not np.all(np.isfinite(z_new)) or np.max(np.abs(z_new)) > _GUARD:
                        bad = i
                        break
                    z = z_new
                    out[i] = z_new
            valid = chunk if bad < 0 else bad
            if valid > 0:
                mask = _retained_mask(done, valid, config.burn_in, config.thinning)
                summary.add_states(out[:valid][mask])
                if writer is not None:
                    for i in range(valid):
                        writer.writerow([done + 1 + i] + [repr(float(v)) for v in out[i]])
            if bad >= 0:
                raise DivergenceError(
                    f"chain {chain_id} diverged at step {done + bad + 1} "
                    f"(eta={config.eta})",
                    step=done + bad + 1, eta=config.eta,
                    last_state=np.array(z),
                )
            done += chunk
    finally:
        if fh is not None:
            fh.close()

    return TrajectoryHandle(path=path, last_state=np.array(z)), summary


def run_ensemble(spec: DynamicsSpec, config: IntegratorConfig, init,
                 spill_dir=None) -> EnsembleResult:
    """Run n_chains independent chains and merge their summaries in id order.

    Chain divergence does not abort the ensemble; failed chains are listed in
    the result's ``failures`` with their partial summaries discarded.
    """
    def one(cid):
        try:
            _, s = run_chain(spec, config, init, chain_id=cid, spill_dir=spill_dir)
            return cid, s, None
        except DivergenceError as exc:
            return cid, None, exc

    ids = list(range(config.n_chains))
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(cid) for cid in ids]

    merged = None
    failures = []
    for cid, s, exc in sorted(results, key=lambda t: t[0]):
        if exc is not None:
            failures.append({"chain": cid, "step": exc.step, "message": str(exc)})
        else:
            merged = s if merged is None else merged.merge(s)
    if merged is None:
        merged = EnsembleSummary(
            n=spec.n, theta_dim=spec.aug_layout.d,
            hist_edges=np.linspace(config.hist_range[0], config.hist_range[1],
                                   config.hist_bins + 1),
        )
    return EnsembleResult(summary=merged, failures=failures)


def ks_distance_marginal(summary: EnsembleSummary, coord: int, cdf) -> float:
    """Kolmogorov-Smirnov statistic of a marginal histogram against a CDF.

    The empirical CDF is exact at bin edges, so this is the KS statistic
    restricted to the edge grid.
    """
    if summary.count == 0:
        raise UsageError("summary is empty")
    if not 0 <= coord < summary.n:
        raise UsageError(f"coordinate {coord} out of range for n={summary.n}")
    edges = summary.hist_edges
    counts = summary.hist_counts[coord]
    ecdf = np.concatenate([[0.0], np.cumsum(counts) / summary.count])
    target = np.array([cdf(e) for e in edges], dtype=float)
    return float(np.max(np.abs(ecdf - target)))
