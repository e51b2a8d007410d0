"""Target potentials and mirror-map metrics.

A PotentialModel bundles U, its gradient and (optionally) its Hessian; a
MirrorMetric bundles a position-dependent SPD diffusion matrix together with
the row-divergence vector needed as a drift correction.  Gradients are
hand-coded per model and validated against finite differences in the test
suite; there is no autodiff here.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .errors import SingularMetricError, UsageError

__all__ = [
    "PotentialModel",
    "MirrorMetric",
    "evaluate",
    "standard_gaussian",
    "double_well",
    "make_blr_potential",
    "make_quartic_mirror",
    "make_dominating_mirror",
]


@dataclass(frozen=True)
class PotentialModel:
    """Scalar potential on R^dim with gradient and optional Hessian.

    ``eval_batch``/``grad_batch`` evaluate many points at once (rows of an
    (m, dim) array); they are optional accelerators used by the grid lab.
    """

    dim: int
    eval: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    name: str
    hessian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eval_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None
    grad_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise UsageError("potential dimension must be a positive integer")


@dataclass(frozen=True)
class MirrorMetric:
    """Diagonal (or dense) SPD metric with its row-divergence correction.

    ``metric(x)`` is the inverse mirror Hessian used as the diffusion matrix;
    ``metric_divergence(x)[i]`` is the divergence of row i of the metric.
    """

    dim: int
    metric: Callable[[np.ndarray], np.ndarray]
    metric_divergence: Callable[[np.ndarray], np.ndarray]
    regularization_eps: float = 0.0
    name: str = "mirror"
    # Optional vectorized forms over grid meshes, used by the rate lab.
    metric_diag_batch: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.dim < 1:
            raise UsageError("metric dimension must be a positive integer")
        if self.regularization_eps < 0:
            raise UsageError("regularization_eps must be nonnegative")


def evaluate(model: PotentialModel, point) -> tuple:
    """Return (U(point), grad U(point)); raises UsageError on bad dimension."""
    point = np.asarray(point, dtype=float)
    if point.shape != (model.dim,):
        raise UsageError(
            f"point has shape {point.shape}, expected ({model.dim},) for potential {model.name!r}"
        )
    return float(model.eval(point)), np.asarray(model.grad(point), dtype=float)


def standard_gaussian(dim: int) -> PotentialModel:
    """U(x) = |x|^2 / 2, the standard Gaussian potential."""

    def _eval(x):
        return 0.5 * float(np.dot(x, x))

    def _grad(x):
        return np.array(x, dtype=float)

    def _hess(x):
        return np.eye(dim)

    return PotentialModel(
        dim=dim,
        eval=_eval,
        grad=_grad,
        hessian=_hess,
        name="gaussian",
        eval_batch=lambda pts: 0.5 * np.sum(pts * pts, axis=-1),
        grad_batch=lambda pts: np.array(pts, dtype=float),
    )


def double_well(dim: int) -> PotentialModel:
    """Separable double well, U(x) = sum_i x_i^4/4 - x_i^2/2."""

    def _eval(x):
        return float(np.sum(0.25 * x**4 - 0.5 * x**2))

    def _grad(x):
        return x**3 - x

    def _hess(x):
        return np.diag(3.0 * x**2 - 1.0)

    return PotentialModel(
        dim=dim,
        eval=_eval,
        grad=_grad,
        hessian=_hess,
        name="double_well",
        eval_batch=lambda pts: np.sum(0.25 * pts**4 - 0.5 * pts**2, axis=-1),
        grad_batch=lambda pts: pts**3 - pts,
    )


def _softplus(t):
    # log(1 + e^t), safe for large |t|
    t = np.asarray(t, dtype=float)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def make_blr_potential(data, lam: float) -> PotentialModel:
    """Bayesian logistic regression potential on the given dataset.

    U(x) = sum_j log(1 + exp(-yt_j <x, X_j>)) + |x|^2 / (2 lam) with
    yt_j = 2 y_j - 1.  The log-likelihood is label-aware (see module docs);
    the quadratic term comes from the N(0, lam I) prior.
    """
    if lam <= 0:
        raise UsageError("prior scale lam must be positive")
    features = np.asarray(data.features, dtype=float)
    labels = np.asarray(data.labels)
    if features.ndim != 2 or features.shape[0] == 0:
        raise UsageError("dataset must contain at least one row")
    n, d = features.shape
    signed = (2.0 * labels - 1.0)[:, None] * features  # rows yt_j * X_j

    def _eval(x):
        t = signed @ x
        return float(np.sum(_softplus(-t))) + 0.5 * float(np.dot(x, x)) / lam

    def _grad(x):
        t = signed @ x
        # d/dx softplus(-t) = -sigmoid(-t) * yt_j X_j
        return -signed.T @ expit(-t) + x / lam

    def _hess(x):
        t = signed @ x
        w = expit(t) * expit(-t)
        return features.T @ (w[:, None] * features) + np.eye(d) / lam

    return PotentialModel(dim=d, eval=_eval, grad=_grad, hessian=_hess, name="blr")


def make_quartic_mirror(dim: int, eps: float = 1e-6) -> MirrorMetric:
    """Metric of the separable quartic mirror potential phi(x) = sum x_i^4 / 4.

    metric = diag(1 / (3 x_i^2 + eps)); eps regularizes the singularity of the
    inverse Hessian at the origin.  eps = 0 is allowed but evaluating at a
    coordinate exactly 0 then raises SingularMetricError.
    """

    def _den(x):
        den = 3.0 * x * x + eps
        if np.any(den == 0.0):
            raise SingularMetricError(
                "quartic mirror metric is singular at a zero coordinate with eps=0"
            )
        return den

    def _metric(x):
        return np.diag(1.0 / _den(np.asarray(x, dtype=float)))

    def _divergence(x):
        x = np.asarray(x, dtype=float)
        den = _den(x)
        return -6.0 * x / (den * den)

    return MirrorMetric(
        dim=dim,
        metric=_metric,
        metric_divergence=_divergence,
        regularization_eps=eps,
        name="quartic_mirror",
        metric_diag_batch=lambda pts: 1.0 / (3.0 * pts * pts + eps),
    )


def make_dominating_mirror(dim: int) -> MirrorMetric:
    """Metric diag(1 + x_i^2), everywhere >= identity.

    Inverse Hessian of the convex phi with phi''(x) = 1/(1+x^2) per coordinate
    (phi(x) = x arctan x - log(1+x^2)/2).  Used for metric-dominates-identity
    comparisons.
    """

    def _metric(x):
        x = np.asarray(x, dtype=float)
        return np.diag(1.0 + x * x)

    def _divergence(x):
        return 2.0 * np.asarray(x, dtype=float)

    return MirrorMetric(
        dim=dim,
        metric=_metric,
        metric_divergence=_divergence,
        regularization_eps=0.0,
        name="dominating_mirror",
        metric_diag_batch=lambda pts: 1.0 + pts * pts,
    )
