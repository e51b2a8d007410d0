"""Bayesian logistic regression experiments: data, splits, sampler harness.

Synthetic data follows the scheme: features X_j ~ N(0, feature_scale I),
true weights ~ N(0, prior_scale I), labels Bernoulli through the sigmoid of
the true logit.  Real data comes from the standard diagnostic breast-cancer
CSV layout (id column, M/B label, 30 numeric features); an intercept column
is appended on ingestion.  Experiments run any sampler variant on the train
posterior and record test accuracy along the trajectory.
"""

import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__, potentials, samplers
from .dynamics import build_variant_spec
from .errors import IngestionError, UsageError

__all__ = [
    "Dataset",
    "SyntheticConfig",
    "ExperimentConfig",
    "AccuracyTrajectory",
    "gen_synthetic",
    "load_wdbc",
    "save_dataset",
    "load_dataset",
    "split_standardize",
    "apply_standardization",
    "accuracy",
    "map_baseline",
    "run_experiment",
]

_GUARD = 1.0e8


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    feature_names: Optional[list] = None
    standardized: bool = False
    intercept_appended: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise UsageError("dataset needs a nonempty 2-D feature matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("labels must align with feature rows")
        if not np.all(np.isin(self.labels, (0, 1))):
            raise UsageError("labels must be binary 0/1")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features must be finite")

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SyntheticConfig:
    n: int
    d: int
    feature_scale: float = 10.0   # covariance multiplier of the features
    prior_scale: float = 10.0     # covariance multiplier of the true weights
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise UsageError("n and d must be positive")
        if self.feature_scale <= 0 or self.prior_scale <= 0:
            raise UsageError("scales must be positive")


def gen_synthetic(config: SyntheticConfig):
    """Generate (Dataset, true_weights); fully determined by config.seed."""
    rng = np.random.Generator(np.random.Philox(key=[config.seed & 0xFFFFFFFFFFFFFFFF, 0xB1]))
    X = rng.standard_normal((config.n, config.d)) * np.sqrt(config.feature_scale)
    x_true = rng.standard_normal(config.d) * np.sqrt(config.prior_scale)
    p = rng.uniform(size=config.n)
    from scipy.special import expit

    y = (p <= expit(X @ x_true)).astype(np.int64)
    return Dataset(features=X, labels=y), x_true


def load_wdbc(path) -> Dataset:
    """Load the diagnostic breast-cancer CSV: id, M/B label, 30 features.

    The id column is dropped, M maps to 1 and B to 0, and a constant
    intercept column is appended (31 columns total).  Malformed rows raise
    IngestionError naming the line.
    """
    rows = []
    labels = []
    try:
        fh = open(path, "r")
    except OSError as exc:
        raise exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 32:
                raise IngestionError(
                    f"line {lineno}: expected 32 comma-separated fields, got {len(parts)}"
                )
            diag = parts[1].strip()
            if diag not in ("M", "B"):
                raise IngestionError(f"line {lineno}: diagnosis must be M or B, got {diag!r}")
            try:
                feats = [float(x) for x in parts[2:]]
            except ValueError as exc:
                raise IngestionError(f"line {lineno}: non-numeric feature ({exc})") from exc
            if not all(np.isfinite(feats)):
                raise IngestionError(f"line {lineno}: non-finite feature value")
            rows.append(feats)
            labels.append(1 if diag == "M" else 0)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    X = np.asarray(rows, dtype=float)
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    names = [f"f{i:02d}" for i in range(30)] + ["intercept"]
    return Dataset(features=X, labels=np.asarray(labels), feature_names=names,
                   intercept_appended=True)


def save_dataset(data: Dataset, path):
    """JSON serialization; floats survive a save/load round trip exactly."""
    payload = {
        "feature_names": data.feature_names,
        "standardized": data.standardized,
        "intercept_appended": data.intercept_appended,
        "features": [[float(x) for x in row] for row in data.features],
        "labels": [int(y) for y in data.labels],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        payload = json.load(fh)
    return Dataset(
        features=np.asarray(payload["features"], dtype=float),
        labels=np.asarray(payload["labels"]),
        feature_names=payload.get("feature_names"),
        standardized=bool(payload.get("standardized", False)),
        intercept_appended=bool(payload.get("intercept_appended", False)),
    )


@dataclass
class StandardizationRecord:
    mean: np.ndarray
    scale: np.ndarray          # 1.0 where a column was left unscaled
    skipped_columns: list
    warnings: list


def apply_standardization(record: StandardizationRecord, data: Dataset) -> Dataset:
    """Apply a fitted z-score transform; no-op on already standardized data."""
    if data.standardized:
        return data
    feats = (data.features - record.mean) / record.scale
    return replace(data, features=feats, standardized=True)


def split_standardize(data: Dataset, train_fraction: float, seed: int,
                      standardize: bool = True):
    """Seeded shuffle split plus train-fitted z-scoring of both folds.

    The intercept column (when flagged) is exempt from scaling; degenerate
    zero-variance columns are left unscaled with a warning in the record.
    """
    if not 0.0 < train_fraction < 1.0:
        raise UsageError("train_fraction must lie strictly between 0 and 1")
    rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0xCE]))
    perm = rng.permutation(data.n)
    n_train = int(np.floor(train_fraction * data.n))
    if n_train == 0 or n_train == data.n:
        raise UsageError("split leaves an empty fold")
    tr_idx, te_idx = perm[:n_train], perm[n_train:]
    train = replace(data, features=data.features[tr_idx], labels=data.labels[tr_idx])
    test = replace(data, features=data.features[te_idx], labels=data.labels[te_idx])

    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    scale = std.copy()
    skipped = []
    warnings = []
    for j in range(data.d):
        if data.intercept_appended and j == data.d - 1:
            mean[j], scale[j] = 0.0, 1.0
            continue
        if std[j] == 0.0:
            mean[j], scale[j] = 0.0, 1.0
            skipped.append(j)
            warnings.append(f"column {j} has zero variance; left unscaled")
    record = StandardizationRecord(mean=mean, scale=scale,
                                   skipped_columns=skipped, warnings=warnings)
    if standardize:
        train = apply_standardization(record, train)
        test = apply_standardization(record, test)
    return train, test, record


def accuracy(weights, data: Dataset) -> float:
    """Fraction of correct sign predictions; sigma(w.x) >= 1/2 predicts 1."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (data.d,):
        raise UsageError(f"weights have shape {weights.shape}, expected ({data.d},)")
    pred = (data.features @ weights >= 0.0).astype(np.int64)
    return float(np.mean(pred == data.labels))


def map_baseline(potential, max_iters: int = 50000, tol: float = 1e-8) -> np.ndarray:
    """Deterministic gradient-descent MAP estimate of a BLR potential.

    Fixed step 1/L with L from the Hessian bound at the origin; convex and
    smooth, so this converges without line search.
    """
    d = potential.dim
    w = np.zeros(d)
    L = float(np.max(np.linalg.eigvalsh(potential.hessian(w))))
    lr = 1.0 / L
    for _ in range(max_iters):
        g = potential.grad(w)
        if float(np.max(np.abs(g))) < tol:
            break
        w = w - lr * g
    return w


@dataclass(frozen=True)
class ExperimentConfig:
    variant: str
    eta: float
    n_steps: int
    eval_every: int
    hyperparams: dict = field(default_factory=dict)
    prediction_rule: str = "current-iterate"   # or "running-mean"
    lam: float = 10.0
    train_fraction: float = 0.8
    split_seed: int = 0
    seed: int = 0
    standardize: bool = True
    mirror_eps: float = 0.25

    def __post_init__(self):
        if self.eval_every < 1 or self.eval_every > self.n_steps:
            raise UsageError("eval_every must satisfy 1 <= eval_every <= n_steps")
        if self.prediction_rule not in ("current-iterate", "running-mean"):
            raise UsageError("prediction_rule must be current-iterate or running-mean")
        if self.eta <= 0 or self.n_steps < 1:
            raise UsageError("eta must be positive and n_steps >= 1")


@dataclass
class AccuracyTrajectory:
    steps: list
    accuracies: list
    wall_ms: list
    failed: bool = False
    failure_step: Optional[int] = None
    meta: dict = field(default_factory=dict)

    @property
    def final_accuracy(self):
        return self.accuracies[-1] if self.accuracies else float("nan")

    def save_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "accuracy", "wall_ms"])
            for s, a, w in zip(self.steps, self.accuracies, self.wall_ms):
                writer.writerow([s, repr(float(a)), repr(float(w))])
            if self.failed:
                writer.writerow([self.failure_step, "diverged", ""])

    def save_metadata(self, path):
        with open(path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)


def _experiment_spec(exp: ExperimentConfig, potential):
    d = potential.dim
    hp = dict(exp.hyperparams)
    mirror = None
    if exp.variant == "mirror":
        mirror = potentials.make_quartic_mirror(d, exp.mirror_eps)
    if exp.variant == "nonreversible" and "J" not in hp:
        scale = float(hp.pop("j_scale", 1.0 / np.sqrt(d)))
        from .dynamics import random_antisymmetric

        hp["J"] = random_antisymmetric(d, seed=exp.seed, scale=scale)
    return build_variant_spec(exp.variant, potential, hp, mirror=mirror)


def run_experiment(exp: ExperimentConfig, data: Dataset) -> AccuracyTrajectory:
    """Split, build the train posterior, run the sampler, score on test.

    Test accuracy is recorded every ``eval_every`` steps under the configured
    prediction rule; divergence truncates the trajectory and sets the failure
    marker instead of raising.
    """
    train, test, record = split_standardize(
        data, exp.train_fraction, exp.split_seed, standardize=exp.standardize)
    potential = potentials.make_blr_potential(train, exp.lam)
    spec = _experiment_spec(exp, potential)
    d = potential.dim

    deviations = []
    if exp.standardize:
        deviations.append("features standardized with train-fold statistics")
    if exp.variant == "mirror":
        deviations.append(f"mirror metric regularized with eps={exp.mirror_eps}")

    rng = np.random.Generator(np.random.Philox(key=[exp.seed & 0xFFFFFFFFFFFFFFFF, 0]))
    step_fn = samplers.make_stepper(spec, exp.eta)
    z = np.zeros(spec.n)
    w_sum = np.zeros(d)

    steps, accs, walls = [], [], []
    failed = False
    failure_step = None
    t0 = time.perf_counter()
    for k in range(1, exp.n_steps + 1):
        xi = rng.standard_normal(spec.n)
        z_new = step_fn(z, xi)
        if not np.all(np.isfinite(z_new)) or float(np.max(np.abs(z_new))) > _GUARD:
            failed = True
            failure_step = k
            break
        z = z_new
        w_sum += z[:d]
        if k % exp.eval_every == 0:
            w = z[:d] if exp.prediction_rule == "current-iterate" else w_sum / k
            steps.append(k)
            accs.append(accuracy(w, test))
            walls.append(1000.0 * (time.perf_counter() - t0))

    meta = {
        "variant": exp.variant,
        "eta": exp.eta,
        "n_steps": exp.n_steps,
        "eval_every": exp.eval_every,
        "hyperparams": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                        for k, v in exp.hyperparams.items()},
        "prediction_rule": exp.prediction_rule,
        "lam": exp.lam,
        "train_fraction": exp.train_fraction,
        "split_seed": exp.split_seed,
        "seed": exp.seed,
        "standardize": exp.standardize,
        "mirror_eps": exp.mirror_eps if exp.variant == "mirror" else None,
        "train_rows": train.n,
        "test_rows": test.n,
        "version": __version__,
        "deviations": deviations,
        "failed": failed,
        "failure_step": failure_step,
        "standardization_warnings": record.warnings,
    }
    return AccuracyTrajectory(steps=steps, accuracies=accs, wall_ms=walls,
                              failed=failed, failure_step=failure_step, meta=meta)
