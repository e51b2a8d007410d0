import numpy as np
import pytest

from langevinlab import potentials
from langevinlab._fd import fd_gradient, fd_jacobian
from langevinlab.blr import Dataset
from langevinlab.errors import SingularMetricError, UsageError


def test_gaussian_evaluate():
    pot = potentials.standard_gaussian(2)
    val, grad = potentials.evaluate(pot, [3.0, 4.0])
    assert val == 12.5
    np.testing.assert_array_equal(grad, [3.0, 4.0])


def test_double_well_critical_point():
    pot = potentials.double_well(1)
    val, grad = potentials.evaluate(pot, [1.0])
    assert val == pytest.approx(-0.25)
    assert grad[0] == pytest.approx(0.0, abs=1e-15)


def test_evaluate_dimension_mismatch():
    pot = potentials.standard_gaussian(2)
    with pytest.raises(UsageError):
        potentials.evaluate(pot, [1.0, 2.0, 3.0])


def _models():
    data, _ = _small_blr_data()
    return [
        potentials.standard_gaussian(3),
        potentials.double_well(2),
        potentials.make_blr_potential(data, 10.0),
    ]


def _small_blr_data():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    y = (rng.uniform(size=40) < 0.5).astype(int)
    return Dataset(features=X, labels=y), rng


@pytest.mark.parametrize("model_idx", [0, 1, 2])
def test_gradient_matches_finite_differences(model_idx):
    pot = _models()[model_idx]
    rng = np.random.default_rng(model_idx)
    for _ in range(100):
        x = rng.uniform(-2.0, 2.0, pot.dim)
        g = pot.grad(x)
        fd = fd_gradient(pot.eval, x, 1e-4)
        denom = max(1.0, float(np.max(np.abs(g))))
        assert np.max(np.abs(g - fd)) / denom < 1e-5


@pytest.mark.parametrize("model_idx", [0, 1, 2])
def test_hessian_matches_finite_differences(model_idx):
    pot = _models()[model_idx]
    rng = np.random.default_rng(10 + model_idx)
    for _ in range(20):
        x = rng.uniform(-2.0, 2.0, pot.dim)
        h = pot.hessian(x)
        fd = fd_jacobian(pot.grad, x, 1e-4)
        denom = max(1.0, float(np.max(np.abs(h))))
        assert np.max(np.abs(h - fd)) / denom < 1e-4


@pytest.mark.parametrize("model_idx", [0, 1, 2])
def test_eval_finite_on_large_points(model_idx):
    pot = _models()[model_idx]
    rng = np.random.default_rng(20 + model_idx)
    for _ in range(20):
        x = rng.uniform(-1e3, 1e3, pot.dim)
        assert np.isfinite(pot.eval(x))
        assert np.all(np.isfinite(pot.grad(x)))


def test_blr_value_at_origin_is_rows_log2():
    data, _ = _small_blr_data()
    pot = potentials.make_blr_potential(data, 10.0)
    assert pot.eval(np.zeros(3)) == pytest.approx(40 * np.log(2.0))


def test_blr_prior_term():
    data, _ = _small_blr_data()
    x = np.array([1.0, -2.0, 0.5])
    u10 = potentials.make_blr_potential(data, 10.0).eval(x)
    u_big = potentials.make_blr_potential(data, 1e12).eval(x)
    # subtracting the (negligible-prior) value isolates |x|^2 / (2 * 10)
    assert u10 - u_big == pytest.approx(np.dot(x, x) / 20.0, rel=1e-9)


def test_blr_single_row():
    data = Dataset(features=np.array([[1.0]]), labels=np.array([1]))
    pot = potentials.make_blr_potential(data, 10.0)
    assert pot.eval(np.zeros(1)) == pytest.approx(np.log(2.0))
    assert pot.grad(np.zeros(1))[0] == pytest.approx(-0.5)


def test_blr_rejects_bad_inputs():
    data, _ = _small_blr_data()
    with pytest.raises(UsageError):
        potentials.make_blr_potential(data, 0.0)


def test_blr_convexity_midpoints():
    data, _ = _small_blr_data()
    pot = potentials.make_blr_potential(data, 10.0)
    rng = np.random.default_rng(5)
    for _ in range(50):
        a = rng.uniform(-3, 3, 3)
        b = rng.uniform(-3, 3, 3)
        mid = 0.5 * (a + b)
        assert pot.eval(mid) <= 0.5 * (pot.eval(a) + pot.eval(b)) + 1e-9


def test_quartic_mirror_values():
    mm = potentials.make_quartic_mirror(2, 0.0)
    np.testing.assert_allclose(np.diag(mm.metric(np.array([1.0, 1.0]))), [1 / 3, 1 / 3])
    np.testing.assert_allclose(mm.metric_divergence(np.array([1.0, 1.0])), [-2 / 3, -2 / 3])


def test_quartic_mirror_singularity():
    mm = potentials.make_quartic_mirror(2, 0.0)
    with pytest.raises(SingularMetricError):
        mm.metric(np.zeros(2))


def test_quartic_mirror_regularized_origin():
    mm = potentials.make_quartic_mirror(2, 1e-3)
    np.testing.assert_allclose(np.diag(mm.metric(np.zeros(2))), [1000.0, 1000.0])


@pytest.mark.parametrize("factory", [
    lambda: potentials.make_quartic_mirror(2, 0.1),
    lambda: potentials.make_dominating_mirror(2),
])
def test_metric_divergence_matches_fd(factory):
    mm = factory()
    rng = np.random.default_rng(9)
    for _ in range(100):
        x = rng.uniform(0.3, 3.0, 2) * rng.choice([-1.0, 1.0], 2)
        jac = fd_jacobian(mm.metric, x, 1e-5)
        fd_div = np.array([np.sum(np.diagonal(jac[i, :, :])) for i in range(2)])
        div = mm.metric_divergence(x)
        denom = max(1.0, float(np.max(np.abs(div))))
        assert np.max(np.abs(div - fd_div)) / denom < 1e-4


@pytest.mark.parametrize("factory", [
    lambda: potentials.make_quartic_mirror(3, 1e-3),
    lambda: potentials.make_dominating_mirror(3),
])
def test_metric_positive_definite(factory):
    mm = factory()
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = rng.uniform(-3, 3, 3)
        assert np.min(np.linalg.eigvalsh(mm.metric(x))) > 0.0


def test_mirror_divergence_closed_form():
    mm = potentials.make_quartic_mirror(1, 0.0)
    for t in np.linspace(0.5, 3.0, 40):
        for s in (-1.0, 1.0):
            x = np.array([s * t])
            assert mm.metric_divergence(x)[0] == pytest.approx(-2.0 / (3.0 * x[0] ** 3),
                                                               abs=1e-8)
