import numpy as np
import pytest

from langevinlab import dynamics, potentials
from langevinlab.errors import UsageError


def _all_specs(d_theta=1):
    pot = potentials.standard_gaussian(d_theta)
    pot2 = potentials.standard_gaussian(2)
    return {
        "overdamped": dynamics.build_variant_spec("overdamped", pot),
        "underdamped": dynamics.build_variant_spec("underdamped", pot, {"gamma": 4.0}),
        "nonreversible": dynamics.build_variant_spec(
            "nonreversible", pot2, {"J": dynamics.random_antisymmetric(2, seed=3)}),
        "mirror": dynamics.build_variant_spec(
            "mirror", pot, mirror=potentials.make_quartic_mirror(d_theta, 1.0)),
        "highorder": dynamics.build_variant_spec("highorder", pot,
                                                 {"gamma": 3.0, "alpha": 2.0}),
        "hfhr": dynamics.build_variant_spec("hfhr", pot, {"beta": 1.0, "alpha": 2.0}),
    }


def test_drift_examples():
    pot = potentials.standard_gaussian(1)
    over = dynamics.build_variant_spec("overdamped", potentials.standard_gaussian(2))
    np.testing.assert_allclose(dynamics.drift(over, [1.0, 0.0]), [-1.0, 0.0])

    ud = dynamics.build_variant_spec("underdamped", pot, {"gamma": 4.0})
    np.testing.assert_allclose(dynamics.drift(ud, [1.0, 2.0]), [2.0, -9.0])

    ho = dynamics.build_variant_spec("highorder", pot, {"gamma": 20.0, "alpha": 15.0})
    np.testing.assert_allclose(dynamics.drift(ho, [1.0, 1.0, 1.0]), [1.0, 19.0, -35.0])

    hf = dynamics.build_variant_spec("hfhr", pot, {"alpha": 30.0, "beta": 1.0})
    np.testing.assert_allclose(dynamics.drift(hf, [0.5, 2.0]),
                               [2.0 - 1.0 * 0.5, -30.0 * 2.0 - 0.5])

    mm = potentials.make_quartic_mirror(1, 0.0)
    mi = dynamics.build_variant_spec("mirror", pot, mirror=mm)
    np.testing.assert_allclose(dynamics.drift(mi, [1.0]), [-1.0])


def test_missing_parameters_rejected():
    pot = potentials.standard_gaussian(1)
    with pytest.raises(UsageError):
        dynamics.build_variant_spec("underdamped", pot)
    with pytest.raises(UsageError):
        dynamics.build_variant_spec("highorder", pot, {"gamma": 1.0})
    with pytest.raises(UsageError):
        dynamics.build_variant_spec("mirror", pot)


def test_j_validation():
    pot = potentials.standard_gaussian(2)
    with pytest.raises(UsageError):
        dynamics.build_variant_spec("nonreversible", pot, {"J": np.ones((3, 3))})
    with pytest.raises(UsageError):
        dynamics.build_variant_spec("nonreversible", pot, {"J": np.eye(2)})


def test_structural_invariants_at_random_points():
    rng = np.random.default_rng(2)
    for name, spec in _all_specs().items():
        for _ in range(25):
            z = rng.uniform(-2.5, 2.5, spec.n)
            q = spec.Q(z)
            assert np.max(np.abs(q + q.T)) <= 1e-12, name
            dmat = spec.D(z)
            assert np.min(np.linalg.eigvalsh(dmat)) >= -1e-12, name
            from langevinlab._fd import fd_gradient

            g = spec.grad_H(z)
            fd = fd_gradient(spec.H, z, 1e-5)
            assert np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(g))) < 1e-5, name


def test_drift_matches_generic_assembly():
    rng = np.random.default_rng(7)
    for name, spec in _all_specs().items():
        pts = 1000 if name != "mirror" else 200
        for _ in range(pts // 10):
            z = rng.uniform(-2.0, 2.0, spec.n)
            if name == "mirror":
                z = np.where(np.abs(z) < 0.2, 0.2, z)  # keep FD of the metric tame
            f1 = dynamics.drift(spec, z)
            f2 = dynamics.generic_drift(spec, z)
            assert np.max(np.abs(f1 - f2)) < 1e-10, name


def test_gamma_correction_constant_matrices():
    for name, spec in _all_specs().items():
        if name == "mirror":
            continue
        z = np.full(spec.n, 0.7)
        np.testing.assert_allclose(dynamics.gamma_correction(spec, z), np.zeros(spec.n))


def test_gamma_correction_mirror_analytic_and_fd():
    pot = potentials.standard_gaussian(2)
    mm = potentials.make_quartic_mirror(2, 0.0)
    spec = dynamics.build_variant_spec("mirror", pot, mirror=mm)
    np.testing.assert_allclose(dynamics.gamma_correction(spec, np.array([1.0, 1.0])),
                               [-2 / 3, -2 / 3])
    from dataclasses import replace

    fd_spec = replace(spec, Gamma=None)
    rng = np.random.default_rng(4)
    for _ in range(100):
        z = rng.uniform(0.4, 2.5, 2) * rng.choice([-1.0, 1.0], 2)
        a = dynamics.gamma_correction(spec, z)
        b = dynamics.gamma_correction(fd_spec, z, fd_step=1e-4)
        assert np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))) < 1e-4


def test_stationarity_residuals_small_for_exact_dynamics():
    rng = np.random.default_rng(42)
    for name, spec in _all_specs().items():
        cloud = rng.uniform(-3, 3, size=(50, spec.n))
        worst = max(abs(dynamics.stationarity_residual(spec, z, 1e-3)) for z in cloud)
        assert worst <= 1e-4, f"{name}: {worst}"


def test_stationarity_negative_control():
    rng = np.random.default_rng(43)
    for name, spec in _all_specs().items():
        bad = dynamics.corrupt_drift(spec)
        cloud = rng.uniform(-3, 3, size=(50, spec.n))
        worst = max(abs(dynamics.stationarity_residual(bad, z, 1e-3)) for z in cloud)
        assert worst > 1e-1, f"{name}: {worst}"


def test_curl_condition_constant_q():
    pot = potentials.standard_gaussian(1)
    spec = dynamics.build_variant_spec("underdamped", pot, {"gamma": 4.0})
    rng = np.random.default_rng(6)
    for _ in range(20):
        z = rng.uniform(-2, 2, 2)
        assert abs(dynamics.curl_condition_residual(spec, z, 1e-3)) <= 1e-6


def test_curl_condition_mirror_paper_matrix():
    pot = potentials.standard_gaussian(2)
    mm = potentials.make_quartic_mirror(2, 0.1)
    spec = dynamics.build_variant_spec("mirror", pot, mirror=mm)
    curl = dynamics.mirror_paper_curl(spec)
    rng = np.random.default_rng(8)
    for _ in range(20):
        z = rng.uniform(-1.5, 1.5, 2)   # keep exp(U) moderate
        assert abs(dynamics.curl_condition_residual(spec, z, 1e-3, curl=curl)) <= 1e-4


def test_custom_spec_validation():
    n = 2

    def bad_q(z):
        return np.array([[0.0, z[0]], [z[0], 0.0]])  # symmetric, not anti-symmetric

    with pytest.raises(UsageError):
        dynamics.build_custom_spec(
            n, D=lambda z: np.eye(n), Q=bad_q,
            H=lambda z: 0.5 * float(np.dot(z, z)))

    def indefinite_d(z):
        return np.diag([1.0, -1.0])

    with pytest.raises(UsageError):
        dynamics.build_custom_spec(
            n, D=indefinite_d, Q=lambda z: np.zeros((n, n)),
            H=lambda z: 0.5 * float(np.dot(z, z)))


def test_custom_spec_generic_drift():
    n = 2
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    spec = dynamics.build_custom_spec(
        n, D=lambda z: np.eye(n), Q=lambda z: J,
        H=lambda z: 0.5 * float(np.dot(z, z)),
        grad_H=lambda z: np.asarray(z, dtype=float),
        Gamma=lambda z: np.zeros(n))
    z = np.array([1.0, 2.0])
    np.testing.assert_allclose(dynamics.drift(spec, z), -(np.eye(2) + J) @ z)


def test_nonfinite_drift_reports_coordinate():
    pot = potentials.standard_gaussian(1)
    mm = potentials.make_quartic_mirror(1, 0.0)
    spec = dynamics.build_variant_spec("mirror", pot, mirror=mm)
    from langevinlab.errors import NumericError, SingularMetricError

    with pytest.raises((NumericError, SingularMetricError)):
        dynamics.drift(spec, np.zeros(1))
