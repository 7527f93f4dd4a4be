# tests/test_poisson_gateaux.py
import numpy as np
import pytest

from conftest import CONTROL_ROOT
from sa_lab.controlled_kernels import FiniteKernelFamily, stationary_distribution, transition_matrix
from sa_lab.errors import ConfigurationError, ErgodicityError, UnsupportedOperationError
from sa_lab.mean_field import local_jacobian
from sa_lab.poisson_gateaux import (
    apply_kernel,
    bias_operator,
    gateaux_derivative,
    poisson_operator_bounds,
    poisson_solve_exact,
    poisson_solve_series,
    solve_for_map,
    wd_remainder_scan,
)
from sa_lab.registry import build_kernel, build_map


def _five_state_family():
    gen = np.random.default_rng(42)
    base = gen.random((5, 5)) + 0.2
    base /= base.sum(axis=1, keepdims=True)
    return FiniteKernelFamily(5, lambda theta: base), base


# --- P0: Poisson equation -------------------------------------------------------------


@pytest.mark.p0
def test_poisson_on_uniform_two_state_chain():
    """With P = 1/2 everywhere and f = (1, -1), P f = 0 and pi f = 0, so g_hat = f."""
    P = np.full((2, 2), 0.5)
    sol = poisson_solve_exact(P, [0.5, 0.5], [1.0, -1.0])
    assert np.allclose(sol.values, [1.0, -1.0], atol=1e-14)
    assert sol.centering_residual < 1e-14 and sol.equation_residual < 1e-14


@pytest.mark.p0
def test_poisson_of_constant_is_zero():
    P = np.array([[0.9, 0.1], [0.2, 0.8]])
    sol = poisson_solve_exact(P, stationary_distribution(P), [3.0, 3.0])
    assert np.allclose(sol.values, 0.0, atol=1e-14)


@pytest.mark.p0
def test_series_agrees_with_fundamental_matrix(recorder):
    """Steps:
    1. Build a fixed 5-state chain with strictly positive rows
    2. Solve the Poisson equation exactly and by a deep truncated series
    3. The two agree to 1e-8 and the series tail bound covers the gap
    """
    family, P = _five_state_family()
    f = np.arange(5.0) ** 2
    exact = poisson_solve_exact(P, stationary_distribution(P), f)
    series = poisson_solve_series(family, [0.0], f, depth=200, rho_hat=0.5)
    gap = float(np.abs(series.values - exact.values).max())
    recorder.metrics({"gap": gap, "tail_bound": series.tail_bound})
    assert gap < 1e-8
    assert series.tail_bound is not None and gap <= series.tail_bound + 1e-12


@pytest.mark.p1
def test_poisson_rejects_reducible_chain():
    with pytest.raises(ErgodicityError):
        poisson_solve_exact(np.eye(2), [0.5, 0.5], [1.0, -1.0])


@pytest.mark.p1
def test_poisson_rejects_non_stationary_pi():
    with pytest.raises(ConfigurationError, match="pi"):
        poisson_solve_exact(np.array([[0.9, 0.1], [0.2, 0.8]]), [0.5, 0.5], [1.0, -1.0])


@pytest.mark.p1
def test_solve_for_map_is_centred(finite2_problem, finite2_root):
    kernel, update = finite2_problem
    sol = solve_for_map(update, kernel, finite2_root.theta_star)
    pi = stationary_distribution(transition_matrix(kernel, finite2_root.theta_star))
    assert sol.values.shape == (2, 1)
    assert abs(float(pi @ sol.values[:, 0])) < 1e-12
    assert sol.equation_residual < 1e-12


@pytest.mark.p2
def test_solve_for_map_needs_finite_kernel():
    kernel = build_kernel("clipped_ar", {})
    with pytest.raises(UnsupportedOperationError):
        solve_for_map(build_map("linear_hx", {}, kernel), kernel, [0.0])


# --- P1: kernel images ------------------------------------------------------------------


@pytest.mark.p1
def test_apply_kernel_on_finite_chain():
    kernel = build_kernel("finite2", {"a0": 0.1, "ka": 0.0, "b0": 0.2, "kb": 0.0})
    assert np.allclose(apply_kernel(kernel, [0.0], [1.0, 0.0]), [0.9, 0.2])


@pytest.mark.p1
def test_apply_kernel_accepts_callable_on_finite_chain():
    """Steps:
    1. Apply P_theta to h(x) = x given as a callable on the state batch
    2. The image matches the per-state table [0, 1]: P[:, 1] = (0.1, 0.8)
    3. An indicator callable matches its table too
    """
    kernel = build_kernel("finite2", {"a0": 0.1, "ka": 0.0, "b0": 0.2, "kb": 0.0})
    image = apply_kernel(kernel, [0.0], lambda x: x)
    assert np.allclose(image, apply_kernel(kernel, [0.0], [0.0, 1.0]))
    assert np.allclose(image, [0.1, 0.8])
    indicator = apply_kernel(kernel, [0.0], lambda x: (x == 0).astype(float))
    assert np.allclose(indicator, [0.9, 0.2])


@pytest.mark.p1
def test_apply_kernel_monte_carlo_mean():
    """P_theta applied to h(x) = x from x = 2 is rho*2 + m(theta) = 1 + theta for rho = 0.5, m = theta."""
    kernel = build_kernel("clipped_ar", {"rho": 0.5, "m_slope": 1.0, "sigma0": 1.0})
    image = apply_kernel(kernel, [0.5], lambda x: x[:, 0], budget=50_000, query_points=[[2.0]])
    assert abs(image[0] - 1.5) < 0.03


@pytest.mark.p2
def test_apply_kernel_needs_budget_for_continuous():
    kernel = build_kernel("clipped_ar", {})
    with pytest.raises(ConfigurationError, match="budget"):
        apply_kernel(kernel, [0.0], lambda x: x[:, 0], budget=None, query_points=[[0.0]])


# --- P0/P1: Gateaux derivative and remainder scan --------------------------------------------


@pytest.fixture(scope="module")
def gateaux_at_root(finite2_problem, finite2_root):
    kernel, update = finite2_problem
    g_hat = solve_for_map(update, kernel, finite2_root.theta_star)
    lam = gateaux_derivative(kernel, finite2_root.theta_star, g_hat)
    return g_hat, lam


@pytest.mark.p0
def test_total_jacobian_splits_into_local_plus_kernel_response(finite2_problem, finite2_root, gateaux_at_root, recorder):
    """gbar'(theta*) = E_pi[g'(theta*, X)] + lambda_bar for a smooth decision-dependent chain."""
    kernel, update = finite2_problem
    _, lam = gateaux_at_root
    j_loc = local_jacobian(update, kernel, finite2_root.theta_star)
    residual = float(np.abs(j_loc + lam.lambda_bar - finite2_root.jacobian).max())
    recorder.metrics({"lambda_bar": lam.lambda_bar, "identity_residual": residual})
    assert lam.differentiable and not lam.warnings
    assert residual < 1e-6, f"identity residual {residual}"


@pytest.mark.p1
def test_gateaux_of_decision_independent_kernel_vanishes(control_problem):
    kernel, update = control_problem
    g_hat = solve_for_map(update, kernel, [CONTROL_ROOT])
    lam = gateaux_derivative(kernel, [CONTROL_ROOT], g_hat)
    assert np.allclose(lam.lambda_star, 0.0, atol=1e-14)
    assert np.allclose(lam.lambda_bar, 0.0, atol=1e-14)


@pytest.mark.p1
def test_gateaux_rejects_equal_steps(finite2_problem, finite2_root, gateaux_at_root):
    kernel, _ = finite2_problem
    g_hat, _ = gateaux_at_root
    with pytest.raises(ConfigurationError, match="fd_steps"):
        gateaux_derivative(kernel, finite2_root.theta_star, g_hat, fd_steps=(1e-3, 1e-3))


@pytest.mark.p0
def test_smooth_family_has_quadratic_remainder(finite2_problem, finite2_root, gateaux_at_root, recorder):
    kernel, _ = finite2_problem
    g_hat, lam = gateaux_at_root
    report = wd_remainder_scan(kernel, finite2_root.theta_star, g_hat, lam, radii=np.geomspace(1e-1, 1e-3, 5))
    recorder.metrics(report.to_record())
    assert report.fitted_exponent is not None and report.fitted_exponent > 1.8, f"exponent {report.fitted_exponent}"
    assert not report.violation


@pytest.mark.p0
def test_kink_family_is_flagged(kink_problem, recorder):
    """A corner at the root leaves a first-order remainder, which the scan must flag."""
    kernel, update = kink_problem
    g_hat = solve_for_map(update, kernel, [CONTROL_ROOT])
    lam = gateaux_derivative(kernel, [CONTROL_ROOT], g_hat)
    report = wd_remainder_scan(kernel, [CONTROL_ROOT], g_hat, lam, radii=np.geomspace(1e-1, 1e-3, 5))
    recorder.metrics({"fitted_exponent": report.fitted_exponent, "richardson_error": lam.richardson_error})
    assert report.violation
    assert report.fitted_exponent < 1.5


@pytest.mark.p2
def test_remainder_scan_radii_must_decrease(finite2_problem, finite2_root, gateaux_at_root):
    kernel, _ = finite2_problem
    g_hat, lam = gateaux_at_root
    with pytest.raises(ConfigurationError, match="radii"):
        wd_remainder_scan(kernel, finite2_root.theta_star, g_hat, lam, radii=[1e-3, 1e-2])


# --- P1: bias-equation operators ---------------------------------------------------------------


@pytest.mark.p1
def test_bias_operator_invertibility():
    ok = bias_operator(np.zeros((2, 2)), -np.eye(2))
    assert ok.invertible and ok.min_singular_value == pytest.approx(1.0)
    singular = bias_operator(np.eye(2), -np.eye(2))
    assert not singular.invertible and singular.min_singular_value == 0.0


@pytest.mark.p2
def test_bias_operator_dimension_mismatch():
    with pytest.raises(ConfigurationError, match="dimension"):
        bias_operator(np.zeros((2, 2)), -np.eye(3))


@pytest.mark.p1
def test_operator_bounds_on_decision_independent_chain(control_problem):
    kernel, update = control_problem
    g_hat = solve_for_map(update, kernel, [CONTROL_ROOT])
    bounds = poisson_operator_bounds(kernel, [CONTROL_ROOT], g_hat, np.linspace(0.0, 1.0, 5))
    assert bounds.lipschitz_image == 0.0
    assert bounds.l_ph0 >= float(np.abs(g_hat.values).max())
