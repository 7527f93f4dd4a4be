# tests/test_controlled_kernels.py
import math

import numpy as np
import pytest
from scipy import stats

from conftest import SHIPPED_KERNEL
from sa_lab.controlled_kernels import (
    Draws,
    FiniteKernelFamily,
    diagnose_kernel,
    estimate_contraction,
    estimate_sensitivity,
    finite2_family,
    sample_next,
    stationary_distribution,
    transition_matrix,
)
from sa_lab.errors import ConfigurationError, ErgodicityError
from sa_lab.registry import build_kernel


def _clipped_ar(**overrides):
    params = {"rho": 0.5, "m_offset": 0.0, "m_slope": 0.0, "sigma0": 1.0, "clip_bound": 10.0}
    params.update(overrides)
    return build_kernel("clipped_ar", params)


# --- P0: sampling contract ----------------------------------------------------


@pytest.mark.p0
def test_clipped_ar_step_is_deterministic_given_draws():
    """One AR step with zero noise scale lands exactly on rho*x + m(theta).

    Steps:
    1. Build a clipped AR kernel with rho=0.5, m=1, sigma=0
    2. Step from x=0 with a zero normal draw
    3. Expect exactly 1.0
    """
    kernel = _clipped_ar(m_offset=1.0, sigma0=0.0)
    x_next = sample_next(kernel, [0.0], [0.0], Draws(uniform=np.empty(0), normal=np.array([0.0])))
    assert x_next == 1.0, f"expected 1.0, got {x_next}"


@pytest.mark.p0
def test_clipped_ar_respects_clip_bound():
    kernel = _clipped_ar(m_offset=20.0, sigma0=0.0)
    x_next = sample_next(kernel, [0.0], [0.0], Draws(uniform=np.empty(0), normal=np.array([0.0])))
    assert x_next == 10.0, f"expected the clip bound 10.0, got {x_next}"


@pytest.mark.p0
def test_finite_step_inverts_the_row_cdf():
    """Row (0.3, 0.7) with u=0.5 moves to state 1; u=0.1 stays in state 0."""
    family = FiniteKernelFamily(2, lambda theta: np.array([[0.3, 0.7], [0.3, 0.7]]))
    assert sample_next(family, [0.0], 0, Draws(np.array([0.5]), np.empty(0))) == 1
    assert sample_next(family, [0.0], 0, Draws(np.array([0.1]), np.empty(0))) == 0


@pytest.mark.p1
def test_batch_step_matches_single_steps():
    kernel = build_kernel("finite2", SHIPPED_KERNEL)
    gen = np.random.default_rng(7)
    thetas = gen.normal(size=(32, 1))
    xs = gen.integers(0, 2, size=32)
    u = gen.random((32, 1))
    batch = sample_next(kernel, thetas, xs, Draws(u, np.empty((32, 0))))
    singles = [sample_next(kernel, thetas[i], int(xs[i]), Draws(u[i], np.empty(0))) for i in range(32)]
    assert batch.tolist() == singles


@pytest.mark.p1
def test_wrong_draw_count_is_rejected():
    kernel = _clipped_ar()
    with pytest.raises(ConfigurationError, match="draw.normal"):
        sample_next(kernel, [0.0], [0.0], Draws(np.empty(0), np.array([0.0, 1.0])))


@pytest.mark.p1
def test_nan_theta_is_rejected():
    kernel = build_kernel("finite2", SHIPPED_KERNEL)
    with pytest.raises(ConfigurationError, match="NaN"):
        sample_next(kernel, [math.nan], 0, Draws(np.array([0.5]), np.empty(0)))


@pytest.mark.p1
def test_rw_mh_chains_settle_on_the_gaussian_target(recorder):
    """Steps:
    1. Run 4000 independent random-walk MH chains for 300 steps at theta=1
    2. The target for kappa=2, shift=0.5 is N(0.5, 1/2)
    3. A KS test of the final states against that law does not reject
    """
    kernel = build_kernel("rw_mh", {"proposal_scale": 1.0, "kappa": 2.0, "shift": 0.5})
    gen = np.random.default_rng(17)
    n = 4000
    thetas = np.ones((n, 1))
    xs = np.zeros((n, 1))
    for _ in range(300):
        xs = sample_next(kernel, thetas, xs, Draws(gen.random((n, 1)), gen.standard_normal((n, 1))))
    result = stats.kstest(xs[:, 0], "norm", args=(0.5, math.sqrt(0.5)))
    recorder.metrics({"ks_statistic": result.statistic, "p_value": result.pvalue})
    assert result.pvalue > 1e-3, f"KS statistic {result.statistic}"


@pytest.mark.p1
@pytest.mark.parametrize(
    "name, params, theta, lower, upper",
    [
        ("proj_langevin", {"eta": 0.5, "lower": [-1.0, 0.0], "upper": [1.0, 2.0], "shift": 2.0}, [4.0], [-1.0, 0.0], [1.0, 2.0]),
        ("clipped_ar", {"rho": 0.9, "m_offset": 3.0, "sigma0": 4.0, "clip_bound": 2.5}, [1.0], [-2.5], [2.5]),
    ],
    ids=["proj_langevin", "clipped_ar"],
)
def test_bounded_kernels_never_leave_their_state_space(name, params, theta, lower, upper):
    """Steps:
    1. Drive 256 chains for 500 transitions with a drift that pushes against the bounds
    2. Every visited state stays inside the box, and the bounds are actually reached
    """
    kernel = build_kernel(name, params)
    gen = np.random.default_rng(23)
    n = 256
    thetas = np.tile(theta, (n, 1))
    xs = np.zeros((n, kernel.state_dim))
    hit = False
    for _ in range(500):
        xs = sample_next(kernel, thetas, xs, Draws(gen.random((n, kernel.n_uniform)), gen.standard_normal((n, kernel.n_normal))))
        assert np.all(xs >= lower) and np.all(xs <= upper)
        hit = hit or bool(np.any(xs == upper))
    assert hit


# --- P0: finite chains --------------------------------------------------------


@pytest.mark.p0
def test_stationary_distribution_of_two_state_chain():
    pi = stationary_distribution([[0.9, 0.1], [0.2, 0.8]])
    assert np.allclose(pi, [2 / 3, 1 / 3], atol=1e-12), f"pi={pi}"


@pytest.mark.p0
@pytest.mark.parametrize("P", [np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])], ids=["reducible", "periodic"])
def test_stationary_distribution_rejects_non_ergodic(P):
    with pytest.raises(ErgodicityError):
        stationary_distribution(P)


@pytest.mark.p1
def test_stationary_distribution_rejects_bad_rows():
    with pytest.raises(ConfigurationError, match="deviate"):
        stationary_distribution([[0.9, 0.2], [0.2, 0.8]])


@pytest.mark.p0
def test_finite2_transition_matrix_matches_closed_form():
    """a(1) = 0.5 + 0.2 tanh(1), b(1) = 0.5 - 0.2 tanh(1) for the default family."""
    P = transition_matrix(finite2_family(), [1.0])
    a = 0.5 + 0.2 * math.tanh(1.0)
    b = 0.5 - 0.2 * math.tanh(1.0)
    assert np.allclose(P, [[1 - a, a], [b, 1 - b]], atol=1e-15)
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.p1
def test_finite2_rejects_probabilities_outside_unit_interval():
    with pytest.raises(ConfigurationError, match="leaves"):
        finite2_family(a0=0.9, ka=0.2)


@pytest.mark.p2
def test_state_metric_must_be_a_metric():
    bad = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
    with pytest.raises(ConfigurationError, match="triangle"):
        FiniteKernelFamily(3, lambda theta: np.full((3, 3), 1 / 3), state_metric=bad)


# --- P1: contraction and sensitivity diagnostics ---------------------------------


@pytest.mark.p1
def test_contraction_of_clipped_ar_is_one_minus_rho(recorder):
    """Synchronously coupled AR chains shrink their distance by exactly rho unless the clip bites."""
    diag = estimate_contraction(_clipped_ar(), [0.0], n_pairs=2000, rng_seed=3)
    recorder.metrics({"rho_hat": diag.rho_hat, "ci_width": diag.ci_width})
    assert abs(diag.rho_hat - 0.5) < 0.05, f"rho_hat={diag.rho_hat}"
    assert diag.contracting


@pytest.mark.p1
def test_contraction_of_identical_rows_is_one():
    family = FiniteKernelFamily(2, lambda theta: np.array([[0.4, 0.6], [0.4, 0.6]]))
    diag = estimate_contraction(family, [0.0], n_pairs=500, rng_seed=0)
    assert diag.rho_hat == 1.0


@pytest.mark.p1
def test_contraction_of_finite2_matches_common_uniform_coupling(recorder):
    """Under a common uniform the two rows disagree with probability |1 - a - b|; at theta=0 that is 0.3."""
    kernel = build_kernel("finite2", SHIPPED_KERNEL)
    diag = estimate_contraction(kernel, [0.0], n_pairs=4000, rng_seed=11)
    recorder.add("rho_hat", diag.rho_hat)
    assert abs(diag.rho_hat - 0.7) < 0.05, f"rho_hat={diag.rho_hat}"


@pytest.mark.p2
def test_contraction_needs_enough_pairs():
    with pytest.raises(ConfigurationError, match="n_pairs"):
        estimate_contraction(_clipped_ar(), [0.0], n_pairs=10, rng_seed=0)


@pytest.mark.p1
def test_sensitivity_of_mean_shift_is_one():
    kernel = _clipped_ar(m_slope=1.0)
    lp = estimate_sensitivity(kernel, [0.0], [0.0], [0.1], n_samples=4000)
    assert abs(lp - 1.0) < 1e-2, f"lp={lp}"


@pytest.mark.p1
def test_sensitivity_of_decision_independent_kernel_is_zero():
    assert estimate_sensitivity(_clipped_ar(), [0.0], [0.0], [0.5]) == 0.0
    control = build_kernel("finite2", {**SHIPPED_KERNEL, "ka": 0.0, "kb": 0.0})
    assert estimate_sensitivity(control, 0, [0.0], [0.5]) == 0.0


@pytest.mark.p1
def test_diagnose_finite2_reports_small_sensitivity(recorder):
    """Steps:
    1. Diagnose the shipped family at theta=0
    2. Check contraction is positive and sensitivity stays below 0.5 (|a'| + |b'| <= 0.3)
    """
    kernel = build_kernel("finite2", SHIPPED_KERNEL)
    diag = diagnose_kernel(kernel, [0.0], theta_prime=[0.5], n_pairs=2000, rng_seed=5)
    recorder.metrics({"rho_hat": diag.rho_hat, "lp_hat": diag.lp_hat})
    assert diag.contracting and diag.rho_hat > 0
    assert diag.lp_hat is not None and 0.0 <= diag.lp_hat <= 0.5
    assert diag.diameter == 1.0


@pytest.mark.p2
def test_sensitivity_requires_distinct_parameters():
    with pytest.raises(ConfigurationError, match="theta_prime"):
        estimate_sensitivity(_clipped_ar(), [0.0], [0.2], [0.2])
