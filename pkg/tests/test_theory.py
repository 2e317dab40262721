import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from app.core.errors import ParameterError
from app.services.reports import KIND_ORDER, EstimatorKind, EstimatorMoments
from app.services.sem_dgp import CanonicalParams, DgpParams, monte_carlo
from app.services.theory import (
    TRADEOFF_COLUMNS,
    bias_generalized,
    core_variances,
    derive_structure,
    mse_generalized,
    reliability_convergence_check,
    reliability_scalar,
    tradeoff_grid,
    variance_canonical,
    variance_generalized,
    variance_tradeoff_conditions,
)
from tests.conftest import canonical, random_dgp
from tests.strategies import canonical_params, dgp_params, group_sizes


def latent_only(t_pre: int, beta: float = 1.0, sigma_e2: float = 1.0) -> DgpParams:
    """q = 1, p = 0, constant latent coefficient in every period."""
    return DgpParams(
        n_units=200,
        p_treated=0.5,
        t_pre=t_pre,
        beta0=[0.0] * (t_pre + 1),
        beta_theta=[[beta]] * (t_pre + 1),
        beta_x=[[]] * (t_pre + 1),
        mu_theta_by_group=[[0.0], [0.0]],
        mu_x_by_group=[[], []],
        sigma_theta_theta=[[1.0]],
        sigma_xx=[],
        sigma_theta_x=[[]],
        sigma_e2=sigma_e2,
    )


def test_canonical_variances_without_time_variation():
    v_did, v_didx, _ = variance_canonical(canonical(d_theta=0.0, d_x=0.0), 100, 100)
    assert v_did == pytest.approx(0.04)
    assert v_didx == pytest.approx(0.04)


def test_canonical_variances_worked_example():
    v_did, v_didx, _ = variance_canonical(canonical(), 100, 100)
    assert v_did == pytest.approx(0.0468)
    assert v_didx == pytest.approx(0.0450)


def test_canonical_preoutcome_matching_variance():
    params = CanonicalParams(beta_theta=(1.0, 1.0))
    _, v_didx, v_didxy = variance_canonical(params, 100, 100)
    assert v_didxy == pytest.approx(0.03)
    assert v_didx == pytest.approx(0.04)
    assert reliability_scalar(params.to_dgp()) == pytest.approx(0.5)


def test_degenerate_correlation():
    with pytest.raises(ParameterError, match="degenerate correlation"):
        variance_canonical(canonical(rho=1.0), 100, 100)


@settings(max_examples=200, deadline=None)
@given(params=canonical_params(max_abs_rho=0.9), sizes=group_sizes())
def test_generalized_reduces_to_canonical(params, sizes):
    n1, n0 = sizes
    expected = variance_canonical(params, n1, n0)
    got = variance_generalized(params.to_dgp(), n1, n0)
    for kind, value in zip(KIND_ORDER, expected):
        assert got[kind].var_full == pytest.approx(value, rel=1e-11, abs=1e-15)


@pytest.mark.slow
@settings(max_examples=10_000, deadline=None)
@given(params=canonical_params(), sizes=group_sizes())
def test_preoutcome_matching_never_raises_variance(params, sizes):
    _, v_didx, v_didxy = variance_canonical(params, *sizes)
    assert v_didxy <= v_didx * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(params=dgp_params(q=1, p=st.integers(0, 3), t_pre=st.integers(1, 4)))
def test_single_latent_matrix_forms_match_scalar_forms(params):
    s = derive_structure(params)
    r = reliability_scalar(params)
    b_post = float(s.beta_theta_post[0])
    s_tilde = float(s.sigma_tilde[0, 0])
    assert s.r_matrix[0, 0] == pytest.approx(r, rel=1e-12, abs=1e-15)
    core = core_variances(params, s)[EstimatorKind.matched_x_y]
    assert core == pytest.approx(b_post ** 2 * (1 - r) * s_tilde + params.sigma_e2, rel=1e-12)
    bias = bias_generalized(params, s)[EstimatorKind.matched_x_y]
    assert bias == pytest.approx(b_post * (1 - r) * float(s.delta_tilde[0]), rel=1e-12, abs=1e-13)


def test_no_covariate_channel_gives_equal_cores():
    params = canonical(d_x=0.0, rho=0.0).to_dgp()
    cores = core_variances(params)
    assert cores[EstimatorKind.classic_did] - cores[EstimatorKind.matched_x] == pytest.approx(0.0, abs=1e-15)


def test_biases_vanish_without_imbalance():
    biases = bias_generalized(canonical().to_dgp())
    assert all(v == 0.0 for v in biases.values())


def test_bias_worked_example():
    params = canonical(mu_theta=(0.0, 1.0), mu_x=(0.0, 0.5)).to_dgp()
    biases = bias_generalized(params)
    assert biases[EstimatorKind.classic_did] == pytest.approx(0.65)
    assert biases[EstimatorKind.matched_x] == pytest.approx(0.5)


def test_preoutcome_matching_bias_shrinks_by_reliability():
    params = CanonicalParams(beta_theta=(1.0, 1.0), mu_theta=(0.0, 1.0)).to_dgp()
    assert bias_generalized(params)[EstimatorKind.matched_x_y] == pytest.approx(0.5)


def test_mse_composition():
    params = CanonicalParams(beta_theta=(1.0, 1.0), mu_theta=(0.0, 1.0)).to_dgp()
    report = mse_generalized(params, 100, 100)
    xy = report.estimators[EstimatorKind.matched_x_y]
    assert xy.var_full == pytest.approx(0.03)
    assert xy.mse == pytest.approx(0.28)
    assert report.reliability_scalar == pytest.approx(0.5)
    assert not report.outside_assumptions


def test_mse_equals_variance_without_bias():
    report = mse_generalized(canonical().to_dgp(), 100, 100)
    for m in report.estimators.values():
        assert m.mse == m.var_full


def test_compose_arithmetic():
    m = EstimatorMoments.compose(bias=0.5, var_core=1.5, size_factor=0.02)
    assert m.mse == pytest.approx(0.28)


def test_mse_flags_matched_count_below_n1():
    report = mse_generalized(canonical().to_dgp(), 100, 200, n_matched=80)
    assert report.outside_assumptions
    assert report.estimators[EstimatorKind.matched_x].size_factor == pytest.approx(1 / 100 + 1 / 80)


def test_singular_covariate_covariance():
    params = canonical().to_dgp().model_copy(update={"sigma_xx": [[0.0]], "sigma_theta_x": [[0.0]]})
    with pytest.raises(ParameterError):
        variance_generalized(params, 100, 100)


def test_mse_validates_before_linear_algebra():
    params = canonical().to_dgp().model_copy(update={"sigma_xx": [[-1.0]]})
    with pytest.raises(ParameterError, match="sigma_xx not positive definite"):
        mse_generalized(params, 100, 100)


def test_scalar_reliability_examples():
    assert reliability_scalar(latent_only(2)) == pytest.approx(2 / 3)
    assert reliability_scalar(latent_only(1, sigma_e2=1e9)) == pytest.approx(0.0, abs=1e-8)


def test_scalar_reliability_canonical_reduction():
    params = CanonicalParams(beta_theta=(0.7, 1.0), rho=0.4, sigma_theta=1.3, sigma_e2=0.8)
    cond = 1.3 ** 2 * (1 - 0.4 ** 2)
    expected = 0.49 * cond / (0.49 * cond + 0.8)
    assert reliability_scalar(params.to_dgp()) == pytest.approx(expected)


def test_scalar_reliability_needs_single_latent(rng):
    with pytest.raises(ParameterError, match="scalar reliability undefined"):
        reliability_scalar(random_dgp(rng, q=2, p=1, t_pre=2))


def test_reliability_convergence_examples():
    report = reliability_convergence_check(latent_only, [1, 9, 99])
    assert [pt.distance for pt in report.points] == pytest.approx([0.5, 0.1, 0.01])
    assert report.monotone_decreasing
    assert report.below_threshold


def test_reliability_convergence_long_horizons():
    report = reliability_convergence_check(latent_only, [10, 100, 1000])
    assert report.monotone_decreasing


def test_reliability_convergence_zero_signal_flagged():
    report = reliability_convergence_check(lambda t: latent_only(t, beta=0.0), [1, 10])
    assert all(pt.distance == pytest.approx(1.0) for pt in report.points)
    assert all(pt.assumption_violated for pt in report.points)
    assert not report.below_threshold


def test_tradeoff_equal_samples_favours_matching():
    res = variance_tradeoff_conditions(canonical(), 100, 100)
    assert res.match_x_better
    assert res.rhs == pytest.approx(0.0)


def test_tradeoff_large_control_pool_favours_classic():
    res = variance_tradeoff_conditions(canonical(d_x=0.05), 100, 10_000)
    assert not res.match_x_better


@settings(max_examples=1000, deadline=None)
@given(params=canonical_params(), sizes=group_sizes(max_ratio=100))
def test_tradeoff_agrees_with_variance_ordering(params, sizes):
    n1, n0 = sizes
    res = variance_tradeoff_conditions(params, n1, n0)
    v_did, v_didx, _ = variance_canonical(params, n1, n0)
    gap = v_did - v_didx
    band = 1e-10 * (v_did + v_didx)
    assert res.lhs - res.rhs == pytest.approx(gap, abs=band)
    if abs(gap) > band:
        assert res.match_x_better == (gap > 0)


def test_tradeoff_grid_layout():
    frame = tradeoff_grid(canonical(), [-0.5, 0.0, 0.5], [1.0, 2.5], 10)
    assert list(frame.columns) == list(TRADEOFF_COLUMNS)
    assert len(frame) == 6
    row = frame[(frame["rho"] == 0.0) & (frame["n0_over_n1"] == 1.0)].iloc[0]
    assert bool(row["match_x_better"])
    assert row["v_did"] == pytest.approx(variance_canonical(canonical(), 10, 10)[0])


def test_posterior_covariance_matches_information_form(rng):
    params = random_dgp(rng, q=2, p=2, t_pre=3)
    s = derive_structure(params)
    info = np.linalg.inv(s.sigma_tilde) + s.b_theta.T @ s.b_theta / params.sigma_e2
    assert np.allclose(s.posterior_cov, np.linalg.inv(info), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(params=dgp_params(q=3, p=1, t_pre=4))
def test_reliability_eigenvalues_in_unit_interval(params):
    eig = derive_structure(params).reliability_eigenvalues()
    assert eig.min() >= -1e-12
    assert eig.max() < 1.0


def rotate(params: DgpParams, r: np.ndarray) -> DgpParams:
    a = params.arrays()
    return DgpParams.from_arrays(
        n_units=params.n_units,
        p_treated=params.p_treated,
        beta0=a["beta0"],
        beta_theta=a["beta_theta"] @ r.T,
        beta_x=a["beta_x"],
        mu_theta=a["mu_theta"] @ r.T,
        mu_x=a["mu_x"],
        sigma_theta_theta=r @ a["s_tt"] @ r.T,
        sigma_xx=a["s_xx"],
        sigma_theta_x=r @ a["s_tx"],
        sigma_e2=params.sigma_e2,
    )


def test_moments_invariant_under_latent_rotation(rng):
    params = random_dgp(rng, q=3, p=2, t_pre=2)
    r = special_ortho_group.rvs(3, random_state=7)
    a = mse_generalized(params, 150, 250)
    b = mse_generalized(rotate(params, r), 150, 250)
    for kind in a.estimators:
        for field in ("bias", "var_full", "mse"):
            assert getattr(b.estimators[kind], field) == pytest.approx(getattr(a.estimators[kind], field), abs=1e-10)


@pytest.mark.slow
def test_generalized_variance_matches_monte_carlo(rng):
    params = random_dgp(rng, q=2, p=1, t_pre=3, n_units=1000, n_treated=500)
    mc = monte_carlo(params, EstimatorKind.classic_did, reps=10_000, seed=4)
    theory = variance_generalized(params, 500, 500)[EstimatorKind.classic_did].var_full
    assert mc.variance == pytest.approx(theory, rel=0.05)


@pytest.mark.slow
def test_matched_x_variance_matches_monte_carlo():
    mc = monte_carlo(canonical().to_dgp(), EstimatorKind.matched_x, reps=10_000, seed=5)
    assert mc.variance == pytest.approx(0.0450, rel=0.05)
