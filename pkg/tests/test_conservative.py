import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casm import _rng
from casm.active_subspace import Domain, GradientSource
from casm.conservative import (
    BiasCalibration,
    CountingFunction,
    SignedDistanceSample,
    SignedDistanceTable,
    TailBoundConfig,
    ValidationSample,
    base_conservativeness,
    bias_for_mean,
    bootstrap_conservativeness,
    bootstrap_mean,
    build_table,
    calibrate,
    calibrate_bootstrap,
    calibrate_chernoff,
    chernoff_bound,
    empirical_conservativeness,
    sample_signed_distance,
    saturation_bias,
    unfeasibility_ratio,
)
from casm.errors import CalibrationError, NonFiniteError
from casm.pipeline import fit_constraint_model
from casm.problems import toy_constraint, toy_domain, toy_source, toy_value
from casm.surrogate import KernelConfig, fit_gpr

CAL_SEED = _rng.stream_seed(0, _rng.CALIBRATION)


def sample_of(values):
    return SignedDistanceSample(np.asarray(values, dtype=float), 0.0, 0)


@pytest.fixture(scope="module")
def toy_validation(toy_models):
    m = toy_models(0)
    return ValidationSample.draw(m.subspace, m.domain, toy_value, 2000, 99)


# --- table and sampling ------------------------------------------------------------


def test_table_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        SignedDistanceTable(np.zeros((2, 1)), np.array([[0.0], [np.nan]]))


def test_single_column_table(toy_models):
    m = toy_models(0)
    tab = SignedDistanceTable(m.table.y_k, m.table.f_ik[:, :1])
    s = sample_signed_distance(tab, m.surrogate, K=500, seed=3)
    mu = m.surrogate.predict_mean(tab.y_k)
    allowed = mu - tab.f_ik[:, 0]
    assert np.all(np.isin(s.values, allowed))


def test_constant_function_signed_distance_is_bias_times_multiplier():
    y = np.linspace(-1, 1, 6)[:, None]
    tab = SignedDistanceTable(y, np.full((6, 3), 2.5))
    m = fit_gpr(tab.training_set(), KernelConfig(50.0, 0.0))
    beta = 0.8
    s = sample_signed_distance(tab, m.with_bias(beta), K=200, seed=0)
    _, v = m.unbiased_and_weight(y)
    assert np.all(v >= 0)
    assert np.all(np.isin(np.round(s.values, 12), np.round(beta * v, 12)))
    assert np.all(s.values >= -1e-12)


def test_evaluation_budget_is_s_times_n():
    calls = []

    def counted(x):
        calls.append(1)
        return toy_constraint(x)

    m = fit_constraint_model(GradientSource.analytic(counted), toy_domain(), M=60, s=40, N=5, seed=4)
    # M gradient calls for the covariance, then s*N value calls for the table
    assert len(calls) == 60 + 40 * 5
    assert m.evaluations == 40 * 5
    calibrate_bootstrap(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=1)
    calibrate_chernoff(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=1)
    assert len(calls) == 60 + 40 * 5


def test_build_table_uses_n_calls_per_point(toy_models):
    m = toy_models(0)
    counter = CountingFunction(toy_value)
    table = build_table(m.subspace, m.domain, counter, m.training.y_tr[:10], 3, 0)
    assert counter.calls == 30 and table.f_ik.shape == (10, 3)


def test_sampling_is_deterministic(toy_models):
    m = toy_models(0)
    a = sample_signed_distance(m.table, m.surrogate, seed=5)
    b = sample_signed_distance(m.table, m.surrogate, seed=5)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.K == m.table.s * m.table.N


def test_empty_table_rejected(toy_models):
    m = toy_models(0)
    with pytest.raises(ValueError, match="empty"):
        sample_signed_distance(SignedDistanceTable(np.zeros((0, 1)), np.zeros((0, 3))), m.surrogate)
    with pytest.raises(ValueError, match="empty"):
        sample_signed_distance(SignedDistanceTable(m.table.y_k, np.zeros((m.table.s, 0))), m.surrogate)


def test_huge_bias_makes_every_draw_positive(toy_models, toy_validation):
    m = toy_models(0)
    beta = saturation_bias(m.surrogate, m.table.y_k, m.table.f_ik)
    s = sample_signed_distance(m.table, m.surrogate.with_bias(beta), seed=0)
    assert np.all(s.values > 0)


def test_zero_variation_interpolant_gives_zero_distances():
    y = np.linspace(-1, 1, 5)[:, None]
    tab = SignedDistanceTable(y, np.zeros((5, 4)))
    m = fit_gpr(tab.training_set(), KernelConfig(1.0, 0.0))
    np.testing.assert_array_equal(sample_signed_distance(tab, m, seed=0).values, 0.0)


def test_toy_base_conservativeness_is_above_forty_percent(toy_models):
    vals = [base_conservativeness(toy_models(k).table, toy_models(k).surrogate) for k in range(3)]
    assert all(0.4 <= v <= 0.55 for v in vals), vals


# --- bootstrap ------------------------------------------------------------------


def test_bootstrap_mean_constant():
    assert bootstrap_mean(sample_of([1.25] * 30), B=100) == 1.25


def test_bootstrap_mean_balanced_signs():
    vals = np.tile([-1.0, 1.0], 500)
    assert abs(bootstrap_mean(sample_of(vals), B=2000, seed=1)) <= 3 / np.sqrt(1000 * 2000) * 3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(10, 300))
def test_bootstrap_mean_near_plain_mean(seed, K):
    vals = np.random.default_rng(seed).standard_normal(K) * 2 + 1
    err = abs(bootstrap_mean(sample_of(vals), B=500, seed=seed) - vals.mean())
    assert err <= 3 * vals.std() / np.sqrt(K)


def test_bootstrap_conservativeness_extremes():
    assert bootstrap_conservativeness(sample_of(np.arange(1.0, 20.0))) == 1.0
    assert bootstrap_conservativeness(sample_of(-np.arange(1.0, 20.0))) == 0.0


def test_bootstrap_conservativeness_binomial():
    r = np.random.default_rng(17)
    signs = np.where(r.random(1000) < 0.7, 1.0, -1.0)
    p = bootstrap_conservativeness(sample_of(signs), B=2000, seed=2)
    assert abs(p - 0.7) <= 3 * np.sqrt(0.21 / 1000)


def test_bootstrap_rejects_zero_resamples():
    with pytest.raises(ValueError):
        bootstrap_mean(sample_of([1.0]), B=0)
    with pytest.raises(ValueError):
        bootstrap_conservativeness(sample_of([1.0]), B=0)


# --- Chernoff bound -------------------------------------------------------------------


def test_chernoff_all_inside_margin():
    vals = np.random.default_rng(0).uniform(-0.5, 0.5, 200)
    assert chernoff_bound(sample_of(vals), 1.0, 0.0) < 1e-6


def test_chernoff_with_outliers_is_positive_and_clamped():
    vals = np.concatenate([np.zeros(90), np.full(10, 5.0)])
    chi = chernoff_bound(sample_of(vals), 1.0, 0.0)
    assert 0 < chi <= 1
    assert chernoff_bound(sample_of(np.full(10, 5.0)), 1.0, 0.0) == 1.0


def test_chernoff_matches_direct_grid_minimum():
    r = np.random.default_rng(4)
    vals = r.standard_normal(300)
    cfg = TailBoundConfig()
    dev = np.abs(vals) - 1.5
    u = np.geomspace(cfg.u_min, cfg.u_max, 20_000)
    direct = min(1.0, np.min([np.mean(np.exp(ui * dev)) for ui in u]))
    assert chernoff_bound(sample_of(vals), 1.5, 0.0, cfg) == pytest.approx(direct, rel=1e-4)


def test_chernoff_large_u_does_not_overflow():
    cfg = TailBoundConfig(u_max=1e4)
    chi = chernoff_bound(sample_of([0.0, 100.0]), 1.0, 0.0, cfg)
    assert np.isfinite(chi) and 0 <= chi <= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1))
def test_chernoff_in_unit_interval_and_nonincreasing(seed, center):
    vals = np.random.default_rng(seed).standard_normal(50)
    eps = np.linspace(0.05, 4.0, 20)
    chi = np.array([chernoff_bound(sample_of(vals), e, center) for e in eps])
    assert np.all((chi >= 0) & (chi <= 1))
    assert np.all(np.diff(chi) <= 1e-12)


def test_chernoff_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        chernoff_bound(sample_of([1.0]), 0.0, 0.0)


def test_tail_config_validation():
    with pytest.raises(ValueError):
        TailBoundConfig(bootstrap_resamples=50)
    with pytest.raises(ValueError):
        TailBoundConfig(u_count=10)
    with pytest.raises(ValueError):
        TailBoundConfig(u_min=1.0, u_max=0.5)


# --- calibration --------------------------------------------------------------------


def test_chernoff_calibration_on_toy(toy_models, toy_validation):
    m = toy_models(0)
    cal = calibrate_chernoff(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=CAL_SEED)
    assert abs(cal.achieved_probability - 0.95) <= 0.01
    assert len(cal.trace) == cal.iterations
    assert 4 <= cal.iterations <= 10
    observed = empirical_conservativeness(m.surrogate.with_bias(cal.beta), m.subspace, m.domain, None, 0, 0, sample=toy_validation)
    assert observed >= 0.95


def test_bootstrap_calibration_on_toy(toy_models, toy_validation):
    m = toy_models(0)
    cal = calibrate_bootstrap(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=CAL_SEED)
    assert abs(cal.achieved_probability - 0.95) <= 0.01
    assert 1 <= cal.iterations <= 7
    observed = empirical_conservativeness(m.surrogate.with_bias(cal.beta), m.subspace, m.domain, None, 0, 0, sample=toy_validation)
    assert abs(observed - 0.95) <= 0.03


def test_calibration_is_reproducible(toy_models):
    m = toy_models(1)
    a = calibrate_chernoff(m.table, m.surrogate, 0.9, 0.01, 10.0, seed=7)
    b = calibrate_chernoff(m.table, m.surrogate, 0.9, 0.01, 10.0, seed=7)
    assert a.trace == b.trace and a.beta == b.beta


def test_bootstrap_below_base_level_errors(toy_models):
    m = toy_models(0)
    with pytest.raises(CalibrationError) as exc:
        calibrate_bootstrap(m.table, m.surrogate, 0.25, 0.01, 10.0, seed=CAL_SEED)
    assert exc.value.reason == "base_level"
    assert "base" in str(exc.value)


def test_small_beta_max_exhausts_bracket(toy_models):
    m = toy_models(0)
    with pytest.raises(CalibrationError) as exc:
        calibrate_chernoff(m.table, m.surrogate, 0.95, 0.01, 1e-3, seed=CAL_SEED)
    assert exc.value.reason == "beta_max"
    assert len(exc.value.trace) >= 1


@pytest.mark.parametrize(
    "args",
    [(0.0, 0.01, 10.0), (1.0, 0.01, 10.0), (0.9, 0.0, 10.0), (0.9, 0.01, 0.0)],
)
def test_calibration_input_validation(toy_models, args):
    m = toy_models(0)
    with pytest.raises(ValueError):
        calibrate_chernoff(m.table, m.surrogate, *args)


def test_unknown_method(toy_models):
    m = toy_models(0)
    with pytest.raises(ValueError):
        calibrate("markov", m.table, m.surrogate, 0.9, 0.01, 10.0)


def test_assumption_violation_is_reported(toy_models):
    m = toy_models(0)
    cal = calibrate_bootstrap(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=CAL_SEED)
    from casm.surrogate import check_assumption_rowsums

    if check_assumption_rowsums(m.surrogate).holds:
        assert cal.warnings == []
    else:
        assert any("row sums" in w for w in cal.warnings)


@pytest.mark.parametrize("tau", [0.5, 0.95])
def test_chernoff_bias_not_below_bootstrap_bias(toy_models, tau):
    m = toy_models(0)
    c = calibrate_chernoff(m.table, m.surrogate, tau, 0.01, 10.0, seed=CAL_SEED)
    b = calibrate_bootstrap(m.table, m.surrogate, tau, 0.01, 10.0, seed=CAL_SEED)
    assert c.beta >= b.beta


def test_calibration_json_round_trip(tmp_path, toy_models):
    m = toy_models(0)
    cal = calibrate_bootstrap(m.table, m.surrogate, 0.95, 0.01, 10.0, seed=CAL_SEED)
    cal.to_json(tmp_path / "cal.json")
    import json

    back = BiasCalibration.from_dict(json.loads((tmp_path / "cal.json").read_text()))
    assert back.beta == cal.beta and back.iterations == cal.iterations
    assert [tuple(t) for t in back.trace] == [tuple(t) for t in cal.trace]


# --- properties of psi ----------------------------------------------------------------


def test_empirical_psi_nondecreasing(toy_models, toy_validation):
    m = toy_models(0)
    betas = np.linspace(0, 10, 20)
    psi = [
        empirical_conservativeness(m.surrogate.with_bias(b), m.subspace, m.domain, None, 0, 0, sample=toy_validation)
        for b in betas
    ]
    assert np.all(np.diff(psi) >= -0.01)
    assert psi[-1] == 1.0


def test_saturation_bias_gives_full_conservativeness(toy_models, toy_validation):
    m = toy_models(0)
    beta = saturation_bias(m.surrogate, toy_validation.y, toy_validation.f)
    psi = empirical_conservativeness(m.surrogate.with_bias(beta), m.subspace, m.domain, None, 0, 0, sample=toy_validation)
    assert psi == 1.0


@pytest.mark.parametrize("eps", [0.01, 0.1])
def test_bias_for_mean_reaches_target(toy_models, eps):
    m = toy_models(0)
    beta = bias_for_mean(m.table, m.surrogate, eps)
    s = sample_signed_distance(m.table, m.surrogate.with_bias(beta), seed=11)
    se = s.values.std() / np.sqrt(s.K)
    assert bootstrap_mean(s, 2000, 12) >= eps - 2 * se


def test_exact_surrogate_with_bias_is_fully_conservative():
    dom = Domain.cube(2)
    y = np.linspace(-2, 2, 9)[:, None]
    from casm.active_subspace import ActiveSubspace
    from casm.surrogate import TrainingSet

    asub = ActiveSubspace(np.array([[1.0], [1.0]]) / np.sqrt(2), np.array([[1.0], [-1.0]]) / np.sqrt(2), np.array([1.0, 0.0]), 1)
    m = fit_gpr(TrainingSet(y, np.zeros(9)), KernelConfig(1.0, 0.0))

    def f(x):
        return float(m.predict_mean(asub.project(np.atleast_2d(x)))[0])

    assert empirical_conservativeness(m.with_bias(0.3), asub, dom, f, 300, 0) == 1.0


def test_unfeasibility_ratio_empty_feasible_set(toy_models):
    m = toy_models(0)
    rep = unfeasibility_ratio(m.surrogate.with_bias(1e3), m.subspace, m.domain, toy_value, 200, 0)
    assert rep.empty_feasible_set and np.isnan(rep.ratio)


def test_unfeasibility_ratio_counts(toy_models, toy_validation):
    m = toy_models(0)
    rep = unfeasibility_ratio(m.surrogate, m.subspace, m.domain, None, 0, 0, sample=toy_validation)
    mu = m.surrogate.predict_mean(toy_validation.y)
    feas = mu <= 0
    assert rep.feasible == feas.sum()
    assert rep.ratio == pytest.approx(np.mean(toy_validation.f[feas] >= 0))


def test_toy_constraint_vectorized_agrees():
    x = np.random.default_rng(0).uniform(-1, 1, (5, 2))
    np.testing.assert_allclose(toy_constraint(x)[0], [toy_value(p) for p in x])
