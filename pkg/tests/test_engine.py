import numpy as np
import pytest
from scipy.stats import norm

from data import ObservationTable, make_fold_plan
from engine import (LdmlConfig, fit_initial_ipw, fit_initial_lqte_weighting, fit_localized_nuisances, run_effect,
                    run_ldml, run_split, solve_moment, solve_step_equation)
from errors import (ConfigError, DegenerateTreatmentArm, EmptyPoints, EmptySubsample, KPrimeTooSmall,
                    MissingInstrument, NuTooSmall)
from estimands import (NuisanceValues, expectile_moment, ipw_moment, lqte_moment, quantile_complete,
                       quantile_cvar_moment, quantile_moment)
from learners import LearnerConfig


def oracle(fn):
    return LearnerConfig(kind="oracle", oracle_fn=fn)


FAST = {"propensity": {"kind": "logistic"}, "outcome": {"kind": "logistic"}}


# step solver ------------------------------------------------------------------


def test_step_solver_examples():
    assert solve_step_equation([(1, 1 / 3), (2, 1 / 3), (3, 1 / 3)], offset=-0.5) == 2.0
    assert solve_step_equation([(5, 1.0)], offset=-0.3) == 5.0
    assert solve_step_equation([(1, 0.5), (2, -0.6), (3, 0.4)], offset=-0.1, monotone=False) == 2.0


def test_step_solver_ties_go_to_smallest_point():
    # g = -0.25, 0.25, 0.25: every point ties
    assert solve_step_equation([(1, 0.25), (2, 0.5), (3, 0.0)], offset=-0.5) == 1.0
    assert solve_step_equation([(1, 0.25), (2, 0.5), (3, 0.0)], offset=-0.5, monotone=False) == 1.0


def test_step_solver_groups_repeated_outcomes():
    # both rows at y=2 jump together
    assert solve_step_equation([(2, 0.25), (1, 0.25), (2, 0.25), (3, 0.25)], offset=-0.75) == 2.0


def test_step_solver_rejects_empty_input():
    with pytest.raises(EmptyPoints):
        solve_step_equation([], offset=0.0)


def _brute_force(points, offset):
    ys = np.unique(points[:, 0])
    values = [abs(offset + points[points[:, 0] <= y, 1].sum()) for y in ys]
    return float(ys[int(np.argmin(values))])


def test_binary_search_matches_scan_on_monotone_instances():
    gen = np.random.default_rng(11)
    for _ in range(100):
        m = int(gen.integers(1, 201))
        # dyadic weights keep every prefix sum exact
        ys = gen.integers(0, 50, m).astype(float)
        ws = gen.integers(0, 8, m) / 64.0
        points = np.column_stack([ys, ws])
        offset = -gen.integers(0, 8 * m + 1) / 64.0
        binary = solve_step_equation(points, offset, monotone=True)
        assert binary == solve_step_equation(points, offset, monotone=False)
        assert binary == _brute_force(points, offset)


def test_mixed_sign_scan_matches_brute_force():
    gen = np.random.default_rng(12)
    for _ in range(100):
        m = int(gen.integers(1, 201))
        points = np.column_stack([gen.integers(0, 50, m).astype(float), gen.integers(-8, 9, m) / 64.0])
        offset = gen.integers(-64, 65) / 64.0
        assert solve_step_equation(points, offset, monotone=False) == _brute_force(points, offset)


def test_cvar_closed_form_on_three_points():
    table = ObservationTable(covariates=np.zeros((3, 1)), treatment=[1, 1, 1], outcome=[1.0, 2.0, 3.0])
    mm = quantile_cvar_moment(2 / 3)
    theta, residual = solve_moment(mm, table, NuisanceValues.constant(3, eta1=[0.0, 0.0], eta2=[1.0]))
    np.testing.assert_allclose(theta, [2.0, 3.0], atol=1e-12)
    assert residual <= 1e-12


def test_ipw_quantile_on_three_points():
    table = ObservationTable(covariates=np.zeros((3, 1)), treatment=[1, 1, 1], outcome=[3.0, 1.0, 2.0])
    theta, _ = solve_moment(ipw_moment(quantile_complete(0.5)), table, NuisanceValues.constant(3, eta2=[1.0]))
    assert theta[0] == 2.0


# initial estimates ------------------------------------------------------------


def test_initial_ipw_on_three_treated_rows():
    plan = make_fold_plan(6, 4, 2, seed=3)
    rows = plan.init_rows(0)
    assert rows.shape[0] == 3
    Y = np.full(6, 100.0)
    Y[rows] = [1.0, 2.0, 3.0]
    table = ObservationTable(covariates=np.zeros((6, 1)), treatment=np.ones(6), outcome=Y)
    theta = fit_initial_ipw(table, plan, 0, oracle(lambda r: 1.0), ipw_moment(quantile_complete(0.5)))
    assert theta[0] == 2.0


def test_initial_ipw_needs_two_folds(linear_table):
    plan = make_fold_plan(linear_table.n, 4, 1, seed=0)
    with pytest.raises(KPrimeTooSmall):
        fit_initial_ipw(linear_table, plan, 0, LearnerConfig(kind="logistic"), ipw_moment(quantile_complete(0.5)))


def test_initial_ipw_single_arm(linear_table):
    table = ObservationTable(covariates=linear_table.covariates, treatment=np.ones(linear_table.n),
                             outcome=linear_table.outcome)
    plan = make_fold_plan(table.n, 5, 2, seed=0)
    with pytest.raises(DegenerateTreatmentArm):
        fit_initial_ipw(table, plan, 0, LearnerConfig(kind="logistic"), ipw_moment(quantile_complete(0.5)))


def test_lqte_weighting_reduces_to_ipw_when_instrument_is_treatment(instrument_table):
    plan = make_fold_plan(instrument_table.n, 5, 2, seed=4)
    half = oracle(lambda r: 0.5)
    for k in (0, 3):
        local = fit_initial_lqte_weighting(instrument_table, plan, k, half, 0.4, nu=1.0)
        ipw = fit_initial_ipw(instrument_table, plan, k, half, ipw_moment(quantile_complete(0.4)))
        assert local[0] == ipw[0]


def test_lqte_weighting_guards(instrument_table, linear_table):
    plan = make_fold_plan(instrument_table.n, 5, 2, seed=4)
    with pytest.raises(NuTooSmall):
        fit_initial_lqte_weighting(instrument_table, plan, 0, LearnerConfig(kind="logistic"), 0.5, nu=0.001)
    with pytest.raises(MissingInstrument):
        fit_initial_lqte_weighting(linear_table, plan, 0, LearnerConfig(kind="logistic"), 0.5, nu=1.0)


# localized nuisances ----------------------------------------------------------


def test_oracle_nuisances_pass_through(linear_table):
    plan = make_fold_plan(linear_table.n, 5, 2, seed=1)
    config = LdmlConfig(learners={"cdf": oracle(lambda r: norm.cdf(0.5 - r[0])),
                                  "propensity": oracle(lambda r: 0.3 + 0.4 * r[0])})
    state = fit_localized_nuisances(linear_table, plan, np.full((5, 1), 0.5), quantile_moment(0.5), config)
    x = linear_table.covariates[:, 0]
    np.testing.assert_allclose(state.nuisances.eta1[:, 0], norm.cdf(0.5 - x))
    np.testing.assert_allclose(state.nuisances.eta2[:, 0], 0.3 + 0.4 * x)


def test_constant_cdf_learner_is_treated_share(linear_table):
    plan = make_fold_plan(linear_table.n, 5, 2, seed=1)
    theta_init = np.array([[-0.5], [0.0], [0.2], [0.4], [1.0]])
    config = LdmlConfig(learners={"cdf": {"kind": "constant", "clip": None}, "propensity": {"kind": "logistic"}})
    state = fit_localized_nuisances(linear_table, plan, theta_init, quantile_moment(0.5), config)
    treated = linear_table.treatment == 1
    for k in range(5):
        rows = plan.nuisance_rows(k)
        rows = rows[treated[rows]]
        expected = np.mean(linear_table.outcome[rows] <= theta_init[k, 0])
        np.testing.assert_allclose(state.fold_nuisances(k).eta1[:, 0], expected)


def test_localization_keeps_initial_and_nuisance_rows_apart(linear_table):
    config = LdmlConfig(splits=1, seed=5, learners=FAST)
    report = run_ldml(linear_table, quantile_moment(0.5), config)
    state = report.splits[0].state
    for k in range(config.K):
        init = set(state.provenance["init"][k].tolist())
        eta1 = set(state.provenance["eta1"][k]["cdf"].tolist())
        own = set(state.plan.fold_rows(k).tolist())
        assert not init & eta1
        assert not own & (init | eta1)
        assert set(state.provenance["eta2"][k]["propensity"].tolist()) == set(range(linear_table.n)) - own


def test_no_treated_rows_for_localized_fit():
    n = 50
    plan = make_fold_plan(n, 5, 2, seed=1)
    T = np.zeros(n)
    T[plan.init_rows(0)] = 1
    table = ObservationTable(covariates=np.arange(n, dtype=float)[:, None], treatment=T,
                             outcome=np.linspace(0, 1, n))
    with pytest.raises(EmptySubsample):
        fit_localized_nuisances(table, plan, np.zeros((5, 1)), quantile_moment(0.5), LdmlConfig(learners=FAST))


def test_weight_normalization_per_fold(linear_table):
    plan = make_fold_plan(linear_table.n, 5, 2, seed=2)
    config = LdmlConfig(normalize_weights=True, learners=FAST)
    state = fit_localized_nuisances(linear_table, plan, np.zeros((5, 1)), quantile_moment(0.5), config)
    treated = (linear_table.treatment == 1).astype(float)
    for k in range(5):
        rows = plan.fold_rows(k)
        assert np.mean(treated[rows] / state.nuisances.eta2[rows, 0]) == pytest.approx(1.0, abs=1e-12)


# full runs --------------------------------------------------------------------


def test_oracle_equivalence(linear_table):
    gamma = 0.5
    config = LdmlConfig(splits=1, theta_init_override=0.5,
                        learners={"cdf": oracle(lambda r: norm.cdf(0.5 - r[0])),
                                  "propensity": oracle(lambda r: 0.3 + 0.4 * r[0])})
    report = run_ldml(linear_table, quantile_moment(gamma), config)

    x = linear_table.covariates[:, 0]
    T, Y = linear_table.treatment, linear_table.outcome
    eta1, pi = norm.cdf(0.5 - x), 0.3 + 0.4 * x
    candidates = np.unique(Y[T == 1])
    values = [abs(np.mean(T * ((Y <= c) - eta1) / pi + eta1 - gamma)) for c in candidates]
    assert report.theta[0] == candidates[int(np.argmin(values))]


def test_unit_propensity_gives_empirical_quantile(linear_table):
    table = ObservationTable(covariates=linear_table.covariates, treatment=np.ones(linear_table.n),
                             outcome=linear_table.outcome)
    config = LdmlConfig(splits=1, learners={"propensity": {"kind": "constant", "clip": None},
                                            "cdf": {"kind": "constant"}})
    report = run_ldml(table, quantile_moment(0.3), config)
    assert report.theta[0] == np.sort(table.outcome)[299]


def test_residual_is_no_worse_than_best_candidate(linear_table):
    report = run_ldml(linear_table, quantile_moment(0.25), LdmlConfig(splits=2, learners=FAST))
    for split in report.splits:
        state = split.state
        mm = quantile_moment(0.25)
        weights, offset = mm.step_terms(linear_table, state.nuisances)
        ys = np.unique(linear_table.outcome[weights != 0])
        best = min(abs(offset + weights[linear_table.outcome <= y].sum()) for y in ys)
        assert abs(mm.mean_psi(linear_table, split.theta, state.nuisances)[0]) <= best + 1e-12


def test_expectile_half_matches_aipw_mean(rng):
    for _ in range(20):
        n = 500
        x = rng.uniform(size=n)
        T = (rng.uniform(size=n) < 0.3 + 0.4 * x).astype(int)
        Y = 2 * x + rng.standard_normal(n)
        table = ObservationTable(covariates=x[:, None], treatment=T, outcome=Y)
        config = LdmlConfig(splits=1, seed=int(rng.integers(1 << 30)),
                            learners={"propensity": {"kind": "logistic"}, "outcome": {"kind": "ridge"},
                                      "regression": {"kind": "ridge"}})
        report = run_ldml(table, expectile_moment(0.5), config)
        nuis = report.splits[0].state.nuisances
        pi, mu = nuis.eta2[:, 0], nuis.aux[:, 0]
        aipw = np.mean(T * (Y - mu) / pi + mu)
        assert abs(report.theta[0] - aipw) <= 1e-10


def test_quantile_cvar_run(linear_table):
    report = run_ldml(linear_table, quantile_cvar_moment(0.75),
                      LdmlConfig(splits=1, learners={**FAST, "excess": {"kind": "ridge"}}))
    assert report.theta.shape == (2,)
    assert report.theta[1] > report.theta[0]
    assert report.jacobian[1, 1] == -1.0
    assert np.all(report.stderr > 0)


def test_ldml1_close_to_ldml2(linear_table):
    one = run_ldml(linear_table, quantile_moment(0.5), LdmlConfig(variant="ldml1", splits=1, learners=FAST))
    two = run_ldml(linear_table, quantile_moment(0.5), LdmlConfig(variant="ldml2", splits=1, learners=FAST))
    assert abs(one.theta[0] - two.theta[0]) < 0.3


def test_run_is_reproducible_across_thread_counts(linear_table):
    base = dict(splits=3, seed=17, learners=FAST)
    serial = run_ldml(linear_table, quantile_moment(0.5), LdmlConfig(threads=1, **base))
    again = run_ldml(linear_table, quantile_moment(0.5), LdmlConfig(threads=1, **base))
    threaded = run_ldml(linear_table, quantile_moment(0.5), LdmlConfig(threads=3, **base))
    for other in (again, threaded):
        np.testing.assert_array_equal(serial.theta, other.theta)
        np.testing.assert_array_equal(serial.sigma, other.sigma)
        assert [s.seed for s in serial.splits] == [s.seed for s in other.splits]


def test_splits_use_distinct_plans(linear_table):
    config = LdmlConfig(splits=2, learners=FAST)
    a = run_split(linear_table, quantile_moment(0.5), config, 0)
    b = run_split(linear_table, quantile_moment(0.5), config, 1)
    assert not a.plan.same_as(b.plan)


def test_effect_shares_propensities(linear_table):
    config = LdmlConfig(splits=1, learners=FAST)
    treated, control, effect = run_effect(linear_table, quantile_moment(0.5, 1), quantile_moment(0.5, 0), config)
    assert treated.splits[0].propensity_fingerprint == control.splits[0].propensity_fingerprint
    assert effect.theta[0] == pytest.approx(treated.theta[0] - control.theta[0])
    assert effect.estimand == "quantile_effect"
    assert effect.stderr[0] > 0


@pytest.mark.parametrize("rule", ["median", "mean", "trimmed_mean"])
def test_effect_is_difference_of_aggregated_arms(linear_table, rule):
    for seed in range(4):
        config = LdmlConfig(splits=3, aggregate=rule, seed=seed, learners=FAST)
        treated, control, effect = run_effect(linear_table, quantile_moment(0.5, 1), quantile_moment(0.5, 0),
                                              config)
        np.testing.assert_allclose(effect.theta, treated.theta - control.theta, rtol=0, atol=1e-12)
        assert effect.aggregate == rule
        assert effect.stderr[0] > 0


def test_lqte_run_with_full_compliance(instrument_table):
    config = LdmlConfig(splits=1, learners={"outcome": {"kind": "logistic"}})
    report = run_ldml(instrument_table, lqte_moment(0.5), config)
    split = report.splits[0]
    assert split.nu_hat > 0.9
    assert np.isfinite(report.theta[0]) and report.stderr[0] > 0


def test_lqte_without_instrument(linear_table):
    with pytest.raises(MissingInstrument):
        run_ldml(linear_table, lqte_moment(0.5), LdmlConfig(splits=1))


@pytest.mark.parametrize("kwargs", [
    {"K": 2}, {"K": 5, "Kprime": 4}, {"variant": "ldml3"}, {"aggregate": "mode"}, {"splits": 0},
    {"trim": 0.5}, {"bandwidth": 0.0}, {"threads": 0}, {"learners": {"outcome": {"kind": "forest"}}},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LdmlConfig(**kwargs)
