import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histocluster import survival
from histocluster.synthetic import planted_cohort
from oracles import breslow_loglik, cox_brute, km_rational, score_stat_untied


def untied_cohort(rng, n, p):
    while True:
        time = rng.permutation(n) + 1.0 + rng.random(n) * 0.5
        event = rng.random(n) < 0.7
        x = (rng.random((n, p)) < 0.5).astype(float)
        if event.sum() < 3:
            continue
        try:
            survival.check_identifiable(x)
        except survival.NonIdentifiableError:
            continue
        return time, event, x


# ---------------------------------------------------------------------------
# presence covariates


def test_binarize_presence():
    rows = [("a", 0), ("a", 13), ("a", 13), ("b", 2)]
    with pytest.warns(UserWarning, match="no clustered tiles"):
        x = survival.binarize_presence(rows, ["a", "b", "c"], 24)
    assert np.nonzero(x[0])[0].tolist() == [0, 13]
    assert not x[2].any()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        np.testing.assert_array_equal(survival.binarize_presence(rows + rows, ["a", "b", "c"], 24), x)
    with pytest.raises(survival.SurvivalDataError):
        survival.binarize_presence([("zz", 1)], ["a"], 24)


def test_read_cohort(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("slide_id,time_months,event\na,3.5,1\nb,10,0\n")
    c = survival.read_cohort(p)
    assert c.slide_ids == ["a", "b"] and c.time.tolist() == [3.5, 10] and c.event.tolist() == [True, False]


# ---------------------------------------------------------------------------
# Cox


def test_cox_errors():
    t = np.arange(1, 11.0)
    e = np.ones(10, bool)
    with pytest.raises(survival.NonIdentifiableError):
        survival.cox_fit(t, e, np.zeros((10, 2)))
    col = (np.arange(10) % 2).astype(float)
    with pytest.raises(survival.NonIdentifiableError):
        survival.cox_fit(t, e, np.column_stack([col, col]))
    with pytest.raises(survival.NoEventsError):
        survival.cox_fit(t, np.zeros(10, bool), col)


def test_cox_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(6):
        time, event, x = untied_cohort(rng, int(rng.integers(12, 31)), int(rng.integers(1, 4)))
        with warnings.catch_warnings():
            warnings.simplefilter("error", survival.SeparationWarning)
            try:
                fit = survival.cox_fit(time, event, x)
            except survival.SeparationWarning:
                continue
        np.testing.assert_allclose(fit.coef, cox_brute(time, event, x), atol=1e-4)


def test_loglik_matches_definition_and_efron_equals_breslow_without_ties():
    rng = np.random.default_rng(2)
    time, event, x = untied_cohort(rng, 20, 2)
    b = np.array([0.3, -0.7])
    ref = breslow_loglik(b, time, event, x)
    for ties in ("efron", "breslow"):
        assert survival.cox_loglik(b, time, event, x, ties)[0] == pytest.approx(ref, abs=1e-10)


def test_efron_tie_correction_hand_value():
    # two tied events among three at risk, x = (1, 0, 0), b = ln 2
    t = np.array([1.0, 1.0, 2.0])
    e = np.array([True, True, True])
    x = np.array([[1.0], [0.0], [0.0]])
    b = np.array([np.log(2)])
    ll_e = survival.cox_loglik(b, t, e, x, "efron")[0]
    ll_b = survival.cox_loglik(b, t, e, x, "breslow")[0]
    # Efron: log 2 - log 4 - log(4 - 3/2) - log 1
    assert ll_e == pytest.approx(np.log(2) - np.log(4) - np.log(2.5))
    assert ll_b == pytest.approx(np.log(2) - 2 * np.log(4))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_score_and_information_are_derivatives(seed, b0, b1):
    rng = np.random.default_rng(seed)
    time = rng.integers(1, 8, 25).astype(float)          # plenty of ties
    event = rng.random(25) < 0.7
    x = rng.random((25, 2)) < 0.5
    b = np.array([b0, b1])
    for ties in ("efron", "breslow"):
        ll, u, info = survival.cox_loglik(b, time, event, x, ties)
        eps = 1e-6
        for j in range(2):
            d = np.zeros(2)
            d[j] = eps
            lp, up, _ = survival.cox_loglik(b + d, time, event, x, ties)
            lm, um, _ = survival.cox_loglik(b - d, time, event, x, ties)
            assert u[j] == pytest.approx((lp - lm) / (2 * eps), abs=1e-5)
            np.testing.assert_allclose(-info[:, j], (up - um) / (2 * eps), atol=1e-5)


def test_newton_never_decreases_loglik():
    time, event, x = untied_cohort(np.random.default_rng(5), 30, 3)
    fit = survival.cox_fit(time, event, x)
    assert fit.loglik >= fit.loglik0
    assert fit.converged


def test_relabel_inverts_hazard():
    rng = np.random.default_rng(8)
    time, event, x = untied_cohort(rng, 30, 1)
    a = survival.cox_fit(time, event, x)
    b = survival.cox_fit(time, event, 1 - x)
    assert b.coef[0] == pytest.approx(-a.coef[0], abs=1e-8)
    assert b.hr[0] == pytest.approx(1 / a.hr[0])
    assert b.ci_low[0] == pytest.approx(1 / a.ci_high[0])
    assert b.ci_high[0] == pytest.approx(1 / a.ci_low[0])


def test_ci_and_wald_formulae():
    time, event, x = untied_cohort(np.random.default_rng(9), 30, 2)
    fit = survival.cox_fit(time, event, x)
    np.testing.assert_allclose(fit.ci_low, np.exp(fit.coef - 1.96 * fit.se))
    np.testing.assert_allclose(fit.se, np.sqrt(np.diag(fit.cov)))
    assert fit.wald.stat == pytest.approx(float(fit.coef @ np.linalg.inv(fit.cov) @ fit.coef), rel=1e-8)
    assert fit.lrt.stat == pytest.approx(2 * (fit.loglik - fit.loglik0))
    assert fit.wald.df == fit.lrt.df == fit.score.df == 2


def test_separation_warns_and_caps():
    t = np.arange(1, 21.0)
    x = (t <= 10).astype(float)
    with pytest.warns(survival.SeparationWarning):
        fit = survival.cox_fit(t, np.ones(20, bool), x)
    assert fit.separated and abs(fit.coef[0]) <= 50


def test_three_tests_agree_on_large_planted_cohort():
    rng = np.random.default_rng(0)
    time, event, x = planted_cohort(rng, n=500, hazard_ratio=1.5)
    fit = survival.cox_fit(time, event, x)
    s = [fit.wald.stat, fit.lrt.stat, fit.score.stat]
    for a in s:
        for b in s:
            assert abs(a - b) / max(a, b) < 0.10


def test_logrank_equals_score_without_ties():
    rng = np.random.default_rng(3)
    for _ in range(10):
        time, event, x = untied_cohort(rng, 25, 1)
        chi2, p, df = survival.logrank_test(time, event, x[:, 0] > 0)
        fit = survival.cox_fit(time, event, x)
        assert chi2 == pytest.approx(fit.score.stat, abs=1e-8)
        assert chi2 == pytest.approx(score_stat_untied(time, event, x[:, 0]), abs=1e-8)
        assert df == 1 and 0 <= p <= 1


def test_logrank_identical_groups():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    e = np.array([True, False, True, True])
    chi2, p, _ = survival.logrank_test(np.r_[t, t], np.r_[e, e], np.r_[np.ones(4), np.zeros(4)] > 0)
    assert chi2 == pytest.approx(0.0, abs=1e-12) and p == pytest.approx(1.0)


def test_logrank_single_event_hand_value():
    # one event at t=1 in group 1; 2 of 5 at risk in group 1
    t = np.array([1.0, 2, 3, 4, 5])
    e = np.array([True, False, False, False, False])
    g = np.array([True, True, False, False, False])
    o_e = 1 - 2 / 5
    v = 1 * (2 / 5) * (3 / 5) * (5 - 1) / (5 - 1)
    assert survival.logrank_test(t, e, g)[0] == pytest.approx(o_e ** 2 / v)
    with pytest.raises(survival.SurvivalDataError):
        survival.logrank_test(t, e, np.ones(5, bool))


# ---------------------------------------------------------------------------
# Kaplan-Meier


def test_km_hand_example():
    c = survival.km_estimate([1, 2, 3], [1, 0, 1])
    assert c.exact == [Fraction(2, 3), Fraction(2, 3), Fraction(0)]
    assert c.at(0.5) == 1.0 and c.at(1) == pytest.approx(2 / 3) and c.at(3) == 0.0
    assert c.at_risk.tolist() == [3, 2, 1]


def test_km_all_censored():
    c = survival.km_estimate([1, 2, 5], [0, 0, 0])
    assert (c.survival == 1).all()
    with pytest.raises(survival.SurvivalDataError):
        survival.km_estimate([1.0], [1], mask=[False])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 15), st.booleans()), min_size=1, max_size=40))
def test_km_matches_rational_oracle(rows):
    time = [r[0] for r in rows]
    event = [r[1] for r in rows]
    c = survival.km_estimate(time, event)
    ref = km_rational(time, event)
    assert dict(zip(c.times.tolist(), c.exact)) == ref
    assert all(a >= b for a, b in zip(c.exact, c.exact[1:]))
    assert c.at(0) == 1.0


def test_km_without_censoring_is_empirical_survival():
    t = np.random.default_rng(0).integers(1, 20, 30).astype(float)
    c = survival.km_estimate(t, np.ones(30, bool))
    for u in np.unique(t):
        assert c.exact[list(c.times).index(u)] == Fraction(int((t > u).sum()), 30)


def test_km_censor_at_event_time_still_at_risk():
    c = survival.km_estimate([2, 2, 3], [1, 0, 1])
    assert c.exact[0] == Fraction(2, 3)


# ---------------------------------------------------------------------------
# sweeps


def test_sweep_and_combinations():
    rng = np.random.default_rng(4)
    n = 200
    x = (rng.random((n, 4)) < 0.5).astype(float)
    x[:, 3] = 0
    rate = 0.03 * 3.0 ** x[:, 0] * 2.5 ** x[:, 1] * 2.0 ** x[:, 2]
    time = rng.exponential(1 / rate)
    event = np.ones(n, bool)
    sweep = survival.univariate_sweep(time, event, x, ["0", "1", "2", "3"])
    assert "3" in sweep.skipped
    assert sweep.significant == ["0", "1", "2"]
    combos = survival.multivariate_combinations(time, event, x, ["0", "1", "2", "3"], sweep.significant)
    assert list(combos) == [("0", "1"), ("0", "2"), ("1", "2"), ("0", "1", "2")]
    assert survival.multivariate_combinations(time, event, x, list("0123"), ["0", "1"]).keys() == {("0", "1")}
    assert survival.multivariate_combinations(time, event, x, list("0123"), ["0"]) == {}
    full, dropped = survival.all_covariates_fit(time, event, x, list("0123"))
    assert dropped == ["3"] and full.names == ["0", "1", "2"]


def test_sweep_no_events():
    with pytest.raises(survival.NoEventsError):
        survival.univariate_sweep([1.0, 2.0], [0, 0], np.array([[0], [1]]))


def test_fit_dict_roundtrip():
    time, event, x = untied_cohort(np.random.default_rng(1), 20, 2)
    fit = survival.cox_fit(time, event, x, ["a", "b"])
    back = survival.fit_from_dict(survival.fit_to_dict(fit))
    np.testing.assert_array_equal(back.coef, fit.coef)
    np.testing.assert_array_equal(back.cov, fit.cov)
    assert back.names == fit.names and back.wald == fit.wald
