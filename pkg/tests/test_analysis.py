import itertools
import math

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps
from statsmodels.formula.api import ols

from expsearch.analysis import (
    AnalysisError,
    anova_balanced,
    anova_oneway,
    anova_twoway,
    chi2_representativeness,
    cumulative_best,
    detect_jumps,
    enrichment_ratio,
    entropy_series,
    fit_innovation_decay,
    fit_model,
    group_mean_table,
    innovation_series,
    jsd,
    jsd_series,
    oneway_anova,
    permutation_r2_baseline,
    rank_correlation,
    select_model_aic,
    simple_regret,
)
from expsearch.analysis.convergence import best_from_values
from expsearch.analysis.stats import heatmap_grid
from expsearch.records import ExperimentRecord
from expsearch.space import Configuration


def rec(i, ap, status="completed", end=None, agent="a", **cfg):
    end = i if end is None else end
    return ExperimentRecord(i, Configuration(cfg), status, agent=agent, ap=ap if status == "completed" else None,
                            failure_category="oom" if status == "failed" else None,
                            submit_tick=0, start_tick=0, end_tick=end)


# ---------------------------------------------------------------- cumulative best and fits


def test_cumulative_best_examples():
    s = cumulative_best([rec(1, 0.5), rec(2, 0.4), rec(3, 0.7)])
    assert s.ap_star.tolist() == [0.5, 0.5, 0.7]
    assert list(s.n) == [1, 2, 3]
    assert len(cumulative_best([rec(1, None, "failed"), rec(2, None, "failed")])) == 0


def test_cumulative_best_uses_completion_order():
    s = cumulative_best([rec(1, 0.9, end=10), rec(2, 0.3, end=5)])
    assert s.ap_star.tolist() == [0.3, 0.9]


@settings(max_examples=80, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=0, max_size=50))
def test_cumulative_best_non_decreasing(values):
    s = cumulative_best([rec(i + 1, v) for i, v in enumerate(values)])
    assert np.all(np.diff(s.ap_star) >= 0)


def test_exact_power_recovery():
    n = np.arange(1, 201, dtype=float)
    y = 0.99 - 0.3 * n ** -0.5
    fit = fit_model((n, y), "power")
    assert abs(fit.params[2] - 0.5) < 1e-4
    assert fit.r2 > 0.9999
    assert fit.converged and fit.params[0] <= 1.0


def test_constant_series_degenerate():
    fit = fit_model((np.arange(1, 11), np.full(10, 0.7)), "power")
    assert fit.degenerate and math.isnan(fit.r2)
    assert abs(fit.predict(np.arange(1, 11)) - 0.7).max() < 1e-6


def test_short_series_rejected():
    with pytest.raises(AnalysisError, match="too short"):
        fit_model((np.arange(1, 4), np.array([0.1, 0.2, 0.3])), "power")


def test_aic_formula_and_ordering():
    n = np.arange(1, 101, dtype=float)
    y = 0.6 + 0.05 * np.log(n)
    fits = select_model_aic((n, y + np.random.default_rng(0).normal(0, 1e-3, n.size)))
    assert [f.aic for f in fits] == sorted(f.aic for f in fits)
    f = fits[0]
    assert f.model == "logarithmic"
    assert f.aic == pytest.approx(2 * 2 + f.n * math.log(f.rss / f.n))


def test_fit_respects_ap_bound():
    n = np.arange(1, 60, dtype=float)
    y = np.minimum(1.0, 1.05 - 0.3 * n ** -0.4)
    fit = fit_model((n, y), "power")
    assert fit.params[0] <= 1.0 + 1e-12
    assert fit.params[0] >= y.max() - 1e-3


def test_fit_shift_consistency():
    n = np.arange(1, 151, dtype=float)
    y = 0.8 - 0.3 * n ** -0.6
    a = fit_model((n, y), "power")
    b = fit_model((n, y + 0.05), "power")
    assert b.params[0] - a.params[0] == pytest.approx(0.05, abs=1e-6)
    assert b.params[1] == pytest.approx(a.params[1], abs=1e-6)
    assert b.params[2] == pytest.approx(a.params[2], abs=1e-6)


# ---------------------------------------------------------------- permutation baseline


def test_permutation_exhaustive_three_records():
    values = [0.2, 0.5, 0.4]
    base = permutation_r2_baseline(values, 6, np.random.default_rng(0))
    assert base.exhaustive and base.r2.size == 6
    expected = []
    for order in itertools.permutations(values):
        series = best_from_values(order)
        assert np.all(np.diff(series.ap_star) >= 0)
        expected.append(fit_model(series, "power", min_points=3).r2)
    finite = np.array([e for e in expected if np.isfinite(e)])
    assert base.mean_r2 == pytest.approx(finite.mean(), abs=0, rel=0) or base.mean_r2 == finite.mean()


def test_permutation_identical_values():
    base = permutation_r2_baseline([0.4] * 6, 20, np.random.default_rng(1))
    assert base.n_degenerate == 20


def test_permutation_needs_two_records():
    with pytest.raises(AnalysisError):
        permutation_r2_baseline([0.3], 5, np.random.default_rng(0))


# ---------------------------------------------------------------- dynamics


def _stream(cells, agent="a"):
    return [rec(i + 1, 0.5, agent=agent, backbone=c) for i, c in enumerate(cells)]


def test_entropy_uniform_and_constant():
    levels = ["a", "b", "c", "d"]
    uni = entropy_series(_stream(levels * 25), "backbone")
    assert uni.values[-1] == pytest.approx(math.log(4), abs=1e-12)
    const = entropy_series(_stream(["a"] * 30), "backbone")
    assert np.all(const.values == 0.0)
    assert np.all((uni.values >= 0) & (uni.values <= math.log(4) + 1e-12))


def test_windowed_entropy_drops_in_exploit_phase():
    rng = np.random.default_rng(0)
    levels = [f"l{i}" for i in range(8)]
    explore = list(rng.choice(levels, 200))
    series = entropy_series(_stream(explore + ["l0"] * 200), "backbone", mode="windowed", window=50)
    assert series.values[-1] < 0.2 * math.log(8)
    assert series.values[199] > 0.8 * math.log(8)


def test_jsd_identities():
    p = np.array([1.0, 2.0, 3.0])
    assert jsd(p, p) == pytest.approx(0.0, abs=1e-15)
    assert jsd(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 20), min_size=3, max_size=3), st.lists(st.integers(0, 20), min_size=3, max_size=3))
def test_jsd_symmetric_and_bounded(a, b):
    if sum(a) == 0 or sum(b) == 0:
        return
    pa, pb = np.array(a, float), np.array(b, float)
    d = jsd(pa, pb)
    assert d == pytest.approx(jsd(pb, pa), abs=1e-14)
    assert -1e-15 <= d <= math.log(2) + 1e-12


def test_jsd_series_marks_absent_agent():
    recs = _stream(["a"] * 5, agent="x") + [rec(6, 0.5, agent="y", backbone="b")]
    s = jsd_series(recs, "x", "y", "backbone", window=10)
    assert np.isnan(s.values[0])
    assert s.values[-1] == pytest.approx(math.log(2))


def test_innovation_strictly_increasing():
    s = innovation_series(list(np.linspace(0.1, 0.9, 20)), window=5)
    assert np.all(s.meta["indicator"] == 1.0) and np.all(s.values == 1.0)


def test_innovation_record_statistics():
    # E[iota_t] = 1/t for i.i.d. continuous values; 20,000 streams keep the t = 10 estimate within a few percent
    rng = np.random.default_rng(0)
    draws = rng.random((20_000, 10))
    hits = sum(innovation_series(list(row), window=10).meta["indicator"][-1] for row in draws)
    assert abs(hits / 20_000 * 10 - 1) < 0.1


def test_innovation_decay_on_iid():
    rng = np.random.default_rng(1)
    alphas = [fit_innovation_decay(innovation_series(list(rng.random(2000)), window=10)).alpha for _ in range(20)]
    assert abs(np.mean(alphas) - 1.0) < 0.25


# ---------------------------------------------------------------- ANOVA


def test_oneway_hand_computed():
    res = oneway_anova([1, 2, 3, 4, 5, 6], ["g1"] * 3 + ["g2"] * 3, n_perm=0)
    assert res.f_stat == pytest.approx(13.5, abs=1e-9)
    assert res.eta_sq == pytest.approx(27 / 35, abs=1e-9)
    assert (res.ssb, res.ssw, res.sst) == pytest.approx((13.5, 4.0, 17.5))


def test_oneway_against_statsmodels():
    rng = np.random.default_rng(3)
    labels = rng.choice(list("abcd"), 120)
    y = rng.normal(0, 1, 120) + (labels == "a") * 0.8
    res = oneway_anova(y, labels, n_perm=0)
    df = pd.DataFrame({"y": y, "g": labels})
    table = sm.stats.anova_lm(ols("y ~ C(g)", df).fit(), typ=1)
    assert res.f_stat == pytest.approx(table.loc["C(g)", "F"], rel=1e-9)
    assert res.ssb == pytest.approx(table.loc["C(g)", "sum_sq"], rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sum_of_squares_identity(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(6, 60))
    labels = rng.integers(0, 4, n)
    labels[:2] = [0, 1]
    res = oneway_anova(rng.normal(size=n), labels, n_perm=0)
    assert res.ssb + res.ssw == pytest.approx(res.sst, rel=1e-9)
    assert 0 <= res.eta_sq <= 1


def test_permutation_p_range_and_null():
    rng = np.random.default_rng(5)
    y = rng.normal(size=80)
    res = oneway_anova(y, ["a"] * 40 + ["b"] * 40, n_perm=200, rng=np.random.default_rng(0))
    assert 0 < res.p_perm <= 1 and res.eta_sq < 0.1


def test_oneway_errors():
    with pytest.raises(AnalysisError):
        oneway_anova([1, 2, 3], ["a", "a", "a"], n_perm=0)
    with pytest.raises(AnalysisError, match="zero total variance"):
        oneway_anova([1, 1, 1, 1], ["a", "a", "b", "b"], n_perm=0)


def _grouped(values_by_group):
    out, i = [], 0
    for (b, e), vals in values_by_group.items():
        for v in vals:
            i += 1
            out.append(rec(i, v, backbone=b, encoder=e))
    return out


def test_anova_min_n_filter_and_balanced_identity():
    rng = np.random.default_rng(2)
    groups = {("x", "1"): 0.6 * rng.random(10), ("y", "1"): 0.6 * rng.random(10) + 0.3, ("z", "1"): rng.random(3)}
    recs = _grouped(groups)
    one = anova_oneway(recs, ("backbone", "encoder"), min_n=10, n_perm=0)
    assert len(one.groups) == 2 and one.notes
    bal = anova_balanced(recs, ("backbone", "encoder"), n_per_group=10, seed=1, n_perm=0)
    assert bal.f_stat == pytest.approx(one.f_stat, rel=1e-12)
    assert bal.eta_sq == pytest.approx(one.eta_sq, rel=1e-12)


def test_balanced_subsample_deterministic():
    rng = np.random.default_rng(4)
    recs = _grouped({("x", "1"): 0.7 * rng.random(30), ("y", "1"): 0.7 * rng.random(25) + 0.2})
    a = anova_balanced(recs, ("backbone", "encoder"), 10, seed=3, n_perm=50)
    b = anova_balanced(recs, ("backbone", "encoder"), 10, seed=3, n_perm=50)
    assert (a.f_stat, a.p_perm) == (b.f_stat, b.p_perm)
    assert a.n == 20


def test_twoway_against_statsmodels_type1():
    rng = np.random.default_rng(8)
    rows = []
    for i in range(150):
        a, b = rng.choice(["a1", "a2", "a3"]), rng.choice(["b1", "b2"])
        y = {"a1": 0.0, "a2": 0.5, "a3": 1.0}[a] + {"b1": 0.0, "b2": 0.3}[b] + (a == "a3") * (b == "b2") * 0.4
        rows.append((a, b, y + rng.normal(0, 0.2)))
    recs = [rec(i + 1, 0.5, backbone=a, encoder=b).with_(ap=float(np.clip(y / 3 + 0.2, 0, 1)))
            for i, (a, b, y) in enumerate(rows)]
    res = anova_twoway(recs, "backbone", "encoder", n_perm=0)
    df = pd.DataFrame({"y": [r.ap for r in recs], "A": [a for a, _, _ in rows], "B": [b for _, b, _ in rows]})
    table = sm.stats.anova_lm(ols("y ~ C(A) * C(B)", df).fit(), typ=1)
    assert res.terms["backbone"].ss == pytest.approx(table.loc["C(A)", "sum_sq"], rel=1e-8)
    assert res.terms["encoder"].ss == pytest.approx(table.loc["C(B)", "sum_sq"], rel=1e-8)
    assert res.terms["backbone:encoder"].ss == pytest.approx(table.loc["C(A):C(B)", "sum_sq"], rel=1e-8)
    assert res.terms["backbone:encoder"].f_stat == pytest.approx(table.loc["C(A):C(B)", "F"], rel=1e-8)


def test_twoway_additive_design_small_interaction():
    recs, i = [], 0
    rng = np.random.default_rng(0)
    for a, ea in (("a1", 0.1), ("a2", 0.3), ("a3", 0.5)):
        for b, eb in (("b1", 0.0), ("b2", 0.2)):
            for _ in range(20):
                i += 1
                recs.append(rec(i, ea + eb + rng.normal(0, 0.01), backbone=a, encoder=b))
    res = anova_twoway(recs, "backbone", "encoder", n_perm=0)
    assert res.terms["backbone:encoder"].eta_sq < 0.02


def test_twoway_duplicated_2x2_interaction():
    cells = {("A1", "B1"): 0.0, ("A1", "B2"): 0.0, ("A2", "B1"): 0.0, ("A2", "B2"): 1.0}
    recs, i = [], 0
    for _ in range(2):
        for (a, b), v in cells.items():
            i += 1
            recs.append(rec(i, v, backbone=a, encoder=b))
    res = anova_twoway(recs, "backbone", "encoder", n_perm=0)
    assert res.terms["backbone:encoder"].ss > 0
    # hand computation: grand mean 1/4, SST = 8 * 3/16 = 1.5, A and B take 0.5 each, interaction 0.5
    assert res.terms["backbone:encoder"].ss == pytest.approx(0.5)
    assert res.terms["backbone"].ss == pytest.approx(0.5)


# ---------------------------------------------------------------- association statistics


def test_enrichment_examples():
    recs = [rec(i + 1, (i + 1) / 100, backbone="x") for i in range(100)]
    assert enrichment_ratio(recs, lambda r: True, 10) == 1.0
    assert enrichment_ratio(recs, lambda r: r.id == 100, 1) == pytest.approx(100.0)
    with pytest.raises(AnalysisError):
        enrichment_ratio(recs, lambda r: True, 101)
    assert math.isnan(enrichment_ratio(recs, lambda r: False, 5))


def test_chi2_identity_and_concentration():
    pop = list("abcd") * 50
    same = chi2_representativeness(pop, pop, n_perm=0)
    assert same.chi2 == 0 and same.cramers_v == 0
    conc = chi2_representativeness(["a"] * 40, pop, n_perm=200, rng=np.random.default_rng(0))
    assert conc.chi2 > 50 and conc.p_perm <= 0.01
    expected = sps.chisquare([40, 0, 0, 0], [10, 10, 10, 10]).statistic
    assert conc.chi2 == pytest.approx(expected)
    with pytest.raises(AnalysisError):
        chi2_representativeness([], pop)


def test_rank_correlation_against_scipy():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 5, 30).astype(float)
    y = x + rng.normal(0, 1, 30)
    assert rank_correlation(list(zip(x, y))) == pytest.approx(sps.spearmanr(x, y).statistic, abs=1e-12)
    assert rank_correlation([(1, 1), (2, 2), (3, 3)]) == pytest.approx(1.0)
    assert rank_correlation([(1, 3), (2, 2), (3, 1)]) == pytest.approx(-1.0)
    assert math.isnan(rank_correlation([(1, 1), (1, 2), (1, 3)]))
    with pytest.raises(AnalysisError):
        rank_correlation([(1, 1), (2, 2)])


def test_regret():
    s = cumulative_best([rec(1, 0.5), rec(2, 0.92), rec(3, 0.7)])
    r = simple_regret(s, 0.92)
    assert r.tolist() == pytest.approx([0.42, 0.0, 0.0])
    assert np.all(np.diff(r) <= 0)


def test_jumps_step_and_smooth():
    s = best_from_values([0.5] * 10 + [0.8] * 10)
    jumps = detect_jumps(s, 0.1)
    assert len(jumps) == 1 and jumps[0].n == 11 and jumps[0].magnitude == pytest.approx(0.3)
    n = np.arange(1, 200)
    smooth = best_from_values(list(0.99 - 0.3 * n ** -0.5))
    # increments 0.3 (N-1)^-0.5 - 0.3 N^-0.5 are below 0.05 from N = 2 on
    assert [j for j in detect_jumps(smooth, 0.05) if j.n >= 10] == []


def test_group_mean_table_and_grid():
    recs = [rec(1, 0.2, backbone="x", encoder="e"), rec(2, 0.4, backbone="x", encoder="e"),
            rec(3, 0.9, backbone="y", encoder="e")]
    rows = group_mean_table(recs, ("backbone", "encoder"), min_n=2)
    assert len(rows) == 1 and rows[0].mean == pytest.approx(0.3)
    r_levels, c_levels, grid = heatmap_grid(group_mean_table(recs, ("backbone", "encoder"), min_n=1))
    assert r_levels == ["x", "y"] and grid.shape == (2, 1)
