import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expsearch.analysis import anova_oneway
from expsearch.oracle import (
    LandscapeParams,
    PoolMissError,
    ReplayOracle,
    SyntheticOracle,
    calibrate_default,
    evaluate,
    optimal_config,
    true_optimum,
    true_value,
)
from expsearch.records import ExperimentRecord
from expsearch.space import Configuration, cell_of, default_space, enumerate_cells, sample_uniform


def _quiet(params, **kw):
    d = params.to_dict()
    d.update(kw)
    return LandscapeParams.from_dict(d)


def _uniform_records(space, params, n, seed):
    rng = np.random.default_rng(seed)
    recs = []
    for i in range(n):
        c = sample_uniform(space, rng)
        out = evaluate(params, c, rng, space)
        if out.status == "completed":
            recs.append(ExperimentRecord(i + 1, c, "completed", ap=out.ap))
    return recs


def test_calibrated_eta_sq_band(space, landscape):
    recs = _uniform_records(space, landscape, 5000, 11)
    res = anova_oneway(recs, ("backbone", "encoder"), min_n=10, n_perm=0)
    assert 0.75 <= res.eta_sq <= 0.95


def test_dominant_backbone_wins(space, landscape):
    cell, value = true_optimum(landscape, space)
    assert cell[0] == landscape.dominant_backbone
    bb = space["backbone"].levels
    best_per_bb = {}
    for b in bb:
        sub = LandscapeParams.from_dict(landscape.to_dict())
        # the best cell restricted to backbone b, by brute force over the remaining dims
        cats = space.categorical
        vals = []
        for rest in itertools.product(*(d.levels for d in cats[1:])):
            cfg = optimal_config(sub, space, (b, *rest))
            vals.append(true_value(sub, cfg, space))
        best_per_bb[b] = max(vals)
    dom = landscape.dominant_backbone
    assert all(best_per_bb[dom] > v for k, v in best_per_bb.items() if k != dom)
    assert best_per_bb[dom] == pytest.approx(value, abs=1e-12)


def test_true_optimum_matches_brute_force(space, landscape):
    cell, value = true_optimum(landscape, space)
    best_val, best_cell = -1.0, None
    for c in enumerate_cells(space):
        v = true_value(landscape, optimal_config(landscape, space, c), space)
        if v > best_val:
            best_val, best_cell = v, c
    assert best_cell == cell
    assert best_val == pytest.approx(value, abs=1e-12)


def test_true_optimum_value_is_calibrated(space, landscape):
    assert true_optimum(landscape, space)[1] == pytest.approx(0.92, abs=1e-9)


def test_zero_effects_tie_goes_to_first_cell(space):
    params = LandscapeParams({}, {}, {}, {}, base_level=0.4, noise_sigma=0.0)
    cell, value = true_optimum(params, space)
    assert cell == next(iter(enumerate_cells(space)))
    assert value == 0.4


def test_single_positive_backbone_effect(space):
    params = LandscapeParams({"siglip2": 0.3}, {}, {}, {}, base_level=0.2)
    cell, value = true_optimum(params, space)
    assert cell[0] == "siglip2" and value == pytest.approx(0.5)


def test_noise_free_repeat_and_closed_form(space, landscape):
    quiet = _quiet(landscape, noise_sigma=0.0, failure_profile={})
    cell, f_star = true_optimum(quiet, space)
    cfg = optimal_config(quiet, space, cell)
    aps = {evaluate(quiet, cfg, np.random.default_rng(s), space).ap for s in range(20)}
    assert len(aps) == 1 and aps.pop() == pytest.approx(f_star, abs=1e-12)


def test_noise_sd(space, landscape):
    params = _quiet(landscape, failure_profile={})
    cfg = optimal_config(params, space, ("dinov2_b",) + true_optimum(params, space)[0][1:])
    rng = np.random.default_rng(3)
    aps = np.array([evaluate(params, cfg, rng, space).ap for _ in range(10_000)])
    assert abs(aps.std(ddof=1) / 0.01 - 1) < 0.15


def test_failure_fraction(space, landscape):
    params = _quiet(landscape, failure_profile={"oom": 0.05, "nan_loss": 0.03, "missing_file": 0.02})
    rng = np.random.default_rng(4)
    cfg = sample_uniform(space, rng)
    fails = sum(evaluate(params, cfg, rng, space).status == "failed" for _ in range(10_000))
    assert abs(fails / 10_000 - 0.1) < 0.01


def test_failure_profile_validation():
    with pytest.raises(ValueError):
        LandscapeParams({}, {}, {}, {}, 0.5, failure_profile={"oom": 0.8, "nan_loss": 0.5})
    with pytest.raises(ValueError):
        LandscapeParams({}, {}, {}, {}, 0.5, noise_sigma=-1)


def test_evaluate_bit_reproducible(space, landscape):
    c = sample_uniform(space, np.random.default_rng(9))
    a = evaluate(landscape, c, np.random.default_rng([1, 2]), space)
    b = evaluate(landscape, c, np.random.default_rng([1, 2]), space)
    assert a == b


def test_landscape_roundtrip(tmp_path, landscape):
    p = tmp_path / "land.json"
    landscape.save(p)
    assert LandscapeParams.load(p).to_dict() == landscape.to_dict()


def test_calibration_requires_dims():
    from expsearch.space import define_space

    sp = define_space("dimensions:\n  - {name: x, kind: categorical, subspace: arch, levels: [a, b]}\n")
    with pytest.raises(Exception):
        calibrate_default(sp, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_optimum_dominates_noise_free_outcomes(seed):
    sp = default_space()
    params = _quiet(calibrate_default(sp, seed % 7), noise_sigma=0.0, failure_profile={})
    _, f_star = true_optimum(params, sp)
    rng = np.random.default_rng(seed)
    c = sample_uniform(sp, rng)
    out = evaluate(params, c, rng, sp)
    assert 0.0 <= out.ap <= f_star + 1e-12


# ---------------------------------------------------------------- replay


def _log(space, n=10):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(1, n + 1):
        c = sample_uniform(space, rng)
        recs.append(ExperimentRecord(i, c, "completed", ap=round(0.05 * i, 3), start_tick=i, end_tick=i + 3,
                                     submit_tick=i))
    return recs


def test_replay_returns_recorded_ap(space):
    recs = _log(space)
    oracle = ReplayOracle(recs, space)
    assert oracle.evaluate(recs[2].config).ap == recs[2].ap
    assert len(oracle.entries) == 10


def test_replay_miss(space):
    oracle = ReplayOracle(_log(space), space)
    with pytest.raises(PoolMissError, match="config not in pool"):
        oracle.lookup(sample_uniform(space, np.random.default_rng(99)))


def test_identity_replay_cumulative_best(space):
    from expsearch.analysis import cumulative_best

    recs = _log(space)
    oracle = ReplayOracle(recs, space)
    replayed = [r.with_(ap=oracle.evaluate(r.config).ap) for r in recs]
    assert np.array_equal(cumulative_best(replayed).ap_star, cumulative_best(recs).ap_star)


def test_synthetic_oracle_wrapper(space, landscape):
    o = SyntheticOracle(space, landscape)
    c = sample_uniform(space, np.random.default_rng(1))
    assert o.evaluate(c, np.random.default_rng(5)) == evaluate(landscape, c, np.random.default_rng(5), space)
    assert o.true_optimum() == true_optimum(landscape, space)
    assert cell_of(space, optimal_config(landscape, space, o.true_optimum()[0])) == o.true_optimum()[0]
    assert isinstance(optimal_config(landscape, space, o.true_optimum()[0]), Configuration)
