import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from expsearch.oracle import PoolEntry, PoolExhaustedError
from expsearch.policies import (
    DiversityBudget,
    Proposal,
    RecordPool,
    StubEndpoint,
    TpeParams,
    encode_context,
    expand_sweep,
    parse_ideas,
    propose_llm,
    propose_oracle_policy,
    propose_pool_random,
    propose_pool_tpe,
    propose_random,
    propose_random_excluding,
    propose_tpe,
    render_ideas,
    split_history,
)
from expsearch.records import ExperimentRecord
from expsearch.space import cell_of, enumerate_cells, sample_uniform, validate

IDEA_DOC = """
- idea_name: "V-JEPA2 + RetNet + Focal"
  backbone: vjepa2_vitl14
  temporal_encoder: retnet
  loss: focal
  focal_gamma: 2.5
  learning_rate: 3e-4
  weight_decay: 0.05
  batch_size: 32
  seq_len: 15
  epochs: 20
  priority: high
  rationale: >
    strong video features paired with a retention encoder
"""


def _pool(space, aps, seed=0):
    rng = np.random.default_rng(seed)
    return RecordPool(PoolEntry(sample_uniform(space, rng), ap, i + 1, i) for i, ap in enumerate(aps))


def _records(space, configs_aps):
    return [ExperimentRecord(i + 1, c, "completed", ap=ap) for i, (c, ap) in enumerate(configs_aps)]


# ---------------------------------------------------------------- random


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_and_excluding_proposals_validate(seed):
    from expsearch.space import default_space

    sp = default_space()
    rng = np.random.default_rng(seed)
    assert validate(sp, propose_random(sp, rng).config) == []
    p = propose_random_excluding(sp, rng, "loss", "focal")
    assert p.config["loss"] != "focal" and validate(sp, p.config) == []
    assert p.source == "replacement"


def test_random_seed_determinism(space):
    a = [propose_random(space, np.random.default_rng(3)).config for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_random_covers_toy_space(toy_space):
    rng = np.random.default_rng(0)
    seen = {cell_of(toy_space, propose_random(toy_space, rng).config) for _ in range(10_000)}
    assert len(seen) / 16 > 0.99


# ---------------------------------------------------------------- pool


def test_pool_of_one_then_exhausted(space):
    pool = _pool(space, [0.4])
    p = propose_pool_random(pool, np.random.default_rng(0))
    assert p.source == "pool_random" and len(pool) == 0
    with pytest.raises(PoolExhaustedError, match="pool exhausted"):
        propose_pool_random(pool, np.random.default_rng(0))


def test_pool_random_two_draw_running_max(space):
    aps = [0.1, 0.2, 0.3, 0.4, 0.5]
    # exact expectation by enumerating ordered pairs without replacement
    expected = np.mean([max(a, b) for a, b in itertools.permutations(aps, 2)])
    rng = np.random.default_rng(1)
    runs = []
    for _ in range(20_000):
        pool = _pool(space, aps)
        by_id = {e.record_id: e.ap for e in pool.entries}
        got = [propose_pool_random(pool, rng) for _ in range(2)]
        runs.append(max(by_id[int(p.rationale.split()[-1])] for p in got))
    assert expected == pytest.approx(0.4)
    assert abs(np.mean(runs) - expected) < 0.005


def test_oracle_policy_order_and_ties(space):
    pool = _pool(space, [0.3, 0.7, 0.7, 0.1])
    first = propose_oracle_policy(pool)
    assert first.config == pool.entries[1].config
    second = propose_oracle_policy(pool)
    assert second.config == pool.entries[2].config
    assert propose_oracle_policy(pool, already_run={1}).config == pool.entries[3].config
    with pytest.raises(PoolExhaustedError):
        propose_oracle_policy(pool, already_run={1})


def test_pool_tpe_draws_from_pool(space):
    pool = _pool(space, list(np.linspace(0.1, 0.9, 50)))
    hist = _records(space, [(e.config, e.ap) for e in pool.entries[:20]])
    configs = {e.config for e in pool.entries}
    p = propose_pool_tpe(pool, hist, space, TpeParams(), np.random.default_rng(0))
    assert p.config in configs and len(pool) == 49


# ---------------------------------------------------------------- tpe


def test_tpe_gamma_validation():
    for g in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            TpeParams(gamma_quantile=g)


def test_tpe_below_min_history_is_random(space):
    hist = _records(space, [(sample_uniform(space, np.random.default_rng(i)), 0.5) for i in range(5)])
    a = propose_tpe(hist, space, TpeParams(min_history=10), np.random.default_rng(4), n=3)
    rng = np.random.default_rng(4)
    b = [propose_random(space, rng) for _ in range(3)]
    assert [p.config for p in a] == [p.config for p in b]


def test_split_history_nonempty(space):
    hist = _records(space, [(sample_uniform(space, np.random.default_rng(i)), 0.1 * i) for i in range(2)])
    good, bad = split_history(hist, 0.9)
    assert len(good) == 1 and len(bad) == 1 and good[0].ap > bad[0].ap


def test_tpe_concentrates_on_good_backbone(space):
    rng = np.random.default_rng(0)
    pairs = []
    for _ in range(60):
        c = sample_uniform(space, rng)
        pairs.append((c, 0.9 if c["backbone"] == "dinov3_l" else 0.3 + 0.05 * rng.random()))
    hist = _records(space, pairs)
    props = propose_tpe(hist, space, TpeParams(), np.random.default_rng(1), n=1)
    draws = [propose_tpe(hist, space, TpeParams(), np.random.default_rng(s))[0] for s in range(300)]
    frac = np.mean([p.config["backbone"] == "dinov3_l" for p in draws])
    assert props[0].source == "tpe"
    assert frac > 1 / 6 + 0.1


def test_tpe_learning_rate_cluster(space):
    rng = np.random.default_rng(2)
    pairs = []
    for i in range(80):
        c = sample_uniform(space, rng)
        good = i % 4 == 0
        lr = 1e-3 * float(np.exp(rng.normal(0, 0.2))) if good else c["learning_rate"]
        pairs.append((c.replace(learning_rate=min(max(lr, 1e-5), 1e-2)), 0.9 if good else 0.3))
    hist = _records(space, pairs)
    lrs = [propose_tpe(hist, space, TpeParams(), np.random.default_rng(s))[0].config["learning_rate"]
           for s in range(200)]
    assert 3e-4 <= np.median(lrs) <= 3e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tpe_outputs_validate_and_are_deterministic(seed):
    from expsearch.space import default_space

    sp = default_space()
    rng = np.random.default_rng(seed)
    hist = _records(sp, [(sample_uniform(sp, rng), float(rng.random())) for _ in range(25)])
    a = propose_tpe(hist, sp, TpeParams(), np.random.default_rng(seed), n=3)
    b = propose_tpe(hist, sp, TpeParams(), np.random.default_rng(seed), n=3)
    assert [p.config for p in a] == [p.config for p in b]
    assert len(a) == 3 and all(validate(sp, p.config) == [] for p in a)


def test_tpe_exclude_hook(space):
    rng = np.random.default_rng(5)
    hist = _records(space, [(sample_uniform(space, rng), float(rng.random())) for _ in range(30)])
    banned = lambda c: c["backbone"] == "vjepa2"  # noqa: E731
    props = propose_tpe(hist, space, TpeParams(n_candidates=64), np.random.default_rng(0), n=4, exclude=banned)
    assert props and all(p.config["backbone"] != "vjepa2" for p in props)


# ---------------------------------------------------------------- context and ideas


def test_encode_context_empty_history(space):
    text = encode_context([], space)
    assert "## Current Leaderboard (Top 5)" in text
    assert "- none" in text and "Banned configs: []" in text


def test_encode_context_leaderboard_rows(space):
    rng = np.random.default_rng(0)
    hist = _records(space, [(sample_uniform(space, rng).replace(backbone="vjepa2"), 0.1 * i) for i in range(7)])
    text = encode_context(hist, space, k=5)
    rows = [ln for ln in text.splitlines() if ln.startswith("| ") and ln[2].isdigit()]
    assert len(rows) == 5 and rows[0].startswith("| 1 | 0.600 |")
    assert "- At least 1 idea must use a non-vjepa2 backbone" in text


def test_encode_context_lists_failures(space):
    c = sample_uniform(space, np.random.default_rng(1))
    rec = ExperimentRecord(1, c, "abandoned", failure_category="oom")
    text = encode_context([rec], space)
    assert "#1 oom" in text and "/".join(cell_of(space, c)) in text


def test_parse_idea_document(space):
    parsed = parse_ideas(IDEA_DOC, space)
    assert not parsed.rejections
    (p,) = parsed.proposals
    assert p.config["backbone"] == "vjepa2" and p.config["encoder"] == "retnet"
    assert p.config["focal_gamma"] == 2.5 and p.priority == "high"
    assert p.idea_name == "V-JEPA2 + RetNet + Focal"
    assert validate(space, p.config) == []


def test_parse_rejects_bad_ideas(space):
    missing = IDEA_DOC.replace("  backbone: vjepa2_vitl14\n", "")
    out = parse_ideas(missing, space)
    assert not out.proposals and any("backbone" in r for r in out.rejections[0].reasons)
    oob = parse_ideas(IDEA_DOC.replace("focal_gamma: 2.5", "focal_gamma: 9.0"), space)
    assert not oob.proposals and any("out of bounds" in r for r in oob.rejections[0].reasons)


def test_parse_unreadable_document(space):
    from expsearch.policies import IdeaParseError

    with pytest.raises(IdeaParseError):
        parse_ideas("just: a mapping", space)
    with pytest.raises(IdeaParseError):
        parse_ideas("- [unclosed", space)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_render_parse_roundtrip(seed):
    from expsearch.space import default_space

    sp = default_space()
    rng = np.random.default_rng(seed)
    props = [Proposal(sample_uniform(sp, rng), "low", "", "llm", None, f"idea {i}") for i in range(3)]
    back = parse_ideas(render_ideas(props, sp), sp)
    assert not back.rejections
    assert [p.config for p in back.proposals] == [p.config for p in props]


def test_propose_llm_with_stub(space):
    res = propose_llm("ctx", StubEndpoint(IDEA_DOC), space, 4, np.random.default_rng(0))
    assert not res.fallback and len(res.proposals) == 1


def test_propose_llm_garbage_falls_back(space):
    stub = StubEndpoint("this is not yaml: [")
    res = propose_llm("ctx", stub, space, 4, np.random.default_rng(0))
    assert res.fallback and len(res.proposals) == 1
    assert validate(space, res.proposals[0].config) == []
    assert stub.requests[0]["n_ideas"] == 4


def test_propose_llm_partial_rejections(space):
    rng = np.random.default_rng(3)
    good = [Proposal(sample_uniform(space, rng), idea_name=f"g{i}") for i in range(3)]
    doc = render_ideas(good, space)
    doc += IDEA_DOC.replace("focal_gamma: 2.5", "focal_gamma: 9.0")
    doc += IDEA_DOC.replace("temporal_encoder: retnet", "temporal_encoder: lstm")
    res = propose_llm("ctx", StubEndpoint(doc), space, 5, rng)
    assert len(res.proposals) == 3 and len(res.rejections) == 2 and not res.fallback


def test_diversity_budget_from_mapping():
    b = DiversityBudget.from_mapping({"min_non_modal": {"backbone": 2}, "window": 20})
    assert b.min_non_modal == (("backbone", 2),) and b.window == 20
    assert DiversityBudget.from_mapping(None).min_non_modal == ()


# ---------------------------------------------------------------- sweeps


def _focal_base(space):
    (p,) = parse_ideas(IDEA_DOC, space).proposals
    return p


def test_sweep_gamma_children(space):
    base = _focal_base(space)
    kids = expand_sweep(base, {"focal_gamma": [2.0, 2.5, 3.0]}, space, base_id=7)
    assert sorted(k.config["focal_gamma"] for k in kids) == [2.0, 2.5, 3.0]
    assert all(k.parent_id == 7 and k.source == "sweep" for k in kids)
    assert {cell_of(space, k.config) for k in kids} == {cell_of(space, base.config)}


def test_sweep_relative_and_invalid(space):
    base = _focal_base(space)
    kids = expand_sweep(base, {"learning_rate": ["x0.5", "x2"], "focal_gamma": [2.0, 50.0]}, space)
    assert len(kids) == 2
    assert sorted(k.config["learning_rate"] for k in kids) == pytest.approx([1.5e-4, 6e-4])


def test_sweep_empty_and_unknown(space):
    base = _focal_base(space)
    assert expand_sweep(base, {}, space) == []
    with pytest.raises(KeyError):
        expand_sweep(base, {"dropout": [0.1]}, space)


def test_toy_space_cells_enumerable(toy_space):
    assert len(list(enumerate_cells(toy_space))) == 16
