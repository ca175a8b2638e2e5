"""Evaluation oracles: a calibrated synthetic landscape and a replay pool."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Mapping, Protocol

import numpy as np

from .records import FAILURE_CATEGORIES, ExperimentRecord
from .space import (
    CellId,
    Configuration,
    ConfigurationSpace,
    SpaceError,
    discrete_cardinality,
    fingerprint,
    sample_uniform,
)

DEFAULT_FAILURE_RATE = 0.02
DURATION_RANGE = (3, 10)
TARGET_ETA_SQ = 0.85
TARGET_OPTIMUM = 0.92


class PoolMissError(KeyError):
    """Replay oracle queried with a configuration that is not in the pool."""


class PoolExhaustedError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalOutcome:
    status: Literal["completed", "failed"]
    ap: float | None = None
    failure_category: str | None = None
    duration_ticks: int = 1

    def __post_init__(self) -> None:
        if self.status == "completed":
            if self.ap is None or not 0.0 <= self.ap <= 1.0:
                raise ValueError("completed outcome needs ap in [0, 1]")
        elif self.failure_category is None:
            raise ValueError("failed outcome needs a failure category")
        if self.duration_ticks < 0:
            raise ValueError("negative duration")


class Oracle(Protocol):
    def evaluate(self, config: Configuration, rng: np.random.Generator) -> EvalOutcome: ...


@dataclass
class LandscapeParams:
    """Ground truth: additive main effects, one backbone x encoder interaction,
    and a concave quadratic per continuous dimension in unit coordinates."""

    backbone_effects: dict[str, float]
    encoder_effects: dict[str, float]
    interaction_effects: dict[tuple[str, str], float]
    continuous_response: dict[str, tuple[float, float]]
    base_level: float
    noise_sigma: float = 0.01
    failure_profile: dict[str, float] = field(
        default_factory=lambda: {c: DEFAULT_FAILURE_RATE for c in FAILURE_CATEGORIES}
    )
    categorical_effects: dict[str, dict[str, float]] = field(default_factory=dict)
    backbone_dim: str = "backbone"
    encoder_dim: str = "encoder"
    dominant_backbone: str | None = None

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        probs = list(self.failure_profile.values())
        if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ValueError("failure probabilities must lie in [0, 1] and sum to <= 1")
        unknown = set(self.failure_profile) - set(FAILURE_CATEGORIES)
        if unknown:
            raise ValueError(f"unknown failure categories {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {
            "backbone_dim": self.backbone_dim,
            "encoder_dim": self.encoder_dim,
            "dominant_backbone": self.dominant_backbone,
            "base_level": self.base_level,
            "noise_sigma": self.noise_sigma,
            "failure_profile": dict(self.failure_profile),
            "backbone_effects": dict(self.backbone_effects),
            "encoder_effects": dict(self.encoder_effects),
            "interaction_effects": {f"{b}|{e}": v for (b, e), v in self.interaction_effects.items()},
            "categorical_effects": {k: dict(v) for k, v in self.categorical_effects.items()},
            "continuous_response": {k: list(v) for k, v in self.continuous_response.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> LandscapeParams:
        return cls(
            backbone_effects=dict(d["backbone_effects"]),
            encoder_effects=dict(d["encoder_effects"]),
            interaction_effects={tuple(k.split("|", 1)): v for k, v in d["interaction_effects"].items()},
            continuous_response={k: (float(v[0]), float(v[1])) for k, v in d["continuous_response"].items()},
            base_level=float(d["base_level"]),
            noise_sigma=float(d.get("noise_sigma", 0.01)),
            failure_profile=dict(d.get("failure_profile", {})),
            categorical_effects={k: dict(v) for k, v in d.get("categorical_effects", {}).items()},
            backbone_dim=d.get("backbone_dim", "backbone"),
            encoder_dim=d.get("encoder_dim", "encoder"),
            dominant_backbone=d.get("dominant_backbone"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> LandscapeParams:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _categorical_part(params: LandscapeParams, config: Mapping) -> float:
    b = config[params.backbone_dim]
    e = config[params.encoder_dim]
    total = params.base_level
    total += params.backbone_effects.get(b, 0.0)
    total += params.encoder_effects.get(e, 0.0)
    total += params.interaction_effects.get((b, e), 0.0)
    for dim, effects in params.categorical_effects.items():
        if dim in config:
            total += effects.get(str(config[dim]), 0.0)
    return total


def _continuous_part(params: LandscapeParams, config: Mapping, space: ConfigurationSpace) -> float:
    total = 0.0
    for dim, (opt, curvature) in params.continuous_response.items():
        if dim in config:
            u = space[dim].to_unit(float(config[dim]))
            total -= curvature * (u - opt) ** 2
    return total


def true_value(params: LandscapeParams, config: Mapping, space: ConfigurationSpace) -> float:
    """Noise-free f(c), clamped to [0, 1]."""
    raw = _categorical_part(params, config) + _continuous_part(params, config, space)
    return float(min(1.0, max(0.0, raw)))


def evaluate(
    params: LandscapeParams,
    config: Mapping,
    rng: np.random.Generator,
    space: ConfigurationSpace,
) -> EvalOutcome:
    # fixed draw layout: failure, duration, noise
    u_fail = rng.random()
    duration = int(rng.integers(DURATION_RANGE[0], DURATION_RANGE[1] + 1))
    noise = rng.normal(0.0, params.noise_sigma) if params.noise_sigma > 0 else 0.0
    acc = 0.0
    for category in FAILURE_CATEGORIES:
        acc += params.failure_profile.get(category, 0.0)
        if u_fail < acc:
            return EvalOutcome("failed", failure_category=category, duration_ticks=duration)
    raw = _categorical_part(params, config) + _continuous_part(params, config, space) + noise
    return EvalOutcome("completed", ap=float(min(1.0, max(0.0, raw))), duration_ticks=duration)


def _require_dims(space: ConfigurationSpace, *names: str) -> None:
    for name in names:
        if name not in space or not space[name].is_categorical:
            raise SpaceError(f"space lacks required categorical dimension {name!r}")


def _group_mean_variance(params: LandscapeParams, space: ConfigurationSpace) -> float:
    bb = space[params.backbone_dim].levels
    enc = space[params.encoder_dim].levels
    means = np.array([
        params.backbone_effects[b] + params.encoder_effects[e] + params.interaction_effects[(b, e)]
        for b in bb for e in enc
    ])
    return float(means.var())


def _quadratic_moments(opt: float, curvature: float) -> tuple[float, float]:
    """Mean and variance of -curvature * (u - opt)**2 for u ~ U(0, 1)."""
    def raw(k: int) -> float:
        return ((1 - opt) ** (k + 1) - (-opt) ** (k + 1)) / (k + 1)
    m2, m4 = raw(2), raw(4)
    return -curvature * m2, curvature**2 * (m4 - m2**2)


def _hyper_variance(
    space: ConfigurationSpace,
    cat_effects: dict[str, dict[str, float]],
    cont: dict[str, tuple[float, float]],
    seed: int,
) -> float:
    """Variance of the non-architecture part of f under uniform sampling.

    Exact when every conditional rule is guarded by the same categorical
    dimension; otherwise estimated by Monte Carlo.
    """
    guards = {r.guard_dim for r in space.conditional_rules}
    if len(guards) > 1:
        probe = np.random.default_rng([seed, 0xCA2])
        parts = []
        for _ in range(20_000):
            c = sample_uniform(space, probe)
            part = sum(cat_effects[k][str(c[k])] for k in cat_effects if k in c)
            for dim, (opt, curv) in cont.items():
                if dim in c:
                    part -= curv * (space[dim].to_unit(float(c[dim])) - opt) ** 2
            parts.append(part)
        return float(np.var(parts))

    moments = {dim: _quadratic_moments(*oc) for dim, oc in cont.items()}
    conditional = space.conditional_dims
    total = 0.0
    for dim, effects in cat_effects.items():
        if dim not in guards:
            total += float(np.var(list(effects.values())))
    for dim, (_, var) in moments.items():
        if dim not in conditional:
            total += var
    if guards:
        (guard,) = guards
        levels = space[guard].levels
        means, variances = [], []
        for lv in levels:
            active = set(space.active_dims({guard: lv})) & conditional
            means.append(cat_effects.get(guard, {}).get(lv, 0.0)
                         + sum(moments[d][0] for d in active if d in moments))
            variances.append(sum(moments[d][1] for d in active if d in moments))
        total += float(np.mean(variances) + np.var(means))
    return total


def calibrate_default(
    space: ConfigurationSpace,
    seed: int,
    *,
    target_eta_sq: float = TARGET_ETA_SQ,
    target_optimum: float = TARGET_OPTIMUM,
    noise_sigma: float = 0.01,
    failure_rate: float = DEFAULT_FAILURE_RATE,
    backbone_dim: str = "backbone",
    encoder_dim: str = "encoder",
    dominant: str | None = None,
) -> LandscapeParams:
    """Random landscape whose backbone x encoder groups explain ~target_eta_sq
    of AP variance under uniform sampling, with one dominant backbone."""
    _require_dims(space, backbone_dim, encoder_dim)
    rng = np.random.default_rng([seed, 0xCA1])
    bb_levels = space[backbone_dim].levels
    enc_levels = space[encoder_dim].levels
    dominant = dominant or bb_levels[0]
    if dominant not in bb_levels:
        raise SpaceError(f"unknown dominant backbone {dominant!r}")

    backbone = {b: float(rng.uniform(-0.30, -0.02)) for b in bb_levels}
    backbone[dominant] = 0.18
    encoder = {e: float(rng.uniform(-0.03, 0.03)) for e in enc_levels}
    interaction = {
        (b, e): float(np.clip(rng.normal(0.0, 0.012), -0.025, 0.025))
        for b in bb_levels for e in enc_levels
    }
    raw_cat = {
        d.name: {lv: float(rng.uniform(-1.0, 1.0)) for lv in d.levels}
        for d in space.categorical if d.name not in (backbone_dim, encoder_dim)
    }
    raw_cont = {
        d.name: (float(rng.uniform(0.2, 0.8)), float(rng.uniform(0.5, 1.5)))
        for d in space.continuous
    }

    unscaled = LandscapeParams(
        backbone, encoder, interaction,
        continuous_response=raw_cont, base_level=0.0, noise_sigma=0.0,
        failure_profile={}, categorical_effects=raw_cat,
        backbone_dim=backbone_dim, encoder_dim=encoder_dim,
    )
    v_between = _group_mean_variance(unscaled, space)

    v_hyper = _hyper_variance(space, raw_cat, raw_cont, seed)
    needed = v_between * (1.0 / target_eta_sq - 1.0) - noise_sigma**2
    scale = float(np.sqrt(max(needed, 0.0) / v_hyper)) if v_hyper > 0 else 0.0

    cat_effects = {k: {lv: scale * v for lv, v in lv_map.items()} for k, lv_map in raw_cat.items()}
    cont = {k: (opt, scale * curv) for k, (opt, curv) in raw_cont.items()}
    best_cat = sum(max(v.values()) for v in cat_effects.values())
    best_arch = max(
        backbone[b] + encoder[e] + interaction[(b, e)] for b in bb_levels for e in enc_levels
    )
    base = target_optimum - best_cat - best_arch
    per_cat = failure_rate
    return LandscapeParams(
        backbone, encoder, interaction,
        continuous_response=cont, base_level=float(base), noise_sigma=noise_sigma,
        failure_profile={c: per_cat for c in FAILURE_CATEGORIES},
        categorical_effects=cat_effects,
        backbone_dim=backbone_dim, encoder_dim=encoder_dim, dominant_backbone=dominant,
    )


def true_optimum(
    params: LandscapeParams, space: ConfigurationSpace, limit: int = 5_000_000
) -> tuple[CellId, float]:
    """Exhaustive scan of discrete cells with continuous dims at their optima."""
    n = discrete_cardinality(space)
    if n > limit:
        raise ValueError(f"cell count {n} exceeds enumeration limit {limit}")
    cats = space.categorical
    total = np.full([len(d.levels) for d in cats], params.base_level, dtype=float)
    for axis, d in enumerate(cats):
        if d.name == params.backbone_dim:
            effects = [params.backbone_effects.get(lv, 0.0) for lv in d.levels]
        elif d.name == params.encoder_dim:
            effects = [params.encoder_effects.get(lv, 0.0) for lv in d.levels]
        else:
            lv_map = params.categorical_effects.get(d.name, {})
            effects = [lv_map.get(lv, 0.0) for lv in d.levels]
        shape = [1] * len(cats)
        shape[axis] = len(d.levels)
        total = total + np.asarray(effects).reshape(shape)
    names = [d.name for d in cats]
    ib, ie = names.index(params.backbone_dim), names.index(params.encoder_dim)
    inter = np.array([
        [params.interaction_effects.get((b, e), 0.0) for e in cats[ie].levels]
        for b in cats[ib].levels
    ])
    shape = [1] * len(cats)
    shape[ib], shape[ie] = inter.shape
    total = total + (inter if ib < ie else inter.T).reshape(shape)
    total = np.clip(total, 0.0, 1.0)
    flat = int(np.argmax(total))
    idx = np.unravel_index(flat, total.shape)
    cell = tuple(d.levels[i] for d, i in zip(cats, idx))
    return cell, float(total[idx])


def optimal_config(params: LandscapeParams, space: ConfigurationSpace, cell: CellId) -> Configuration:
    """The configuration of a cell with every active continuous dim at its optimum."""
    values: dict = dict(zip((d.name for d in space.categorical), cell))
    active = set(space.active_dims(values))
    for d in space.continuous:
        if d.name in active:
            opt = params.continuous_response.get(d.name, (0.5, 0.0))[0]
            values[d.name] = float(d.from_unit(opt))
    return Configuration(values)


class SyntheticOracle:
    def __init__(self, space: ConfigurationSpace, params: LandscapeParams):
        self.space = space
        self.params = params

    def evaluate(self, config: Configuration, rng: np.random.Generator) -> EvalOutcome:
        return evaluate(self.params, config, rng, self.space)

    def true_optimum(self) -> tuple[CellId, float]:
        return true_optimum(self.params, self.space)


@dataclass(frozen=True)
class PoolEntry:
    config: Configuration
    ap: float
    record_id: int
    order: int


class ReplayOracle:
    """Answers evaluations from a recorded campaign by fingerprint lookup."""

    def __init__(self, records: Iterable[ExperimentRecord], space: ConfigurationSpace):
        self.space = space
        self._by_fp: dict = {}
        self.entries: list[PoolEntry] = []
        for order, r in enumerate(records):
            fp = fingerprint(r.config, space)
            prior = self._by_fp.get(fp)
            # a completed record wins over an earlier failure of the same config
            if prior is None or (not prior.completed and r.completed):
                self._by_fp[fp] = r
        for order, r in enumerate(sorted(self._by_fp.values(), key=lambda r: r.id)):
            if r.completed:
                self.entries.append(PoolEntry(r.config, float(r.ap), r.id, order))

    def lookup(self, config: Configuration) -> ExperimentRecord:
        rec = self._by_fp.get(fingerprint(config, self.space))
        if rec is None:
            raise PoolMissError("config not in pool")
        return rec

    def contains(self, config: Configuration) -> bool:
        return fingerprint(config, self.space) in self._by_fp

    def evaluate(self, config: Configuration, rng: np.random.Generator | None = None) -> EvalOutcome:
        rec = self.lookup(config)
        duration = max(1, rec.end_tick - rec.start_tick)
        if rec.completed:
            return EvalOutcome("completed", ap=float(rec.ap), duration_ticks=duration)
        return EvalOutcome("failed", failure_category=rec.failure_category or "missing_file",
                           duration_ticks=duration)


def replay_oracle(records: Iterable[ExperimentRecord], space: ConfigurationSpace) -> ReplayOracle:
    return ReplayOracle(records, space)
