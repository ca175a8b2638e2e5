"""Proposals, uniform and pool-based policies, and sweep expansion."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from ..oracle import PoolEntry, PoolExhaustedError
from ..space import Configuration, ConfigurationSpace, sample_uniform, validate

log = logging.getLogger(__name__)

Priority = Literal["low", "medium", "high"]
PRIORITY_RANK = {"high": 0, "medium": 1, "low": 2}


@dataclass(frozen=True)
class Proposal:
    config: Configuration
    priority: Priority = "medium"
    rationale: str = ""
    source: str = "random"
    parent_id: int | None = None
    idea_name: str = ""

    @property
    def rank(self) -> int:
        return PRIORITY_RANK[self.priority]


@dataclass(frozen=True)
class DiversityBudget:
    """Per-cycle minimum number of proposals that avoid the modal level of a dim."""

    min_non_modal: tuple[tuple[str, int], ...] = (("backbone", 1), ("encoder", 1))
    window: int = 50

    @classmethod
    def from_mapping(cls, d: Mapping | None) -> DiversityBudget:
        if not d:
            return cls(())
        rules = d.get("min_non_modal", d)
        window = int(d.get("window", 50)) if "min_non_modal" in d else 50
        return cls(tuple((str(k), int(v)) for k, v in rules.items()), window)


def propose_random(space: ConfigurationSpace, rng: np.random.Generator, source: str = "random") -> Proposal:
    return Proposal(sample_uniform(space, rng), "medium", "uniform sample", source)


def propose_random_excluding(
    space: ConfigurationSpace, rng: np.random.Generator, dim: str, excluded: str
) -> Proposal:
    """Uniform sample conditioned on ``dim`` avoiding one level."""
    levels = [lv for lv in space[dim].levels if lv != excluded]
    base = sample_uniform(space, rng)
    level = levels[int(rng.integers(len(levels)))]
    config = base.replace(**{dim: level})
    if validate(space, config):
        # the swap changed conditional activation; resample the active set
        values = {d.name: config[d.name] for d in space.categorical}
        fresh = sample_uniform(space, rng)
        active = set(space.active_dims(values))
        for d in space.continuous:
            if d.name in active:
                values[d.name] = fresh.get(d.name, float(d.from_unit(rng.random())))
        config = Configuration(values)
    return Proposal(config, "medium", f"diversity: non-{excluded} {dim}", "replacement")


class RecordPool:
    """Finite set of already-evaluated (configuration, AP) pairs."""

    def __init__(self, entries: Iterable[PoolEntry]):
        self.entries = list(entries)
        self._remaining = list(range(len(self.entries)))

    def __len__(self) -> int:
        return len(self._remaining)

    @property
    def remaining(self) -> list[PoolEntry]:
        return [self.entries[i] for i in self._remaining]

    def take(self, position: int) -> PoolEntry:
        return self.entries[self._remaining.pop(position)]

    def max_ap(self) -> float:
        return max(e.ap for e in self.entries)


def _pool_proposal(entry: PoolEntry, source: str) -> Proposal:
    return Proposal(entry.config, "medium", f"pool record {entry.record_id}", source)


def propose_pool_random(pool: RecordPool, rng: np.random.Generator, without_replacement: bool = True) -> Proposal:
    if not len(pool):
        raise PoolExhaustedError("pool exhausted")
    pos = int(rng.integers(len(pool)))
    entry = pool.take(pos) if without_replacement else pool.remaining[pos]
    return _pool_proposal(entry, "pool_random")


def propose_oracle_policy(pool: RecordPool, already_run: set[int] | None = None) -> Proposal:
    """Best remaining pool entry; ties go to the earliest record."""
    already_run = already_run or set()
    best_pos = None
    for pos, i in enumerate(pool._remaining):
        e = pool.entries[i]
        if e.record_id in already_run:
            continue
        if best_pos is None or e.ap > pool.entries[pool._remaining[best_pos]].ap:
            best_pos = pos
    if best_pos is None:
        raise PoolExhaustedError("pool exhausted")
    return _pool_proposal(pool.take(best_pos), "oracle_policy")


def _sweep_value(base_value, raw, dim_spec):
    if isinstance(raw, str) and raw[:1] in ("x", "*") and not dim_spec.is_categorical:
        return float(base_value) * float(raw[1:])
    if dim_spec.is_categorical:
        return dim_spec.canonical_level(raw) or str(raw)
    return float(raw)


def expand_sweep(
    base: Proposal,
    sweep_spec: Mapping[str, Sequence],
    space: ConfigurationSpace,
    base_id: int | None = None,
) -> list[Proposal]:
    """Grid expansion of ``base`` over the listed dimensions.

    Values may be absolute or relative multipliers written ``"x0.5"``.
    Children that would be invalid (out of bounds, inactive dim) are dropped.
    """
    for dim in sweep_spec:
        if dim not in space:
            raise KeyError(f"sweep dimension {dim!r} not in space")
    dims = [d for d in sweep_spec if sweep_spec[d]]
    if not dims:
        return []
    children = []
    for combo in itertools.product(*(sweep_spec[d] for d in dims)):
        changes = {}
        for dim, raw in zip(dims, combo):
            base_value = base.config.get(dim)
            if base_value is None and isinstance(raw, str) and raw[:1] in ("x", "*"):
                break
            changes[dim] = _sweep_value(base_value, raw, space[dim])
        else:
            config = base.config.replace(**changes)
            problems = validate(space, config)
            if problems:
                log.debug("dropping sweep child %s: %s", changes, problems)
                continue
            label = ", ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in changes.items())
            children.append(Proposal(
                config, base.priority, f"sweep of {base.idea_name or 'base'}: {label}", "sweep",
                parent_id=base_id, idea_name=f"{base.idea_name} [{label}]".strip(),
            ))
    return children


@dataclass
class ProposalBatch:
    proposals: list[Proposal] = field(default_factory=list)
    rejections: list = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
