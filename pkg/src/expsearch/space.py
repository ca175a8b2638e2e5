"""Structured configuration spaces.

A space is an ordered list of categorical and continuous dimensions, each
belonging to one of four subspaces (arch, loss, train, data), plus
conditional rules that switch continuous dimensions on for particular
categorical levels (e.g. focal parameters only when ``loss == focal``).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterator, Literal, Mapping

import numpy as np
import yaml

SUBSPACES = ("arch", "loss", "train", "data")
N_BUCKETS = 16

Value = str | float


class SpaceError(ValueError):
    """Raised for malformed space schemas."""


@dataclass(frozen=True)
class DimensionSpec:
    name: str
    kind: Literal["categorical", "continuous"]
    subspace: str
    levels: tuple[str, ...] = ()
    bounds: tuple[float, float] | None = None
    scale: Literal["linear", "log"] = "linear"
    default: Value | None = None
    aliases: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if self.subspace not in SUBSPACES:
            raise SpaceError(f"{self.name}: unknown subspace {self.subspace!r}")
        if self.kind == "categorical":
            if not self.levels:
                raise SpaceError(f"{self.name}: empty level list")
            if len(set(self.levels)) != len(self.levels):
                raise SpaceError(f"{self.name}: duplicate level names")
        elif self.kind == "continuous":
            if self.bounds is None:
                raise SpaceError(f"{self.name}: continuous dimension needs bounds")
            lo, hi = self.bounds
            if not lo < hi:
                raise SpaceError(f"{self.name}: inverted bounds ({lo}, {hi})")
            if self.scale not in ("linear", "log"):
                raise SpaceError(f"{self.name}: unknown scale {self.scale!r}")
            if self.scale == "log" and lo <= 0:
                raise SpaceError(f"{self.name}: logarithmic scale with non-positive bound {lo}")
        else:
            raise SpaceError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_unit(self, value: float) -> float:
        """Map a continuous value into [0, 1] on the dimension's own scale."""
        lo, hi = self.bounds
        if self.scale == "log":
            return (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return (value - lo) / (hi - lo)

    def from_unit(self, u: float | np.ndarray) -> float | np.ndarray:
        lo, hi = self.bounds
        if self.scale == "log":
            return np.exp(np.log(lo) + u * (np.log(hi) - np.log(lo)))
        return lo + u * (hi - lo)

    def canonical_level(self, raw: Any) -> str | None:
        """Resolve a raw level (possibly an alias or a number) to its level name."""
        text = _level_text(raw)
        if text in self.levels:
            return text
        return dict(self.aliases).get(text)

    def bucket(self, value: float) -> int:
        u = self.to_unit(value)
        return min(N_BUCKETS - 1, max(0, int(math.floor(u * N_BUCKETS))))


@dataclass(frozen=True)
class ConditionalRule:
    guard_dim: str
    guard_level: str
    active: tuple[str, ...]


class Configuration(Mapping[str, Value]):
    """Immutable assignment of values to dimension names."""

    __slots__ = ("_items", "_map", "_hash")

    def __init__(self, assignments: Mapping[str, Value] | None = None, **kw: Value):
        data = dict(assignments or {}, **kw)
        self._items = tuple(sorted(data.items()))
        self._map = dict(self._items)
        self._hash = hash(self._items)

    def __getitem__(self, key: str) -> Value:
        return self._map[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._map)

    def __len__(self) -> int:
        return len(self._map)

    def __hash__(self) -> int:
        return self._hash

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Configuration):
            return self._items == other._items
        if isinstance(other, Mapping):
            return self._map == dict(other)
        return NotImplemented

    def __repr__(self) -> str:
        body = ", ".join(f"{k}={v!r}" for k, v in self._items)
        return f"Configuration({body})"

    def replace(self, **changes: Value | None) -> Configuration:
        """Copy with changes; a value of ``None`` removes the key."""
        data = dict(self._map)
        for k, v in changes.items():
            if v is None:
                data.pop(k, None)
            else:
                data[k] = v
        return Configuration(data)


@dataclass(frozen=True)
class Fingerprint:
    pairs: frozenset

    def __len__(self) -> int:
        return len(self.pairs)


@dataclass(frozen=True)
class ConfigurationSpace:
    dimensions: tuple[DimensionSpec, ...]
    conditional_rules: tuple[ConditionalRule, ...] = ()
    name: str = "custom"
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self) -> None:
        names = [d.name for d in self.dimensions]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SpaceError(f"{dupes[0]}: duplicate dimension name")
        self._index.update({d.name: d for d in self.dimensions})
        for rule in self.conditional_rules:
            guard = self._index.get(rule.guard_dim)
            if guard is None or not guard.is_categorical:
                raise SpaceError(f"{rule.guard_dim}: conditional guard must be an existing categorical dimension")
            if rule.guard_level not in guard.levels:
                raise SpaceError(f"{rule.guard_dim}: unknown guard level {rule.guard_level!r}")
            for name in rule.active:
                if name not in self._index:
                    raise SpaceError(f"{name}: conditional rule references unknown dimension")

    def __getitem__(self, name: str) -> DimensionSpec:
        return self._index[name]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dimensions]

    @property
    def categorical(self) -> list[DimensionSpec]:
        return [d for d in self.dimensions if d.is_categorical]

    @property
    def continuous(self) -> list[DimensionSpec]:
        return [d for d in self.dimensions if not d.is_categorical]

    @property
    def conditional_dims(self) -> set[str]:
        return {n for r in self.conditional_rules for n in r.active}

    def active_dims(self, categorical_values: Mapping[str, Value]) -> list[str]:
        """Names of dimensions active given the categorical assignments."""
        switched_on = set()
        for rule in self.conditional_rules:
            if categorical_values.get(rule.guard_dim) == rule.guard_level:
                switched_on.update(rule.active)
        conditional = self.conditional_dims
        return [
            d.name for d in self.dimensions
            if d.name not in conditional or d.name in switched_on
        ]

    def to_dict(self) -> dict:
        dims = []
        for d in self.dimensions:
            entry: dict[str, Any] = {"name": d.name, "kind": d.kind, "subspace": d.subspace}
            if d.is_categorical:
                entry["levels"] = list(d.levels)
                if d.aliases:
                    entry["aliases"] = dict(d.aliases)
            else:
                entry["bounds"] = list(d.bounds)
                entry["scale"] = d.scale
            if d.default is not None:
                entry["default"] = d.default
            dims.append(entry)
        rules = [
            {"when": {r.guard_dim: r.guard_level}, "active": list(r.active)}
            for r in self.conditional_rules
        ]
        return {"name": self.name, "dimensions": dims, "conditional_rules": rules}

    def schema_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _level_text(raw: Any) -> str:
    if isinstance(raw, bool):
        return str(raw).lower()
    if isinstance(raw, float) and raw.is_integer():
        return str(int(raw))
    return str(raw)


def _parse_dimension(entry: Mapping[str, Any]) -> DimensionSpec:
    if not isinstance(entry, Mapping) or "name" not in entry:
        raise SpaceError(f"dimension entry without a name: {entry!r}")
    name = str(entry["name"])
    kind = entry.get("kind")
    subspace = entry.get("subspace")
    if subspace is None:
        raise SpaceError(f"{name}: missing subspace")
    if kind == "categorical":
        levels = tuple(_level_text(x) for x in (entry.get("levels") or ()))
        aliases = tuple(sorted((str(k), _level_text(v)) for k, v in (entry.get("aliases") or {}).items()))
        default = entry.get("default")
        return DimensionSpec(
            name, "categorical", subspace, levels=levels, aliases=aliases,
            default=None if default is None else _level_text(default),
        )
    if kind == "continuous":
        bounds = entry.get("bounds")
        if not isinstance(bounds, (list, tuple)) or len(bounds) != 2:
            raise SpaceError(f"{name}: bounds must be a (low, high) pair")
        default = entry.get("default")
        return DimensionSpec(
            name, "continuous", subspace,
            bounds=(float(bounds[0]), float(bounds[1])),
            scale=entry.get("scale", "linear"),
            default=None if default is None else float(default),
        )
    raise SpaceError(f"{name}: unknown kind {kind!r}")


def space_from_dict(doc: Mapping[str, Any]) -> ConfigurationSpace:
    if not isinstance(doc, Mapping) or "dimensions" not in doc:
        raise SpaceError("schema must be a mapping with a 'dimensions' list")
    dims = tuple(_parse_dimension(e) for e in doc["dimensions"])
    rules = []
    for r in doc.get("conditional_rules") or ():
        when = r.get("when") or {}
        if len(when) != 1:
            raise SpaceError(f"conditional rule needs exactly one guard: {r!r}")
        (gdim, glevel), = when.items()
        rules.append(ConditionalRule(str(gdim), _level_text(glevel), tuple(r.get("active") or ())))
    return ConfigurationSpace(dims, tuple(rules), name=str(doc.get("name", "custom")))


def define_space(schema_document: str) -> ConfigurationSpace:
    """Parse and validate a YAML space schema."""
    try:
        doc = yaml.safe_load(schema_document)
    except yaml.YAMLError as exc:
        raise SpaceError(f"malformed schema document: {exc}") from exc
    return space_from_dict(doc)


def load_space(path: str | Path | None = None) -> ConfigurationSpace:
    """Load a schema file, or the shipped default space when ``path`` is None."""
    if path is None:
        text = resources.files("expsearch").joinpath("data/default_space.yaml").read_text()
    else:
        text = Path(path).read_text()
    return define_space(text)


def default_space() -> ConfigurationSpace:
    return load_space(None)


def discrete_cardinality(space: ConfigurationSpace) -> int:
    return math.prod(len(d.levels) for d in space.categorical)


def sample_uniform(space: ConfigurationSpace, rng: np.random.Generator) -> Configuration:
    values: dict[str, Value] = {}
    for d in space.categorical:
        values[d.name] = d.levels[int(rng.integers(len(d.levels)))]
    active = set(space.active_dims(values))
    for d in space.continuous:
        # draw even for inactive dims so the stream layout is config-independent
        u = rng.random()
        if d.name in active:
            values[d.name] = float(d.from_unit(u))
    return Configuration(values)


def validate(space: ConfigurationSpace, config: Mapping[str, Value]) -> list[str]:
    """Return a list of violations; empty means the configuration is valid."""
    violations = []
    for key in config:
        if key not in space:
            violations.append(f"{key}: unknown dimension")
    cat_values = {d.name: config.get(d.name) for d in space.categorical}
    active = set(space.active_dims(cat_values))
    for d in space.dimensions:
        if d.name not in config:
            if d.name in active:
                violations.append(f"{d.name}: missing assignment")
            continue
        if d.name not in active:
            violations.append(f"{d.name}: inactive dimension assigned")
            continue
        value = config[d.name]
        if d.is_categorical:
            if value not in d.levels:
                violations.append(f"{d.name}: unknown level {value!r}")
        else:
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                violations.append(f"{d.name}: non-numeric value {value!r}")
                continue
            lo, hi = d.bounds
            if not lo <= value <= hi:
                violations.append(f"{d.name}: out of bounds [{lo}, {hi}]")
    return violations


CellId = tuple[str, ...]


def cell_of(space: ConfigurationSpace, config: Mapping[str, Value]) -> CellId:
    try:
        return tuple(str(config[d.name]) for d in space.categorical)
    except KeyError as exc:
        raise SpaceError(f"configuration lacks categorical dimension {exc.args[0]}") from None


def project(space: ConfigurationSpace, config: Mapping[str, Value], dims: tuple[str, ...] | None) -> tuple:
    """Projection of a configuration onto a subset of categorical dims."""
    if dims is None:
        return cell_of(space, config)
    return tuple(str(config.get(name)) for name in dims)


def enumerate_cells(space: ConfigurationSpace) -> Iterator[CellId]:
    return itertools.product(*(d.levels for d in space.categorical))


def fingerprint(config: Mapping[str, Value], space: ConfigurationSpace) -> Fingerprint:
    pairs = set()
    for d in space.dimensions:
        if d.name not in config:
            continue
        if d.is_categorical:
            pairs.add((d.name, str(config[d.name])))
        else:
            pairs.add((d.name, d.bucket(float(config[d.name]))))
    return Fingerprint(frozenset(pairs))


def jaccard(f1: Fingerprint, f2: Fingerprint) -> float:
    a, b = f1.pairs, f2.pairs
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
