"""Experiment records and the append-only campaign history."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Literal

from .space import Configuration, ConfigurationSpace, Fingerprint, fingerprint

UNATTRIBUTED = "unattributed"
SOURCES = ("llm", "sweep", "random", "tpe", "oracle_policy", "pool_random", "replacement", "external")
STATUSES = ("completed", "failed", "abandoned")
FAILURE_CATEGORIES = ("nan_loss", "oom", "missing_file")


def round_ap(ap: float) -> float:
    """Canonical 9-significant-digit AP so logs round-trip byte-for-byte."""
    return float(f"{ap:.9g}")


@dataclass(frozen=True)
class ExperimentRecord:
    id: int
    config: Configuration
    status: Literal["completed", "failed", "abandoned"]
    agent: str = UNATTRIBUTED
    cycle: int = 0
    parent_id: int | None = None
    source: str = "random"
    ap: float | None = None
    failure_category: str | None = None
    heal_attempts: int = 0
    submit_tick: int = 0
    start_tick: int = 0
    end_tick: int = 0
    notes: tuple[str, ...] = ()
    extras: tuple[tuple[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.status not in STATUSES:
            raise ValueError(f"record {self.id}: unknown status {self.status!r}")
        if self.status == "completed":
            if self.ap is None or not (0.0 <= self.ap <= 1.0) or math.isnan(self.ap):
                raise ValueError(f"record {self.id}: completed record needs ap in [0, 1]")
        if not self.submit_tick <= self.start_tick <= self.end_tick:
            raise ValueError(f"record {self.id}: ticks out of order")

    @property
    def completed(self) -> bool:
        return self.status == "completed"

    def with_(self, **changes: Any) -> ExperimentRecord:
        return replace(self, **changes)


def completion_order(records: Iterable[ExperimentRecord]) -> list[ExperimentRecord]:
    return sorted(records, key=lambda r: (r.end_tick, r.id))


@dataclass
class History:
    """Append-only experiment log kept in id (submit) order.

    Records arrive at completion; with several workers an earlier-submitted
    experiment can finish later, so insertion uses the id position. Nothing
    is ever modified or removed.
    """

    space: ConfigurationSpace | None = None
    records: list[ExperimentRecord] = field(default_factory=list)
    truncated: bool = False
    truncation_reason: str | None = None
    cycles: list[dict] = field(default_factory=list)
    _ids: list[int] = field(default_factory=list, repr=False)
    _by_fp: dict = field(default_factory=dict, repr=False)
    _done_keys: list = field(default_factory=list, repr=False)
    _done: list = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        initial, self.records = self.records, []
        for r in initial:
            self.append(r)

    def append(self, record: ExperimentRecord) -> None:
        pos = bisect.bisect_left(self._ids, record.id)
        if pos < len(self._ids) and self._ids[pos] == record.id:
            raise ValueError(f"duplicate record id {record.id}")
        self._ids.insert(pos, record.id)
        self.records.insert(pos, record)
        key = (record.end_tick, record.id)
        cpos = bisect.bisect_right(self._done_keys, key)
        self._done_keys.insert(cpos, key)
        self._done.insert(cpos, record)
        if self.space is not None:
            self._by_fp.setdefault(fingerprint(record.config, self.space), []).append(record.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[ExperimentRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> ExperimentRecord:
        return self.records[i]

    def by_fingerprint(self, fp: Fingerprint) -> list[int]:
        return list(self._by_fp.get(fp, ()))

    def fingerprints(self) -> list[Fingerprint]:
        return list(self._by_fp)

    def completed(self) -> list[ExperimentRecord]:
        return [r for r in self._done if r.completed]

    def in_completion_order(self) -> list[ExperimentRecord]:
        return list(self._done)


def leaderboard(records: Iterable[ExperimentRecord], k: int) -> list[ExperimentRecord]:
    """Top-k completed records by AP; ties go to the earlier end_tick, then id."""
    done = [r for r in records if r.completed]
    done.sort(key=lambda r: (-r.ap, r.end_tick, r.id))
    return done[: max(0, k)]
