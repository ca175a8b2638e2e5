"""Multi-agent campaign runner.

Time advances in integer ticks. Each agent cycle reads a snapshot of the
history, proposes ideas, and the orchestrator deduplicates, balances and
queues them; workers pull the highest-priority item and finish after the
oracle's duration. Completions are merged by (end_tick, id), which keeps
multi-worker runs deterministic.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Literal, Mapping, Sequence

import numpy as np
import yaml

from .oracle import EvalOutcome, Oracle, PoolExhaustedError, ReplayOracle
from .policies.base import (
    PRIORITY_RANK,
    DiversityBudget,
    Proposal,
    RecordPool,
    expand_sweep,
    propose_oracle_policy,
    propose_pool_random,
    propose_random,
    propose_random_excluding,
)
from .policies.ideas import HttpPolicyEndpoint, PolicyEndpoint, encode_context, propose_llm
from .policies.tpe import TpeEncoder, TpeParams, propose_pool_tpe, propose_tpe
from .records import ExperimentRecord, History, leaderboard, round_ap
from .space import Configuration, ConfigurationSpace, Fingerprint, fingerprint

log = logging.getLogger(__name__)

POLICIES = ("random", "tpe", "llm", "pool_random", "pool_tpe", "oracle_policy")
POOL_POLICIES = ("pool_random", "pool_tpe", "oracle_policy")

__all__ = [
    "AgentSpec", "CampaignConfig", "QueueItem", "Remedy", "FingerprintIndex",
    "dedup_filter", "enforce_diversity", "schedule", "self_heal", "leaderboard",
    "run_campaign", "replay_campaign", "execution_rate",
]


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class AgentSpec:
    name: str
    policy: str = "random"
    ideas_per_cycle: int = 4
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.policy not in POLICIES:
            raise ValueError(f"agent {self.name}: unknown policy {self.policy!r}")
        if self.ideas_per_cycle < 1:
            raise ValueError(f"agent {self.name}: ideas_per_cycle must be >= 1")


@dataclass(frozen=True)
class CampaignConfig:
    n_steps: int
    n_workers: int = 1
    dedup_threshold: float = 0.9
    agents: tuple[AgentSpec, ...] = (AgentSpec("random"),)
    diversity_budget: DiversityBudget = field(default_factory=DiversityBudget)
    heal_max_retries: int = 2
    seed: int = 0
    banned_m: int = 10
    context_k: int = 5
    max_stalled_cycles: int = 50

    def __post_init__(self) -> None:
        if self.n_steps < 0:
            raise ValueError("n_steps must be >= 0")
        if self.n_workers < 1:
            raise ValueError("n_workers must be >= 1")
        if not 0.0 <= self.dedup_threshold <= 1.0:
            raise ValueError("dedup_threshold must lie in [0, 1]")
        if self.heal_max_retries < 0:
            raise ValueError("heal_max_retries must be >= 0")
        if not self.agents:
            raise ValueError("at least one agent is required")
        if len({a.name for a in self.agents}) != len(self.agents):
            raise ValueError("agent names must be unique")

    @classmethod
    def from_mapping(cls, d: Mapping[str, Any]) -> CampaignConfig:
        d = dict(d)
        agents = tuple(
            AgentSpec(
                str(a["name"]), str(a.get("policy", "random")), int(a.get("ideas_per_cycle", 4)),
                dict(a.get("params") or {}),
            )
            for a in d.pop("agents", [{"name": "random"}])
        )
        budget = DiversityBudget.from_mapping(d.pop("diversity_budget", None)) if "diversity_budget" in d \
            else DiversityBudget()
        aliases = {"steps": "n_steps", "workers": "n_workers", "heal_retries": "heal_max_retries"}
        kw = {aliases.get(k, k): v for k, v in d.items()}
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown campaign keys: {sorted(unknown)}")
        return cls(agents=agents, diversity_budget=budget, **kw)

    @classmethod
    def load(cls, path: str | Path) -> CampaignConfig:
        return cls.from_mapping(yaml.safe_load(Path(path).read_text()) or {})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["agents"] = [
            {"name": a.name, "policy": a.policy, "ideas_per_cycle": a.ideas_per_cycle, "params": dict(a.params)}
            for a in self.agents
        ]
        d["diversity_budget"] = {
            "min_non_modal": dict(self.diversity_budget.min_non_modal),
            "window": self.diversity_budget.window,
        }
        return d


# ---------------------------------------------------------------- dedup


class FingerprintIndex:
    """Near-duplicate lookup under Jaccard similarity.

    A fingerprint holds at most one token per dimension, so each one is
    stored as a row of per-dimension value codes (-1 where absent) and the
    overlap with every stored row is a single vectorized comparison.
    """

    def __init__(self, threshold: float):
        self.threshold = threshold
        self._exact: set[Fingerprint] = set()
        self._cols: dict[str, int] = {}
        self._vals: list[dict] = []
        self._rows = np.full((256, 0), -1, dtype=np.int32)
        self._sizes = np.zeros(256, dtype=np.int32)
        self._n = 0

    def _encode(self, fp: Fingerprint, grow: bool) -> np.ndarray | None:
        row = np.full(len(self._cols) + len(fp.pairs), -1, dtype=np.int32)
        for dim, value in fp.pairs:
            col = self._cols.get(dim)
            if col is None:
                if not grow:
                    return None  # an unseen dimension: overlap computed below
                col = self._cols[dim] = len(self._cols)
                self._vals.append({})
            if row[col] != -1:
                raise ValueError(f"fingerprint has two tokens for {dim!r}")
            codes = self._vals[col]
            code = codes.get(value)
            if code is None:
                code = len(codes) if grow else -2
                if grow:
                    codes[value] = code
            row[col] = code
        return row[: len(self._cols)]

    def add(self, fp: Fingerprint) -> None:
        if fp in self._exact:
            return
        self._exact.add(fp)
        row = self._encode(fp, grow=True)
        if self._n == self._rows.shape[0] or self._rows.shape[1] < row.size:
            cap = max(256, self._rows.shape[0] * (2 if self._n == self._rows.shape[0] else 1))
            rows = np.full((cap, row.size), -1, dtype=np.int32)
            rows[: self._n, : self._rows.shape[1]] = self._rows[: self._n]
            sizes = np.zeros(cap, dtype=np.int32)
            sizes[: self._n] = self._sizes[: self._n]
            self._rows, self._sizes = rows, sizes
        self._rows[self._n, : row.size] = row
        self._sizes[self._n] = len(fp.pairs)
        self._n += 1

    def is_duplicate(self, fp: Fingerprint) -> bool:
        """True when some indexed fingerprint has similarity strictly above the threshold."""
        if self.threshold >= 1.0 or self._n == 0:
            return False
        if fp in self._exact:
            return True
        na = len(fp.pairs)
        if na == 0:
            return bool(np.any(self._sizes[: self._n] == 0))
        # tokens on dimensions never indexed cannot overlap anything
        known = Fingerprint(frozenset(p for p in fp.pairs if p[0] in self._cols))
        row = self._encode(known, grow=False)
        width = self._rows.shape[1]
        probe = np.full(width, -1, dtype=np.int32)
        probe[: row.size] = row
        present = probe >= 0
        inter = (self._rows[: self._n, present] == probe[present]).sum(axis=1)
        union = na + self._sizes[: self._n] - inter
        return bool(np.any(inter > self.threshold * union))

    def __len__(self) -> int:
        return self._n


def dedup_filter(
    proposals: Sequence[Proposal],
    history: Iterable[ExperimentRecord],
    queue: Iterable[Proposal | Configuration],
    threshold: float,
    space: ConfigurationSpace,
    index: FingerprintIndex | None = None,
) -> tuple[list[Proposal], list[Proposal]]:
    """Reject proposals whose similarity to anything seen strictly exceeds
    ``threshold``. Accepted proposals are added to the seen set as they pass,
    so the accepted batch is mutually non-duplicate."""
    if index is None:
        index = FingerprintIndex(threshold)
        for r in history:
            index.add(fingerprint(r.config, space))
        for q in queue:
            index.add(fingerprint(q.config if isinstance(q, Proposal) else q, space))
    accepted, rejected = [], []
    for p in proposals:
        fp = fingerprint(p.config, space)
        if index.is_duplicate(fp):
            rejected.append(p)
        else:
            index.add(fp)
            accepted.append(p)
    return accepted, rejected


# ---------------------------------------------------------------- diversity


def modal_levels(records: Sequence[ExperimentRecord], budget: DiversityBudget) -> dict[str, str]:
    recent = list(records)[-budget.window:] if budget.window else list(records)
    out = {}
    for dim, _ in budget.min_non_modal:
        counts: dict[str, int] = {}
        first: dict[str, int] = {}
        for i, r in enumerate(recent):
            if dim in r.config:
                lv = str(r.config[dim])
                counts[lv] = counts.get(lv, 0) + 1
                first.setdefault(lv, i)
        if counts:
            out[dim] = min(counts, key=lambda lv: (-counts[lv], first[lv]))
    return out


def enforce_diversity(
    proposals: Sequence[Proposal],
    history: Sequence[ExperimentRecord],
    budget: DiversityBudget,
) -> tuple[list[Proposal], list[tuple[str, str]]]:
    """Drop modal proposals where the budget is short and return one
    ``(dim, excluded level)`` replacement request per missing slot.

    The lowest-priority, latest modal proposal is replaced first. With no
    history there is no modal level and nothing to balance.
    """
    kept = list(proposals)
    if not kept:
        return kept, []
    modal = modal_levels(history, budget)
    requests: list[tuple[str, str]] = []
    for dim, need in budget.min_non_modal:
        if dim not in modal:
            continue
        have = sum(1 for p in kept if str(p.config.get(dim)) != modal[dim])
        have += sum(1 for d, _ in requests if d == dim)
        for _ in range(max(0, need - have)):
            victims = [i for i, p in enumerate(kept) if str(p.config.get(dim)) == modal[dim]]
            if not victims:
                break
            drop = max(victims, key=lambda i: (kept[i].rank, i))
            kept.pop(drop)
            requests.append((dim, modal[dim]))
    return kept, requests


# ---------------------------------------------------------------- queue


@dataclass
class QueueItem:
    id: int
    proposal: Proposal
    agent: str
    cycle: int
    submit_tick: int
    heal_attempts: int = 0
    parent_id: int | None = None
    notes: tuple[str, ...] = ()

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.proposal.rank, self.submit_tick, self.id)


def schedule(queue: list[QueueItem], free_workers: int, tick: int | None = None) -> list[QueueItem]:
    """Pop up to ``free_workers`` items: highest priority first, then FIFO."""
    if free_workers <= 0 or not queue:
        return []
    queue.sort(key=lambda q: q.sort_key)
    assigned = queue[:free_workers]
    del queue[:free_workers]
    return assigned


# ---------------------------------------------------------------- self-heal


@dataclass(frozen=True)
class Remedy:
    action: Literal["requeue", "abandon"]
    config: Configuration | None = None
    note: str = ""


def self_heal(
    record: ExperimentRecord,
    failure_category: str,
    attempt: int,
    space: ConfigurationSpace,
    max_retries: int,
    prior_categories: Sequence[str] = (),
) -> Remedy:
    """Map a failure category to a remedy.

    oom halves the batch size, nan_loss requeues with a gradient guard,
    missing_file requeues unchanged once. Beyond ``max_retries`` heals, or
    when no remedy applies, the experiment is abandoned.
    """
    if attempt >= max_retries:
        return Remedy("abandon", note=f"retry limit {max_retries} reached")
    config = record.config
    if failure_category == "oom":
        if "batch_size" not in space or "batch_size" not in config:
            return Remedy("abandon", note="oom without a batch size to reduce")
        levels = sorted(space["batch_size"].levels, key=float)
        current = float(config["batch_size"])
        smaller = [lv for lv in levels if float(lv) <= current / 2]
        if smaller:
            new = smaller[-1]
        elif float(levels[0]) < current:
            new = levels[0]
        else:
            return Remedy("abandon", note="oom at smallest batch size")
        return Remedy("requeue", config.replace(batch_size=new), f"oom: batch_size {config['batch_size']} -> {new}")
    if failure_category == "nan_loss":
        return Remedy("requeue", config, "nan_loss: grad_guard enabled")
    if failure_category == "missing_file":
        if "missing_file" in prior_categories:
            return Remedy("abandon", note="missing_file persisted after requeue")
        return Remedy("requeue", config, "missing_file: requeued unchanged")
    return Remedy("abandon", note=f"no remedy for {failure_category!r}")


# ---------------------------------------------------------------- agents


@dataclass
class AgentOutput:
    proposals: list[Proposal]
    idea_rejections: int = 0
    errors: list[str] = field(default_factory=list)
    exhausted: bool = False


class _Agent:
    def __init__(
        self,
        spec: AgentSpec,
        space: ConfigurationSpace,
        config: CampaignConfig,
        pool: RecordPool | None,
        endpoint: PolicyEndpoint | None,
        rng: np.random.Generator,
    ):
        self.spec = spec
        self.space = space
        self.config = config
        self.pool = pool
        self.endpoint = endpoint
        self.rng = rng
        params = dict(spec.params)
        self.sweep = params.pop("sweep", None)
        self.tpe = TpeParams(**params.get("tpe", {})) if spec.policy in ("tpe", "pool_tpe") else None
        self.encoder = TpeEncoder(space) if self.tpe else None
        if spec.policy in POOL_POLICIES and pool is None:
            raise ValueError(f"agent {spec.name}: policy {spec.policy} needs a replay oracle")
        if spec.policy == "llm" and endpoint is None:
            self.endpoint = HttpPolicyEndpoint.from_env(
                float(params.get("timeout", 60.0)), int(params.get("retries", 2))
            )

    exclude: Callable[[Configuration], bool] | None = None

    def propose(self, snapshot: list[ExperimentRecord]) -> AgentOutput:
        n = self.spec.ideas_per_cycle
        policy = self.spec.policy
        if policy == "random":
            return AgentOutput([propose_random(self.space, self.rng) for _ in range(n)])
        if policy == "tpe":
            return AgentOutput(propose_tpe(snapshot, self.space, self.tpe, self.rng, n, self.encoder, self.exclude))
        if policy == "llm":
            context = encode_context(
                snapshot, self.space, self.config.context_k, self.config.diversity_budget, self.config.banned_m
            )
            res = propose_llm(context, self.endpoint, self.space, n, self.rng)
            return AgentOutput(res.proposals, len(res.rejections), [res.error] if res.error else [])
        out = AgentOutput([])
        for _ in range(n):
            try:
                if policy == "pool_random":
                    out.proposals.append(propose_pool_random(self.pool, self.rng))
                elif policy == "pool_tpe":
                    out.proposals.append(propose_pool_tpe(self.pool, snapshot, self.space, self.tpe, self.rng, self.encoder))
                else:
                    out.proposals.append(propose_oracle_policy(self.pool))
            except PoolExhaustedError:
                out.exhausted = True
                break
        return out


# ---------------------------------------------------------------- campaign


def execution_rate(history: History) -> float:
    """Executed proposals over generated ones; heal retries are not new proposals."""
    generated = sum(c["generated"] for c in history.cycles)
    executed = sum(1 for r in history if r.heal_attempts == 0)
    return executed / generated if generated else float("nan")


def run_campaign(
    space: ConfigurationSpace,
    oracle: Oracle,
    config: CampaignConfig,
    endpoints: Mapping[str, PolicyEndpoint] | None = None,
    on_record: Callable[[ExperimentRecord], None] | None = None,
) -> History:
    """Run agents against ``oracle`` until ``n_steps`` experiments have finished.

    Stops early with ``history.truncated`` set when a replay pool runs dry or
    when ``max_stalled_cycles`` consecutive cycles add nothing to the queue.
    """
    history = History(space)
    if config.n_steps == 0:
        return history
    endpoints = endpoints or {}
    pool = RecordPool(oracle.entries) if isinstance(oracle, ReplayOracle) else None
    agents = [
        _Agent(spec, space, config, pool, endpoints.get(spec.name),
               np.random.default_rng([config.seed, 1, i]))
        for i, spec in enumerate(config.agents)
    ]
    diversity_rng = np.random.default_rng([config.seed, 2, 0])
    index = FingerprintIndex(config.dedup_threshold)
    for agent in agents:
        agent.exclude = lambda c: index.is_duplicate(fingerprint(c, space))

    queue: list[QueueItem] = []
    running: list[tuple[int, int, QueueItem, EvalOutcome, int]] = []
    tick = 0
    next_id = 1
    cycle_no = 0
    finished = 0
    stalled = 0
    exhausted = False
    lineage_failures: dict[int, tuple[str, ...]] = {}
    runnable = oracle.contains if isinstance(oracle, ReplayOracle) else None

    def enqueue(p: Proposal, agent: str, cycle: int, **kw: Any) -> QueueItem:
        nonlocal next_id
        item = QueueItem(next_id, p, agent, cycle, tick, **kw)
        next_id += 1
        queue.append(item)
        return item

    def run_cycle() -> int:
        nonlocal cycle_no, exhausted
        agent = agents[cycle_no % len(agents)]
        cycle_no += 1
        snapshot = history.in_completion_order()
        out = agent.propose(snapshot)
        if out.exhausted:
            exhausted = True
        accepted, rejected = dedup_filter(out.proposals, (), (), config.dedup_threshold, space, index)
        kept, requests = enforce_diversity(accepted, snapshot, config.diversity_budget)
        # proposals dropped for diversity already entered the index; that only
        # makes later near-copies of them rejectable, never admits duplicates
        replacements = []
        # replacements are uniform draws, which a replay pool cannot evaluate
        for dim, excluded in (requests if pool is None else ()):
            for _ in range(20):
                rep = propose_random_excluding(space, diversity_rng, dim, excluded)
                got, _ = dedup_filter([rep], (), (), config.dedup_threshold, space, index)
                if got:
                    replacements.append(got[0])
                    break
        generated = len(out.proposals)
        added = 0
        swept = 0
        for p in kept + replacements:
            item = enqueue(p, agent.spec.name, cycle_no)
            added += 1
            if agent.sweep and p.source != "replacement":
                children = expand_sweep(p, agent.sweep, space, base_id=item.id)
                generated += len(children)
                ok, bad = dedup_filter(children, (), (), config.dedup_threshold, space, index)
                rejected.extend(bad)
                for c in ok:
                    enqueue(c, agent.spec.name, cycle_no, parent_id=item.id)
                    added += 1
                    swept += 1
        history.cycles.append({
            "cycle": cycle_no,
            "agent": agent.spec.name,
            "tick": tick,
            "generated": generated,
            "accepted": len(kept) + swept,
            "rejected": len(rejected),
            "replaced": len(accepted) - len(kept),
            "replacements_added": len(replacements),
            "idea_rejections": out.idea_rejections,
            "errors": list(out.errors),
        })
        return added

    while finished < config.n_steps:
        free = config.n_workers - len(running)
        pending = finished + len(running) + len(queue)
        while not exhausted and not history.truncated and len(queue) < free and pending < config.n_steps:
            added = run_cycle()
            pending += added
            if added == 0:
                stalled += 1
                if stalled >= config.max_stalled_cycles:
                    history.truncated = True
                    history.truncation_reason = f"no new proposals in {stalled} consecutive cycles"
                    break
            else:
                stalled = 0
        if history.truncated and not queue and not running:
            break

        capacity = min(free, config.n_steps - finished - len(running))
        for item in schedule(queue, capacity, tick):
            outcome = oracle.evaluate(item.proposal.config, np.random.default_rng([config.seed, item.id]))
            heapq.heappush(running, (tick + outcome.duration_ticks, item.id, item, outcome, tick))

        if not running:
            if exhausted or history.truncated:
                history.truncated = True
                history.truncation_reason = history.truncation_reason or "pool exhausted"
                break
            continue

        end, _, item, outcome, start = heapq.heappop(running)
        tick = end
        record = _finish(item, outcome, start, end, space, config, lineage_failures, enqueue, runnable)
        history.append(record)
        finished += 1
        if on_record is not None:
            on_record(record)

    if exhausted and finished < config.n_steps:
        history.truncated = True
        history.truncation_reason = history.truncation_reason or "pool exhausted"
    return history


def _finish(item, outcome, start, end, space, config, lineage_failures, enqueue, runnable=None) -> ExperimentRecord:
    p = item.proposal
    base = dict(
        id=item.id, config=p.config, agent=item.agent, cycle=item.cycle,
        parent_id=item.parent_id if item.parent_id is not None else p.parent_id,
        source=p.source, heal_attempts=item.heal_attempts, submit_tick=item.submit_tick,
        start_tick=start, end_tick=end, notes=item.notes,
    )
    if outcome.status == "completed":
        return ExperimentRecord(status="completed", ap=round_ap(outcome.ap), **base)
    category = outcome.failure_category
    prior = lineage_failures.pop(item.id, ())
    failed = ExperimentRecord(status="failed", failure_category=category, **base)
    if config.heal_max_retries == 0:
        return failed
    remedy = self_heal(failed, category, item.heal_attempts, space, config.heal_max_retries, prior)
    if remedy.action == "abandon":
        return failed.with_(status="abandoned", notes=item.notes + (remedy.note,))
    if runnable is not None and not runnable(remedy.config):
        return failed.with_(status="abandoned", notes=item.notes + (remedy.note, "retry config not in replay pool"))
    retry = enqueue(
        Proposal(remedy.config, p.priority, p.rationale, p.source, p.parent_id, p.idea_name),
        item.agent, item.cycle, heal_attempts=item.heal_attempts + 1, parent_id=item.id,
        notes=item.notes + (remedy.note,),
    )
    lineage_failures[retry.id] = prior + (category,)
    return failed


def replay_campaign(
    space: ConfigurationSpace,
    records: Iterable[ExperimentRecord],
    policy: str,
    n_steps: int | None = None,
    seed: int = 0,
    tpe: Mapping[str, Any] | None = None,
) -> History:
    """Re-run a recorded campaign's configurations under a pool policy, one
    worker, no dedup or diversity rules; AP comes from the recorded results."""
    if policy not in POOL_POLICIES:
        raise ValueError(f"replay needs a pool policy, got {policy!r}")
    oracle = ReplayOracle(records, space)
    steps = len(oracle.entries) if n_steps is None else min(n_steps, len(oracle.entries))
    params = {"tpe": dict(tpe)} if tpe else {}
    cfg = CampaignConfig(
        n_steps=steps, n_workers=1, dedup_threshold=1.0,
        agents=(AgentSpec(policy, policy, 1, params),),
        diversity_budget=DiversityBudget(()), heal_max_retries=0, seed=seed,
    )
    return run_campaign(space, oracle, cfg)
