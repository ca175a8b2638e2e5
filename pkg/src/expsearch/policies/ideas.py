"""History-context encoding and the YAML idea interchange used by external
(language-model) policies."""

from __future__ import annotations

import logging
import os
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Sequence

import numpy as np
import yaml

from ..records import ExperimentRecord, leaderboard
from ..space import Configuration, ConfigurationSpace, cell_of, validate
from .base import PRIORITY_RANK, DiversityBudget, Proposal, propose_random

log = logging.getLogger(__name__)

REQUIRED_KEYS = (
    "idea_name", "backbone", "temporal_encoder", "loss",
    "learning_rate", "batch_size", "seq_len", "epochs",
)
# idea-document key -> space dimension
KEY_MAP = {"temporal_encoder": "encoder", "loss_type": "loss"}
DIM_TO_KEY = {v: k for k, v in KEY_MAP.items() if k != "loss_type"}
META_KEYS = ("idea_name", "priority", "rationale")

URL_ENV = "EXPSEARCH_POLICY_URL"
TOKEN_ENV = "EXPSEARCH_POLICY_TOKEN"


class IdeaParseError(ValueError):
    """The idea document as a whole could not be read."""


@dataclass(frozen=True)
class IdeaRejection:
    index: int
    idea_name: str
    reasons: tuple[str, ...]


@dataclass
class ParsedIdeas:
    proposals: list[Proposal] = field(default_factory=list)
    rejections: list[IdeaRejection] = field(default_factory=list)


# ---------------------------------------------------------------- context


def _fmt_value(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.3g}"
    return str(v)


def _loss_label(config: Mapping) -> str:
    loss = str(config.get("loss"))
    if loss == "focal" and "focal_gamma" in config:
        return f"focal g={float(config['focal_gamma']):.1f}"
    if loss == "label_smoothing" and "smoothing_eps" in config:
        return f"label_smoothing e={float(config['smoothing_eps']):.2f}"
    return loss


def _modal_level(records: Sequence[ExperimentRecord], dim: str) -> str | None:
    counts = Counter(str(r.config.get(dim)) for r in records if dim in r.config)
    if not counts:
        return None
    # most common; ties go to the level seen first
    best = max(counts.values())
    for r in records:
        if counts.get(str(r.config.get(dim))) == best:
            return str(r.config.get(dim))
    return None


def budget_lines(records: Sequence[ExperimentRecord], budget: DiversityBudget) -> list[str]:
    recent = list(records)[-budget.window:] if budget.window else list(records)
    lines = []
    for dim, count in budget.min_non_modal:
        modal = _modal_level(recent, dim) or "modal"
        plural = "idea" if count == 1 else "ideas"
        lines.append(f"- At least {count} {plural} must use a non-{modal} {dim}")
    return lines


def banned_fingerprint_records(records: Sequence[ExperimentRecord], m: int = 10) -> list[ExperimentRecord]:
    failed = [r for r in records if r.status in ("failed", "abandoned")]
    return failed[-m:] if m > 0 else []


def encode_context(
    history: Sequence[ExperimentRecord],
    space: ConfigurationSpace,
    k: int = 5,
    budget: DiversityBudget | None = None,
    m: int = 10,
    recent_window: int = 50,
) -> str:
    """Render the history snapshot as the prompt context of an idea request."""
    records = list(history)
    budget = budget if budget is not None else DiversityBudget()
    out = [f"## Current Leaderboard (Top {k})",
           "| Rank | AP | Backbone | Encoder | Loss | LR | Batch |",
           "|------|----|----------|---------|------|----|-------|"]
    for rank, r in enumerate(leaderboard(records, k), 1):
        c = r.config
        out.append(
            f"| {rank} | {r.ap:.3f} | {c.get('backbone')} | {c.get('encoder')} | {_loss_label(c)} "
            f"| {_fmt_value(c.get('learning_rate', '-'))} | {c.get('batch_size', '-')} |"
        )

    out += ["", f"## Recent Distribution (last {recent_window})"]
    recent = records[-recent_window:]
    for dim in ("backbone", "encoder"):
        counts = Counter(str(r.config.get(dim)) for r in recent)
        body = ", ".join(f"{lv}: {n}" for lv, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))
        out.append(f"- {dim}: {body or 'none'}")

    banned = banned_fingerprint_records(records, m)
    out += ["", f"## Recent Failures (last {m})"]
    for r in banned:
        out.append(f"- #{r.id} {r.failure_category or r.status}: {'/'.join(cell_of(space, r.config))}")
    if not banned:
        out.append("- none")

    out += ["", "## Diversity Budget"]
    out += budget_lines(records, budget)
    listed = ", ".join("/".join(cell_of(space, r.config)) for r in banned)
    out.append(f"- Banned configs: [{listed}]")

    out += ["", "## Schema"]
    for d in space.dimensions:
        key = DIM_TO_KEY.get(d.name, d.name)
        if d.is_categorical:
            out.append(f"- {key}: one of [{', '.join(d.levels)}]")
        else:
            lo, hi = d.bounds
            out.append(f"- {key}: {d.scale} range [{lo:g}, {hi:g}]")
    for rule in space.conditional_rules:
        out.append(f"- {', '.join(rule.active)} only when {rule.guard_dim} = {rule.guard_level}")

    out += ["", "## Task", "Propose 3-5 ideas as YAML configurations."]
    return "\n".join(out) + "\n"


def schema_text(space: ConfigurationSpace) -> str:
    return yaml.safe_dump(space.to_dict(), sort_keys=False)


# ---------------------------------------------------------------- interchange


def _yaml_level(level: str) -> Any:
    return int(level) if level.isdigit() else level


def render_ideas(proposals: Sequence[Proposal], space: ConfigurationSpace) -> str:
    """Write proposals as an idea document that ``parse_ideas`` reads back."""
    items = []
    for i, p in enumerate(proposals):
        item: dict[str, Any] = {"idea_name": p.idea_name or f"idea {i + 1}"}
        for d in space.dimensions:
            if d.name in p.config:
                v = p.config[d.name]
                item[DIM_TO_KEY.get(d.name, d.name)] = _yaml_level(v) if d.is_categorical else float(v)
        item["priority"] = p.priority
        if p.rationale:
            item["rationale"] = p.rationale
        items.append(item)
    return yaml.safe_dump(items, sort_keys=False)


_FENCE = re.compile(r"```(?:ya?ml)?\s*\n(.*?)```", re.DOTALL)


def _load_document(text: str) -> list:
    match = _FENCE.search(text)
    if match:
        text = match.group(1)
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise IdeaParseError(f"malformed idea document: {exc}") from exc
    if isinstance(doc, Mapping) and isinstance(doc.get("ideas"), list):
        doc = doc["ideas"]
    if not isinstance(doc, list):
        raise IdeaParseError("idea document must be a list of ideas")
    return doc


def _idea_to_config(idea: Mapping, space: ConfigurationSpace) -> tuple[Configuration | None, list[str]]:
    required = [k for k in REQUIRED_KEYS if k == "idea_name" or KEY_MAP.get(k, k) in space]
    reasons = [f"missing required key '{k}'" for k in required if k not in idea]
    raw: dict[str, Any] = {}
    for key, value in idea.items():
        dim = KEY_MAP.get(str(key), str(key))
        if dim in space and key not in META_KEYS:
            raw[dim] = value

    values: dict[str, Any] = {}
    for d in space.categorical:
        if d.name in raw:
            level = d.canonical_level(raw[d.name])
            if level is None:
                reasons.append(f"{d.name}: unknown level {raw[d.name]!r}")
            else:
                values[d.name] = level
        elif d.default is not None:
            values[d.name] = d.default
        elif not any(r.startswith(f"missing required key '{DIM_TO_KEY.get(d.name, d.name)}'") for r in reasons):
            reasons.append(f"missing required key '{DIM_TO_KEY.get(d.name, d.name)}'")
    if reasons:
        return None, reasons

    active = set(space.active_dims(values))
    for d in space.continuous:
        if d.name in raw:
            try:
                values[d.name] = float(raw[d.name])
            except (TypeError, ValueError):
                reasons.append(f"{d.name}: not a number {raw[d.name]!r}")
        elif d.name in active:
            if d.default is None:
                reasons.append(f"missing required key '{d.name}'")
            else:
                values[d.name] = float(d.default)
    if reasons:
        return None, reasons
    config = Configuration(values)
    problems = validate(space, config)
    return (None, problems) if problems else (config, [])


def parse_ideas(document: str, space: ConfigurationSpace, source: str = "llm") -> ParsedIdeas:
    """Parse an idea document; invalid ideas become rejections, not errors.

    Raises ``IdeaParseError`` only when the document itself is unreadable.
    """
    out = ParsedIdeas()
    for i, idea in enumerate(_load_document(document)):
        if not isinstance(idea, Mapping):
            out.rejections.append(IdeaRejection(i, "", ("idea is not a mapping",)))
            continue
        name = str(idea.get("idea_name", ""))
        config, reasons = _idea_to_config(idea, space)
        if config is None:
            out.rejections.append(IdeaRejection(i, name, tuple(reasons)))
            continue
        priority = str(idea.get("priority", "medium")).lower()
        if priority not in PRIORITY_RANK:
            priority = "medium"
        rationale = " ".join(str(idea.get("rationale", "")).split())
        out.proposals.append(Proposal(config, priority, rationale, source, None, name))
    return out


# ---------------------------------------------------------------- endpoint


class PolicyEndpoint(Protocol):
    def complete(self, request: dict) -> str: ...


class EndpointError(RuntimeError):
    pass


class HttpPolicyEndpoint:
    """POSTs ``{context, schema, n_ideas}`` as JSON; the body of the reply is
    the idea document."""

    def __init__(self, url: str, token: str | None = None, timeout: float = 60.0, retries: int = 2,
                 backoff: float = 1.0):
        self.url = url
        self.token = token
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff

    @classmethod
    def from_env(cls, timeout: float = 60.0, retries: int = 2) -> HttpPolicyEndpoint:
        url = os.environ.get(URL_ENV)
        if not url:
            raise EndpointError(f"{URL_ENV} is not set")
        return cls(url, os.environ.get(TOKEN_ENV), timeout, retries)

    def complete(self, request: dict) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = httpx.post(self.url, json=request, headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.text
            except httpx.HTTPError as exc:
                last = exc
                log.warning("policy endpoint attempt %d failed: %s", attempt + 1, exc)
                if attempt < self.retries and self.backoff > 0:
                    time.sleep(self.backoff * 2**attempt)
        raise EndpointError(f"policy endpoint failed after {self.retries + 1} attempts: {last}")


@dataclass
class LlmResult:
    proposals: list[Proposal]
    rejections: list[IdeaRejection] = field(default_factory=list)
    error: str | None = None
    fallback: bool = False


def propose_llm(
    context: str,
    endpoint: PolicyEndpoint,
    space: ConfigurationSpace,
    n_ideas: int,
    rng: np.random.Generator,
) -> LlmResult:
    """Ask the endpoint for ideas; on transport failure or no valid idea, fall
    back to a single uniform proposal."""
    request = {"context": context, "schema": schema_text(space), "n_ideas": int(n_ideas)}
    try:
        text = endpoint.complete(request)
        parsed = parse_ideas(text, space)
    except (EndpointError, IdeaParseError, OSError) as exc:
        log.warning("idea request failed, using random fallback: %s", exc)
        return LlmResult([propose_random(space, rng)], error=str(exc), fallback=True)
    if not parsed.proposals:
        log.warning("no valid ideas in response, using random fallback")
        return LlmResult([propose_random(space, rng)], parsed.rejections, "no valid ideas", True)
    return LlmResult(parsed.proposals[:n_ideas], parsed.rejections)


class StubEndpoint:
    """Endpoint returning canned documents in turn; for tests and dry runs."""

    def __init__(self, documents: Sequence[str] | str):
        self.documents = [documents] if isinstance(documents, str) else list(documents)
        self.requests: list[dict] = []

    def complete(self, request: dict) -> str:
        self.requests.append(request)
        if not self.documents:
            raise EndpointError("stub has no documents")
        doc = self.documents[(len(self.requests) - 1) % len(self.documents)]
        return doc
