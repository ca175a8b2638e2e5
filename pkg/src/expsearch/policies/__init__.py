"""Search policies: uniform, pool replay, TPE, oracle, and external idea generators."""

from .base import (
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
from .ideas import (
    EndpointError,
    HttpPolicyEndpoint,
    IdeaParseError,
    IdeaRejection,
    LlmResult,
    ParsedIdeas,
    StubEndpoint,
    encode_context,
    parse_ideas,
    propose_llm,
    render_ideas,
)
from .tpe import TpeParams, propose_pool_tpe, propose_tpe, split_history

__all__ = [
    "PRIORITY_RANK", "DiversityBudget", "Proposal", "RecordPool", "expand_sweep",
    "propose_oracle_policy", "propose_pool_random", "propose_random", "propose_random_excluding",
    "EndpointError", "HttpPolicyEndpoint", "IdeaParseError", "IdeaRejection", "LlmResult",
    "ParsedIdeas", "StubEndpoint", "encode_context", "parse_ideas", "propose_llm", "render_ideas",
    "TpeParams", "propose_pool_tpe", "propose_tpe", "split_history",
]
