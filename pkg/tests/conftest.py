import numpy as np
import pytest

from expsearch.oracle import SyntheticOracle, calibrate_default
from expsearch.orchestrator import AgentSpec, CampaignConfig, run_campaign
from expsearch.space import default_space, define_space


@pytest.fixture(scope="session")
def space():
    return default_space()


@pytest.fixture(scope="session")
def landscape(space):
    return calibrate_default(space, 0)


@pytest.fixture(scope="session")
def oracle(space, landscape):
    return SyntheticOracle(space, landscape)


@pytest.fixture(scope="session")
def small_history(space, oracle):
    cfg = CampaignConfig(
        n_steps=200, n_workers=2, seed=7,
        agents=(AgentSpec("tpe_agent", "tpe"), AgentSpec("rand_agent", "random")),
    )
    return run_campaign(space, oracle, cfg)


TOY_SCHEMA = """
name: toy
dimensions:
  - {name: arch, kind: categorical, subspace: arch, levels: [a, b, c, d]}
  - {name: loss, kind: categorical, subspace: loss, levels: [focal, bce]}
  - {name: bs, kind: categorical, subspace: train, levels: [16, 32]}
  - {name: gamma, kind: continuous, subspace: loss, bounds: [0.5, 5.0], default: 2.0}
  - {name: lr, kind: continuous, subspace: train, bounds: [1.0e-5, 1.0e-2], scale: log, default: 1.0e-3}
conditional_rules:
  - {when: {loss: focal}, active: [gamma]}
"""


@pytest.fixture(scope="session")
def toy_space():
    return define_space(TOY_SCHEMA)


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; lines are echoed
    in the terminal summary so they survive output capture."""

    def record(number, title, ok, detail=""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
