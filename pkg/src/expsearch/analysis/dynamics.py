"""Search-dynamics metrics: configuration entropy, agent specialization (JSD)
and innovation rate."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from ..records import ExperimentRecord, completion_order

PROJECTIONS: dict[str, tuple[str, ...] | None] = {
    "arch": ("backbone", "encoder", "pooling"),
    "train": ("batch_size", "scheduler", "seq_len", "epochs"),
    "total": ("backbone", "encoder", "pooling", "loss", "batch_size", "scheduler", "seq_len", "epochs"),
    "backbone": ("backbone",),
    "encoder": ("encoder",),
}

DEFAULT_WINDOW = 100


@dataclass
class DynamicsSeries:
    name: str
    t: np.ndarray
    values: np.ndarray
    window: int | None = None
    meta: dict = field(default_factory=dict)


def _projector(projection: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(projection, str):
        if projection not in PROJECTIONS:
            raise ValueError(f"unknown projection {projection!r}")
        return PROJECTIONS[projection]
    return tuple(projection)


def project_records(records: Sequence[ExperimentRecord], projection: str | Sequence[str]) -> list[tuple]:
    dims = _projector(projection)
    return [tuple(str(r.config.get(d)) for d in dims) for r in records]


def entropy(counts: Iterable[int]) -> float:
    """Shannon entropy (natural log) of a count vector."""
    c = np.asarray([x for x in counts if x > 0], dtype=float)
    if c.size == 0:
        return 0.0
    p = c / c.sum()
    return float(max(0.0, -np.sum(p * np.log(p))))


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence (natural log); lies in [0, log 2]."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / m[mask])))

    return float(min(math.log(2), max(0.0, 0.5 * kl(p) + 0.5 * kl(q))))


def _log_fit(t: np.ndarray, h: np.ndarray) -> dict:
    mask = t > 0
    if mask.sum() < 2:
        return {"h0": float("nan"), "k": float("nan"), "r2": float("nan")}
    x, y = np.log(t[mask]), h[mask]
    design = np.column_stack([np.ones_like(x), x])
    (h0, k), *_ = np.linalg.lstsq(design, y, rcond=None)
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = float(np.sum((design @ [h0, k] - y) ** 2))
    return {"h0": float(h0), "k": float(k), "r2": 1.0 - rss / tss if tss > 0 else float("nan")}


def entropy_series(
    records: Iterable[ExperimentRecord],
    projection: str | Sequence[str] = "total",
    mode: Literal["cumulative", "windowed"] = "cumulative",
    window: int = DEFAULT_WINDOW,
    stride: int = 1,
) -> DynamicsSeries:
    """H(t) of the empirical distribution over projected cells, plus a
    H0 + k log t fit reported in ``meta``."""
    ordered = completion_order(records)
    cells = project_records(ordered, projection)
    counts: Counter = Counter()
    ts, hs = [], []
    for i, cell in enumerate(cells):
        counts[cell] += 1
        if mode == "windowed" and i >= window:
            old = cells[i - window]
            counts[old] -= 1
            if counts[old] == 0:
                del counts[old]
        t = i + 1
        if t % stride == 0 or t == len(cells):
            ts.append(t)
            hs.append(entropy(counts.values()))
    t_arr, h_arr = np.asarray(ts, dtype=float), np.asarray(hs, dtype=float)
    name = projection if isinstance(projection, str) else "+".join(projection)
    return DynamicsSeries(
        f"entropy_{name}", t_arr, h_arr, window if mode == "windowed" else None,
        {"mode": mode, "log_fit": _log_fit(t_arr, h_arr), "support": len(set(cells))},
    )


def jsd_series(
    records: Iterable[ExperimentRecord],
    agent_a: str,
    agent_b: str,
    projection: str | Sequence[str] = "backbone",
    window: int = DEFAULT_WINDOW,
    stride: int = 1,
) -> DynamicsSeries:
    """JSD between two agents' projected distributions in a trailing window.

    Points where either agent is absent from the window are NaN.
    """
    ordered = completion_order(records)
    cells = project_records(ordered, projection)
    agents = [r.agent for r in ordered]
    ts, vals = [], []
    for i in range(len(cells)):
        t = i + 1
        if not (t % stride == 0 or t == len(cells)):
            continue
        lo = max(0, t - window)
        ca: Counter = Counter()
        cb: Counter = Counter()
        for cell, agent in zip(cells[lo:t], agents[lo:t]):
            if agent == agent_a:
                ca[cell] += 1
            elif agent == agent_b:
                cb[cell] += 1
        ts.append(t)
        if not ca or not cb:
            vals.append(float("nan"))
            continue
        support = sorted(set(ca) | set(cb))
        vals.append(jsd(np.array([ca[s] for s in support]), np.array([cb[s] for s in support])))
    name = projection if isinstance(projection, str) else "+".join(projection)
    return DynamicsSeries(
        f"jsd_{name}", np.asarray(ts, dtype=float), np.asarray(vals), window,
        {"agents": (agent_a, agent_b)},
    )


def innovation_indicators(values: Sequence[float]) -> np.ndarray:
    """iota_t = 1 when y_t beats every earlier observation (iota_1 = 1)."""
    y = np.asarray(values, dtype=float)
    if y.size == 0:
        return np.zeros(0)
    prev_best = np.concatenate([[-np.inf], np.maximum.accumulate(y)[:-1]])
    return (y > prev_best).astype(float)


def innovation_series(
    records: Iterable[ExperimentRecord] | Sequence[float], window: int = DEFAULT_WINDOW
) -> DynamicsSeries:
    """Sliding-window mean of the innovation indicator over completed records."""
    items = list(records)
    if items and isinstance(items[0], ExperimentRecord):
        values = [r.ap for r in completion_order(items) if r.completed]
    else:
        values = items
    iota = innovation_indicators(values)
    if iota.size >= window:
        kernel = np.ones(window) / window
        rate = np.convolve(iota, kernel, mode="valid")
        t = np.arange(window, iota.size + 1, dtype=float)
    else:
        rate, t = np.zeros(0), np.zeros(0)
    return DynamicsSeries("innovation_rate", t, rate, window, {"indicator": iota})


@dataclass(frozen=True)
class DecayFit:
    alpha: float
    intercept: float
    r2: float
    n_bins: int


def fit_innovation_decay(series: DynamicsSeries | Sequence[float], n_bins: int = 20) -> DecayFit:
    """Fit P(iota_t = 1) ~ t^-alpha by log-log least squares on log-spaced bins
    of the raw indicator."""
    iota = series.meta["indicator"] if isinstance(series, DynamicsSeries) else np.asarray(series, float)
    n = iota.size
    if n < 4:
        raise ValueError("innovation decay needs at least 4 observations")
    edges = np.unique(np.floor(np.logspace(0, math.log10(n + 1), n_bins + 1)).astype(int))
    centers, rates = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        chunk = iota[lo - 1:hi - 1]
        if chunk.size and chunk.mean() > 0:
            t_mid = math.sqrt(lo * (hi - 1)) if hi - 1 > lo else float(lo)
            centers.append(t_mid)
            rates.append(chunk.mean())
    if len(centers) < 2:
        raise ValueError("too few non-empty bins for a decay fit")
    x, y = np.log(centers), np.log(rates)
    design = np.column_stack([np.ones_like(x), x])
    (b0, b1), *_ = np.linalg.lstsq(design, y, rcond=None)
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = float(np.sum((design @ [b0, b1] - y) ** 2))
    return DecayFit(float(-b1), float(b0), 1.0 - rss / tss if tss > 0 else float("nan"), len(centers))


def cell_counts(records: Iterable[ExperimentRecord], projection: str | Sequence[str]) -> Counter:
    return Counter(project_records(list(records), projection))

