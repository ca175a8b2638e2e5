"""Association statistics: enrichment, representativeness, rank correlation
and group-mean tables."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from ..records import ExperimentRecord
from .convergence import AnalysisError


def enrichment_ratio(
    records: Iterable[ExperimentRecord],
    predicate: Callable[[ExperimentRecord], bool],
    top_k: int = 100,
) -> float:
    """Prevalence of ``predicate`` among the top-k by AP over its prevalence
    among all completed records. Ties in AP keep record order."""
    done = [r for r in records if r.completed]
    if top_k > len(done):
        raise AnalysisError(f"top_k={top_k} exceeds {len(done)} completed records")
    if top_k <= 0:
        raise AnalysisError("top_k must be positive")
    base = sum(1 for r in done if predicate(r)) / len(done)
    if base == 0:
        return float("nan")
    top = sorted(done, key=lambda r: -r.ap)[:top_k]
    return (sum(1 for r in top if predicate(r)) / top_k) / base


@dataclass(frozen=True)
class Representativeness:
    chi2: float
    cramers_v: float
    p_perm: float
    df: int


def _chi2(sub_counts: np.ndarray, pop_props: np.ndarray) -> float:
    n = sub_counts.sum()
    expected = n * pop_props
    mask = expected > 0
    return float(np.sum((sub_counts[mask] - expected[mask]) ** 2 / expected[mask]))


def chi2_representativeness(
    subset: Sequence[Hashable],
    population: Sequence[Hashable],
    n_perm: int = 1000,
    rng: np.random.Generator | None = None,
) -> Representativeness:
    """Goodness of fit of subset level counts to population proportions.

    Cramér's V uses the population size and a two-column table
    (subset vs. population), i.e. V = sqrt(chi2 / N_pop). The p-value comes
    from random equal-size subsets drawn without replacement.
    """
    if len(subset) == 0:
        raise AnalysisError("empty subset")
    levels = sorted(set(population), key=str)
    if len(levels) < 2:
        raise AnalysisError("population needs at least 2 levels")
    index = {lv: i for i, lv in enumerate(levels)}
    if any(s not in index for s in subset):
        raise AnalysisError("subset contains levels absent from the population")
    pop_codes = np.array([index[p] for p in population])
    pop_props = np.bincount(pop_codes, minlength=len(levels)) / len(population)
    sub_counts = np.bincount([index[s] for s in subset], minlength=len(levels))
    stat = _chi2(sub_counts, pop_props)
    v = math.sqrt(stat / (len(population) * (min(len(levels), 2) - 1)))
    p = 1.0
    if n_perm > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        m = len(subset)
        hits = 0
        for _ in range(n_perm):
            draw = pop_codes[rng.choice(len(pop_codes), size=m, replace=False)]
            if _chi2(np.bincount(draw, minlength=len(levels)), pop_props) >= stat - 1e-12:
                hits += 1
        p = (1 + hits) / (1 + n_perm)
    return Representativeness(stat, v, p, len(levels) - 1)


def rank_correlation(pairs: Sequence[tuple[float, float]]) -> float:
    """Spearman rho with average ranks for ties; NaN if a column is constant."""
    if len(pairs) < 3:
        raise AnalysisError("rank correlation needs at least 3 pairs")
    arr = np.asarray(pairs, dtype=float)
    rx, ry = rankdata(arr[:, 0]), rankdata(arr[:, 1])
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return float("nan")
    rx, ry = rx - rx.mean(), ry - ry.mean()
    return float(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)))


@dataclass(frozen=True)
class GroupRow:
    key: tuple
    n: int
    mean: float
    sd: float


def group_mean_table(
    records: Iterable[ExperimentRecord], keys: Sequence[str], min_n: int = 5
) -> list[GroupRow]:
    """Mean AP per key combination with at least ``min_n`` completed records."""
    buckets: dict[tuple, list[float]] = {}
    for r in records:
        if r.completed:
            buckets.setdefault(tuple(str(r.config.get(k)) for k in keys), []).append(r.ap)
    rows = []
    for key in sorted(buckets):
        vals = np.asarray(buckets[key])
        if vals.size >= min_n:
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            rows.append(GroupRow(key, int(vals.size), float(vals.mean()), sd))
    return rows


def heatmap_grid(rows: list[GroupRow]) -> tuple[list[str], list[str], np.ndarray]:
    """Two-key table rows as a (row levels, column levels, means) grid; NaN where absent."""
    row_levels = sorted({r.key[0] for r in rows})
    col_levels = sorted({r.key[1] for r in rows})
    grid = np.full((len(row_levels), len(col_levels)), np.nan)
    for r in rows:
        grid[row_levels.index(r.key[0]), col_levels.index(r.key[1])] = r.mean
    return row_levels, col_levels, grid

