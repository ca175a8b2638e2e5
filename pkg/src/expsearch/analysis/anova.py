"""Variance decompositions of AP with permutation p-values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

from ..records import ExperimentRecord
from .convergence import AnalysisError

GroupKey = Sequence[str] | Callable[[ExperimentRecord], Hashable]


@dataclass(frozen=True)
class GroupStat:
    group: Hashable
    n: int
    mean: float
    variance: float


@dataclass(frozen=True)
class TermStat:
    ss: float
    df: int
    f_stat: float
    eta_sq: float
    partial_eta_sq: float
    p_perm: float


@dataclass
class AnovaResult:
    f_stat: float
    eta_sq: float
    p_perm: float
    ssb: float
    ssw: float
    sst: float
    df_between: int
    df_within: int
    groups: list[GroupStat] = field(default_factory=list)
    terms: dict[str, TermStat] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.df_between + self.df_within + 1


def _key_fn(group_key: GroupKey) -> Callable[[ExperimentRecord], Hashable]:
    if callable(group_key):
        return group_key
    dims = tuple(group_key)
    return lambda r: tuple(str(r.config.get(d)) for d in dims)


def _encode(labels: Sequence[Hashable]) -> tuple[np.ndarray, list]:
    levels = sorted(set(labels), key=str)
    index = {g: i for i, g in enumerate(levels)}
    return np.array([index[g] for g in labels], dtype=int), levels


def _ssb(y: np.ndarray, codes: np.ndarray, g: int, grand: float) -> float:
    n = np.bincount(codes, minlength=g)
    s = np.bincount(codes, weights=y, minlength=g)
    return float(np.sum(n * (s / n - grand) ** 2))


def oneway_anova(
    values: Sequence[float],
    labels: Sequence[Hashable],
    n_perm: int = 1000,
    rng: np.random.Generator | None = None,
) -> AnovaResult:
    """One-way ANOVA on raw values; p from shuffling group labels."""
    y = np.asarray(values, dtype=float)
    codes, levels = _encode(list(labels))
    g, n = len(levels), y.size
    if g < 2:
        raise AnalysisError("fewer than 2 eligible groups")
    if n <= g:
        raise AnalysisError("need more observations than groups")
    grand = float(y.mean())
    sst = float(np.sum((y - grand) ** 2))
    if sst == 0.0:
        raise AnalysisError("zero total variance")
    ssb = _ssb(y, codes, g, grand)
    group_means = np.bincount(codes, weights=y, minlength=g) / np.bincount(codes, minlength=g)
    ssw = float(np.sum((y - group_means[codes]) ** 2))
    df_b, df_w = g - 1, n - g
    f_stat = (ssb / df_b) / (ssw / df_w) if ssw > 0 else float("inf")

    p = 1.0
    if n_perm > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        # SST is permutation-invariant, so F is monotone in SSB
        hits = 0
        tol = 1e-12 * max(ssb, 1e-300)
        for _ in range(n_perm):
            if _ssb(y, rng.permutation(codes), g, grand) >= ssb - tol:
                hits += 1
        p = (1 + hits) / (1 + n_perm)

    groups = [
        GroupStat(lv, int((codes == i).sum()), float(y[codes == i].mean()),
                  float(y[codes == i].var(ddof=1)) if (codes == i).sum() > 1 else 0.0)
        for i, lv in enumerate(levels)
    ]
    return AnovaResult(f_stat, ssb / sst, p, ssb, ssw, sst, df_b, df_w, groups)


def _eligible(records: Iterable[ExperimentRecord], group_key: GroupKey, min_n: int):
    key = _key_fn(group_key)
    done = [r for r in records if r.completed]
    labels = [key(r) for r in done]
    counts: dict = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    keep = [i for i, lab in enumerate(labels) if counts[lab] >= min_n]
    dropped = sorted((lab for lab, c in counts.items() if c < min_n), key=str)
    return [done[i] for i in keep], [labels[i] for i in keep], dropped


def anova_oneway(
    records: Iterable[ExperimentRecord],
    group_key: GroupKey = ("backbone", "encoder"),
    min_n: int = 10,
    n_perm: int = 1000,
    rng: np.random.Generator | None = None,
) -> AnovaResult:
    kept, labels, dropped = _eligible(records, group_key, min_n)
    result = oneway_anova([r.ap for r in kept], labels, n_perm, rng)
    if dropped:
        result.notes.append(f"{len(dropped)} groups below min_n={min_n} excluded")
    return result


def anova_balanced(
    records: Iterable[ExperimentRecord],
    group_key: GroupKey = ("backbone", "encoder"),
    n_per_group: int = 10,
    seed: int = 0,
    n_perm: int = 1000,
) -> AnovaResult:
    """Subsample every eligible group to ``n_per_group`` records, then one-way ANOVA.

    Groups smaller than ``n_per_group`` are excluded; subsampled records keep
    their original order.
    """
    kept, labels, dropped = _eligible(records, group_key, n_per_group)
    sub_rng = np.random.default_rng([seed, 0])
    by_group: dict = {}
    for i, lab in enumerate(labels):
        by_group.setdefault(lab, []).append(i)
    chosen = []
    for lab in sorted(by_group, key=str):
        idx = by_group[lab]
        pick = sub_rng.choice(len(idx), size=n_per_group, replace=False)
        chosen.extend(idx[j] for j in pick)
    chosen.sort()
    result = oneway_anova(
        [kept[i].ap for i in chosen], [labels[i] for i in chosen], n_perm,
        np.random.default_rng([seed, 1]),
    )
    if dropped:
        result.notes.append(f"{len(dropped)} groups smaller than {n_per_group} excluded")
    return result


def _dummies(codes: np.ndarray, k: int) -> np.ndarray:
    """Treatment coding: k - 1 indicator columns."""
    return (codes[:, None] == np.arange(1, k)[None, :]).astype(float)


def _rss(design: np.ndarray, y: np.ndarray) -> tuple[float, int]:
    coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return float(resid @ resid), int(rank)


def _sequential_ss(y: np.ndarray, blocks: list[np.ndarray]) -> tuple[list[float], list[int], float, int]:
    """Type-I sums of squares for blocks added in order after an intercept."""
    design = np.ones((y.size, 1))
    prev_rss, prev_rank = _rss(design, y)
    ss, dfs = [], []
    for block in blocks:
        design = np.hstack([design, block])
        rss, rank = _rss(design, y)
        ss.append(max(prev_rss - rss, 0.0))
        dfs.append(rank - prev_rank)
        prev_rss, prev_rank = rss, rank
    return ss, dfs, prev_rss, y.size - prev_rank


def anova_twoway(
    records: Iterable[ExperimentRecord],
    factor_a: str,
    factor_b: str,
    n_perm: int = 1000,
    rng: np.random.Generator | None = None,
) -> AnovaResult:
    """Two-way ANOVA with interaction using sequential sums of squares
    (A, then B, then A x B). Permutation p per term shuffles the response."""
    done = [r for r in records if r.completed]
    y = np.array([r.ap for r in done], dtype=float)
    ca, la = _encode([str(r.config.get(factor_a)) for r in done])
    cb, lb = _encode([str(r.config.get(factor_b)) for r in done])
    if len(la) < 2 or len(lb) < 2:
        raise AnalysisError("each factor needs at least 2 levels with data")
    da, db = _dummies(ca, len(la)), _dummies(cb, len(lb))
    dab = np.hstack([da[:, [i]] * db for i in range(da.shape[1])]) if da.size and db.size else np.zeros((y.size, 0))
    blocks = [da, db, dab]
    names = [factor_a, factor_b, f"{factor_a}:{factor_b}"]

    grand = float(y.mean())
    sst = float(np.sum((y - grand) ** 2))
    if sst == 0.0:
        raise AnalysisError("zero total variance")
    ss, dfs, rss, df_res = _sequential_ss(y, blocks)

    def f_values(ss_list: list[float], rss_val: float) -> list[float]:
        out = []
        for s, d in zip(ss_list, dfs):
            if d == 0:
                out.append(float("nan"))
            elif rss_val <= 1e-15 * sst or df_res == 0:
                out.append(float("inf") if s > 1e-15 * sst else float("nan"))
            else:
                out.append((s / d) / (rss_val / df_res))
        return out

    def model_f(ss_list: list[float], rss_val: float) -> float:
        df_b = sum(dfs)
        if df_res == 0 or rss_val <= 1e-15 * sst:
            return float("inf")
        return (sum(ss_list) / df_b) / (rss_val / df_res)

    f_obs = f_values(ss, rss)
    f_model = model_f(ss, rss)
    hits = np.zeros(3)
    model_hits = 0
    if n_perm > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        for _ in range(n_perm):
            yp = rng.permutation(y)
            ss_p, _, rss_p, _ = _sequential_ss(yp, blocks)
            f_p = f_values(ss_p, rss_p)
            fm = model_f(ss_p, rss_p)
            model_hits += fm >= f_model * (1 - 1e-12) if np.isfinite(f_model) else fm == f_model
            for i in range(3):
                if np.isfinite(f_obs[i]):
                    hits[i] += f_p[i] >= f_obs[i] * (1 - 1e-12)
                elif f_obs[i] == float("inf"):
                    hits[i] += f_p[i] == float("inf")
    notes = ["sequential (type I) sums of squares in order A, B, AxB"]
    terms = {}
    for i, name in enumerate(names):
        if dfs[i] == 0:
            notes.append(f"term {name} is confounded (zero degrees of freedom)")
        partial = ss[i] / (ss[i] + rss) if ss[i] + rss > 0 else float("nan")
        p = (1 + hits[i]) / (1 + n_perm) if n_perm > 0 else 1.0
        terms[name] = TermStat(ss[i], dfs[i], f_obs[i], ss[i] / sst, partial, float(p))
    ssb = float(sum(ss))
    p_model = (1 + model_hits) / (1 + n_perm) if n_perm > 0 else 1.0
    return AnovaResult(
        f_model, ssb / sst, float(p_model), ssb, rss, sst, int(sum(dfs)), df_res,
        terms=terms, notes=notes,
    )
