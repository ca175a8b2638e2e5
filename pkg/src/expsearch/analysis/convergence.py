"""Cumulative-best series, convergence-model fits, AIC selection and the
permutation R^2 baseline."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy.optimize import least_squares

from ..records import ExperimentRecord, completion_order

ModelKind = Literal["power", "exponential", "logarithmic"]
MODELS: tuple[ModelKind, ...] = ("power", "exponential", "logarithmic")
N_PARAMS = {"power": 3, "exponential": 3, "logarithmic": 2}

C_STARTS = (0.05, 0.1, 0.3, 0.5, 1.0)
B_MAX = {"power": 2.0, "exponential": 10.0}


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class BestSeries:
    n: np.ndarray
    ap_star: np.ndarray
    record_ids: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.n)

    def at(self, n: int) -> float:
        """AP*(n); NaN when fewer than n completed experiments exist."""
        return float(self.ap_star[n - 1]) if 0 < n <= len(self.ap_star) else float("nan")


def running_max(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return np.maximum.accumulate(arr) if arr.size else arr


def cumulative_best(records: Iterable[ExperimentRecord]) -> BestSeries:
    done = [r for r in completion_order(records) if r.completed]
    ap = running_max([r.ap for r in done])
    return BestSeries(np.arange(1, len(done) + 1), ap, tuple(r.id for r in done))


def best_from_values(values: Sequence[float]) -> BestSeries:
    ap = running_max(values)
    return BestSeries(np.arange(1, len(ap) + 1), ap)


@dataclass(frozen=True)
class FitResult:
    model: ModelKind
    params: tuple[float, ...]
    r2: float
    aic: float
    rss: float
    n: int
    converged: bool
    degenerate: bool = False

    def predict(self, n: np.ndarray | float) -> np.ndarray:
        return _model_fn(self.model)(np.asarray(n, dtype=float), *self.params)


def _model_fn(model: str):
    if model == "power":
        return lambda n, a, b, c: a - b * np.power(n, -c)
    if model == "exponential":
        return lambda n, a, b, c: a - b * np.exp(-c * n)
    if model == "logarithmic":
        return lambda n, a, b: a + b * np.log(n)
    raise AnalysisError(f"unknown model {model!r}")


def _jacobian(model: str):
    if model == "power":
        def jac(p, n):
            a, b, c = p
            t = np.power(n, -c)
            return np.column_stack([np.ones_like(n), -t, b * t * np.log(n)])
    else:
        def jac(p, n):
            a, b, c = p
            t = np.exp(-c * n)
            return np.column_stack([np.ones_like(n), -t, b * n * t])
    return jac


def _as_xy(series: BestSeries | tuple) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(series, BestSeries):
        return series.n.astype(float), series.ap_star.astype(float)
    n, y = series
    return np.asarray(n, dtype=float), np.asarray(y, dtype=float)


def _aic(rss: float, n: int, k: int) -> float:
    return 2 * k + n * math.log(max(rss, 1e-300) / n)


def fit_model(series: BestSeries | tuple, model_kind: ModelKind, *, min_points: int = 5) -> FitResult:
    """Least-squares fit of one convergence model to AP*(N).

    power: a - b N^-c; exponential: a - b exp(-cN); logarithmic: a + b log N.
    The asymptote a is capped at 1 for power and exponential.
    """
    x, y = _as_xy(series)
    if len(x) < min_points:
        raise AnalysisError(f"series too short for a fit ({len(x)} < {min_points} points)")
    fn = _model_fn(model_kind)
    tss = float(np.sum((y - y.mean()) ** 2))

    if model_kind == "logarithmic":
        design = np.column_stack([np.ones_like(x), np.log(x)])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        params = (float(coef[0]), float(coef[1]))
        converged = True
    else:
        best = None
        y_top = float(y.max())
        b_max = B_MAX[model_kind]
        jac = _jacobian(model_kind)

        def residual(p):
            return fn(x, *p) - y

        def jacobian(p):
            return jac(p, x)

        lower = [-np.inf, 0.0, 1e-6]
        upper = [1.0, b_max, 50.0]
        for a0 in (min(y_top, 1.0 - 1e-9), 1.0 - 1e-9):
            for c0 in C_STARTS:
                gap = max(a0 - float(y[0]), 1e-6)
                b0 = gap * (x[0] ** c0 if model_kind == "power" else math.exp(min(c0 * x[0], 50.0)))
                b0 = float(np.clip(b0, 1e-6, b_max - 1e-6))
                res = least_squares(
                    residual, x0=[a0, b0, c0], jac=jacobian, bounds=(lower, upper),
                    method="trf", x_scale="jac", ftol=1e-6, xtol=1e-8, max_nfev=60,
                )
                if best is None or res.cost < best.cost:
                    best = res
        # polish the winning start at tight tolerance
        best = least_squares(
            residual, x0=best.x, jac=jacobian, bounds=(lower, upper),
            method="trf", x_scale="jac", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000,
        )
        params = tuple(float(v) for v in best.x)
        converged = bool(best.success and np.all(np.isfinite(best.x)))

    resid = fn(x, *params) - y
    rss = float(np.sum(resid**2))
    degenerate = bool(np.ptp(y) == 0.0)
    r2 = float("nan") if degenerate else 1.0 - rss / tss
    return FitResult(
        model_kind, params, r2, _aic(rss, len(x), N_PARAMS[model_kind]), rss, len(x),
        converged, degenerate,
    )


def select_model_aic(series: BestSeries | tuple, models: Sequence[ModelKind] = MODELS) -> list[FitResult]:
    """All fits ranked by ascending AIC; the first entry is the selected model."""
    fits = [fit_model(series, m) for m in models]
    return sorted(fits, key=lambda f: f.aic)


@dataclass(frozen=True)
class PermutationBaseline:
    mean_r2: float
    sd_r2: float
    percentile_of_observed: float
    observed_r2: float
    r2: np.ndarray = field(repr=False)
    exhaustive: bool = False
    n_degenerate: int = 0


def _r2_of_order(values: np.ndarray, min_points: int) -> float:
    s = best_from_values(values)
    return fit_model(s, "power", min_points=min_points).r2


def permutation_r2_baseline(
    records: Iterable[ExperimentRecord] | Sequence[float],
    n_perm: int,
    rng: np.random.Generator,
) -> PermutationBaseline:
    """R^2 of power-law fits to shuffled completion orders.

    When ``n_perm`` reaches n! (small logs) every ordering is enumerated once
    instead of sampling.
    """
    items = list(records)
    if items and isinstance(items[0], ExperimentRecord):
        values = np.array([r.ap for r in completion_order(items) if r.completed], dtype=float)
    else:
        values = np.asarray(items, dtype=float)
    n = len(values)
    if n < 2:
        raise AnalysisError("permutation baseline needs at least 2 completed records")
    min_points = min(5, n)
    observed = _r2_of_order(values, min_points)

    exhaustive = n <= 8 and n_perm >= math.factorial(n)
    if exhaustive:
        orders = itertools.permutations(range(n))
    else:
        orders = (rng.permutation(n) for _ in range(n_perm))
    r2 = np.array([_r2_of_order(values[list(o)], min_points) for o in orders])
    finite = r2[np.isfinite(r2)]
    n_deg = int(r2.size - finite.size)
    if finite.size:
        mean, sd = float(finite.mean()), float(finite.std(ddof=1)) if finite.size > 1 else 0.0
        pct = 100.0 * float(np.mean(finite <= observed)) if np.isfinite(observed) else float("nan")
    else:
        mean = sd = pct = float("nan")
    return PermutationBaseline(mean, sd, pct, observed, r2, exhaustive, n_deg)


def simple_regret(series: BestSeries, f_star: float) -> np.ndarray:
    """r_N = f* - AP*(N); non-increasing because AP* is."""
    return f_star - np.asarray(series.ap_star, dtype=float)


@dataclass(frozen=True)
class Jump:
    index: int
    n: int
    before: float
    after: float

    @property
    def magnitude(self) -> float:
        return self.after - self.before


def detect_jumps(series: BestSeries, min_jump: float = 0.01) -> list[Jump]:
    ap = np.asarray(series.ap_star, dtype=float)
    if ap.size < 2:
        return []
    diffs = np.diff(ap)
    return [
        Jump(int(i + 1), int(series.n[i + 1]), float(ap[i]), float(ap[i + 1]))
        for i in np.flatnonzero(diffs >= min_jump)
    ]
