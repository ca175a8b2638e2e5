"""Tree-structured Parzen estimator over mixed categorical/continuous spaces."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from ..oracle import PoolExhaustedError
from ..records import ExperimentRecord
from ..space import Configuration, ConfigurationSpace
from .base import Proposal, RecordPool, propose_pool_random, propose_random

_SQRT_2PI = math.sqrt(2 * math.pi)


@dataclass(frozen=True)
class TpeParams:
    gamma_quantile: float = 0.25
    n_candidates: int = 24
    min_history: int = 10
    bandwidth_factor: float = 1.06
    min_bandwidth: float = 0.03
    pool_candidates: int = 240

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma_quantile < 1.0:
            raise ValueError("gamma_quantile must lie in (0, 1)")
        if self.n_candidates < 1 or self.min_history < 2 or self.pool_candidates < 1:
            raise ValueError("n_candidates >= 1, pool_candidates >= 1 and min_history >= 2 required")


class TpeEncoder:
    """Configurations as (level codes, unit coordinates); NaN marks an
    inactive continuous dim and -1 an unknown level. Encoded rows are kept
    in growing buffers so a history is encoded once."""

    def __init__(self, space: ConfigurationSpace):
        self.space = space
        self.cat = space.categorical
        self.cont = space.continuous
        self._index = [{lv: i for i, lv in enumerate(d.levels)} for d in self.cat]
        cat_pos = {d.name: j for j, d in enumerate(self.cat)}
        conditional = space.conditional_dims
        # per continuous dim: None if always active, else (cat column, level code) guards
        self.guards: list[list[tuple[int, int]] | None] = []
        for d in self.cont:
            if d.name not in conditional:
                self.guards.append(None)
                continue
            g = []
            for rule in space.conditional_rules:
                if d.name in rule.active and rule.guard_dim in cat_pos:
                    j = cat_pos[rule.guard_dim]
                    code = self._index[j].get(rule.guard_level)
                    if code is not None:
                        g.append((j, code))
            self.guards.append(g)
        self._hist_ids: list[int] = []
        self._hist_rows: list[int] = []
        self._hist_ap: list[float] = []
        self._row: dict[Configuration, int] = {}
        self._codes = np.zeros((64, len(self.cat)), dtype=int)
        self._units = np.zeros((64, len(self.cont)))

    def _encode_row(self, config: Configuration) -> tuple[np.ndarray, np.ndarray]:
        codes = np.array([ix.get(str(config.get(d.name)), -1) for d, ix in zip(self.cat, self._index)], dtype=int)
        units = np.array([
            min(1.0, max(0.0, d.to_unit(float(config[d.name])))) if d.name in config else np.nan
            for d in self.cont
        ])
        return codes, units

    def _row_of(self, config: Configuration) -> int:
        i = self._row.get(config)
        if i is None:
            i = len(self._row)
            if i == self._codes.shape[0]:
                self._codes = np.concatenate([self._codes, np.zeros_like(self._codes)])
                self._units = np.concatenate([self._units, np.zeros_like(self._units)])
            self._codes[i], self._units[i] = self._encode_row(config)
            self._row[config] = i
        return i

    def encode(self, config: Configuration) -> tuple[np.ndarray, np.ndarray]:
        i = self._row_of(config)
        return self._codes[i].copy(), self._units[i].copy()

    def encode_many(self, configs: Sequence[Configuration]) -> tuple[np.ndarray, np.ndarray]:
        idx = np.fromiter((self._row_of(c) for c in configs), dtype=int, count=len(configs))
        return self._codes[idx], self._units[idx]

    def completed_matrix(self, records: Sequence[ExperimentRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(ap, codes, units) of the completed records, in the given order.

        Consecutive calls with a growing, append-only snapshot (the
        orchestrator's case) only encode the new tail.
        """
        k = len(self._hist_ids)
        reuse = (
            k > 0 and len(records) >= k
            and getattr(records[0], "id", None) == self._hist_ids[0]
            and getattr(records[k - 1], "id", None) == self._hist_ids[-1]
        )
        if not reuse:
            self._hist_ids, self._hist_rows, self._hist_ap = [], [], []
            k = 0
        for r in records[k:]:
            self._hist_ids.append(r.id)
            if r.completed:
                self._hist_rows.append(self._row_of(r.config))
                self._hist_ap.append(float(r.ap))
        idx = np.asarray(self._hist_rows, dtype=int)
        return np.asarray(self._hist_ap), self._codes[idx], self._units[idx]

    def active_mask(self, codes: np.ndarray) -> np.ndarray:
        """(m, n_cont) mask of continuous dims switched on by each row's levels."""
        mask = np.ones((codes.shape[0], len(self.cont)), dtype=bool)
        for j, g in enumerate(self.guards):
            if g is not None:
                on = np.zeros(codes.shape[0], dtype=bool)
                for col, code in g:
                    on |= codes[:, col] == code
                mask[:, j] = on
        return mask

    def decode(self, codes: np.ndarray, units: np.ndarray) -> Configuration:
        values = {d.name: d.levels[codes[j]] for j, d in enumerate(self.cat)}
        for j, d in enumerate(self.cont):
            if not np.isnan(units[j]):
                lo, hi = d.bounds
                values[d.name] = min(hi, max(lo, float(d.from_unit(units[j]))))
        return Configuration(values)


class _KernelDensity:
    """Truncated-Gaussian mixture on [0, 1] plus one uniform prior component."""

    def __init__(self, centers: np.ndarray, params: TpeParams):
        self.centers = centers
        n = centers.size
        h = params.bandwidth_factor * float(centers.std(ddof=1)) * n ** (-0.2) if n > 1 else 0.0
        self.h = max(h, params.min_bandwidth)
        self.lo = ndtr(-centers / self.h)
        self.mass = ndtr((1 - centers) / self.h) - self.lo
        self.weight_prior = 1.0 / (n + 1)

    def pdf(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if self.centers.size == 0:
            return np.ones_like(u)
        z = (u[:, None] - self.centers[None, :]) / self.h
        kern = np.exp(-0.5 * z * z) / (self.mass[None, :] * (_SQRT_2PI * self.h))
        return self.weight_prior + (1 - self.weight_prior) * kern.mean(axis=1)

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        prior = rng.random(m)
        uniform = rng.random(m)
        if self.centers.size == 0:
            return uniform
        pick = rng.integers(self.centers.size, size=m)
        q = self.lo[pick] + rng.random(m) * self.mass[pick]
        draws = np.clip(self.centers[pick] + self.h * ndtri(np.clip(q, 1e-300, 1 - 1e-16)), 0.0, 1.0)
        return np.where(prior < self.weight_prior, uniform, draws)


class _ParzenModel:
    def __init__(self, codes: np.ndarray, units: np.ndarray, enc: TpeEncoder, params: TpeParams):
        self.enc = enc
        self.log_probs = []
        for j, d in enumerate(enc.cat):
            col = codes[:, j]
            counts = np.bincount(col[col >= 0], minlength=len(d.levels)) + 1.0
            self.log_probs.append(np.log(counts / counts.sum()))
        self.kernels = []
        for j in range(len(enc.cont)):
            col = units[:, j]
            self.kernels.append(_KernelDensity(col[~np.isnan(col)], params))

    def log_pdf(self, codes: np.ndarray, units: np.ndarray) -> np.ndarray:
        total = np.zeros(codes.shape[0])
        for j, lp in enumerate(self.log_probs):
            col = codes[:, j]
            total += np.where(col >= 0, lp[np.maximum(col, 0)], -math.log(lp.size))
        for j, kd in enumerate(self.kernels):
            col = units[:, j]
            mask = ~np.isnan(col)
            if mask.any():
                total[mask] += np.log(kd.pdf(col[mask]))
        return total

    def sample(self, rng: np.random.Generator, m: int) -> tuple[np.ndarray, np.ndarray]:
        codes = np.column_stack([
            rng.choice(lp.size, size=m, p=np.exp(lp)) for lp in self.log_probs
        ]) if self.log_probs else np.zeros((m, 0), dtype=int)
        units = np.column_stack([kd.sample(rng, m) for kd in self.kernels]) if self.kernels \
            else np.zeros((m, 0))
        units[~self.enc.active_mask(codes)] = np.nan
        return codes, units


def split_history(records: Sequence[ExperimentRecord], gamma_quantile: float):
    """Good/bad split of completed records at the AP quantile (best first,
    earlier records first among ties). Both sets are non-empty once there
    are at least two completed records."""
    done = sorted((r for r in records if r.completed), key=lambda r: -r.ap)
    n = len(done)
    n_good = min(max(1, math.ceil(gamma_quantile * n)), n - 1)
    return done[:n_good], done[n_good:]


def _models(ap, codes, units, enc: TpeEncoder, params: TpeParams):
    n = ap.size
    n_good = min(max(1, math.ceil(params.gamma_quantile * n)), n - 1)
    order = np.argsort(-ap, kind="stable")
    good, bad = order[:n_good], order[n_good:]
    return (
        _ParzenModel(codes[good], units[good], enc, params),
        _ParzenModel(codes[bad], units[bad], enc, params),
    )


def _encoder(space: ConfigurationSpace, encoder: TpeEncoder | None) -> TpeEncoder:
    return encoder if encoder is not None and encoder.space is space else TpeEncoder(space)


def propose_tpe(
    history: Sequence[ExperimentRecord],
    space: ConfigurationSpace,
    params: TpeParams,
    rng: np.random.Generator,
    n: int = 1,
    encoder: TpeEncoder | None = None,
    exclude: Callable[[Configuration], bool] | None = None,
) -> list[Proposal]:
    """Draw candidates from the good-set density and keep the ``n`` with the
    largest good/bad density ratio. Below ``min_history`` completed records
    this is exactly ``propose_random``.

    ``exclude`` lets a caller skip candidates it would reject anyway (e.g.
    near-duplicates of past runs); if every candidate is excluded the best
    ones are returned regardless.
    """
    enc = _encoder(space, encoder)
    ap, codes, units = enc.completed_matrix(history)
    if ap.size < params.min_history:
        return [propose_random(space, rng, source="tpe") for _ in range(n)]
    good, bad = _models(ap, codes, units, enc, params)
    codes, units = good.sample(rng, max(params.n_candidates, n))
    scores = good.log_pdf(codes, units) - bad.log_pdf(codes, units)
    order = np.argsort(-scores, kind="stable")
    chosen, skipped, seen = [], [], set()
    for i in order:
        config = enc.decode(codes[i], units[i])
        if config in seen:
            continue
        seen.add(config)
        prop = Proposal(config, "medium", f"tpe log-ratio {scores[i]:.3f}", "tpe")
        if exclude is not None and exclude(config):
            skipped.append(prop)
            continue
        chosen.append(prop)
        if len(chosen) == n:
            break
    return chosen or skipped[:n]


def propose_pool_tpe(
    pool: RecordPool,
    history: Sequence[ExperimentRecord],
    space: ConfigurationSpace,
    params: TpeParams,
    rng: np.random.Generator,
    encoder: TpeEncoder | None = None,
) -> Proposal:
    """TPE restricted to a replay pool: among up to ``pool_candidates``
    uniformly drawn remaining entries, take the best density ratio."""
    if not len(pool):
        raise PoolExhaustedError("pool exhausted")
    enc = _encoder(space, encoder)
    ap, codes, units = enc.completed_matrix(history)
    if ap.size < params.min_history:
        return propose_pool_random(pool, rng)
    good, bad = _models(ap, codes, units, enc, params)
    remaining = pool.remaining
    k = min(len(remaining), params.pool_candidates)
    positions = np.sort(rng.choice(len(remaining), size=k, replace=False))
    codes, units = enc.encode_many([remaining[p].config for p in positions])
    scores = good.log_pdf(codes, units) - bad.log_pdf(codes, units)
    best = int(np.argmax(scores))
    entry = pool.take(int(positions[best]))
    return Proposal(entry.config, "medium", f"pool tpe log-ratio {scores[best]:.3f}", "tpe")
