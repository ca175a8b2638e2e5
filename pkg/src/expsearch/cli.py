"""``expsearch`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 analysis error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .analysis import (
    AnalysisError,
    anova_balanced,
    anova_oneway,
    anova_twoway,
    cumulative_best,
    detect_jumps,
    enrichment_ratio,
    entropy_series,
    fit_innovation_decay,
    fit_model,
    innovation_series,
    jsd_series,
    permutation_r2_baseline,
    select_model_aic,
    simple_regret,
)
from .analysis.convergence import MODELS
from .encoders import selftest
from .oracle import LandscapeParams, ReplayOracle, SyntheticOracle, calibrate_default, true_optimum
from .orchestrator import POOL_POLICIES, AgentSpec, CampaignConfig, replay_campaign, run_campaign
from .policies import DiversityBudget
from .records import completion_order
from .report import emit_report
from .space import SpaceError, default_space, discrete_cardinality, load_space
from .store import IngestError, LogFormatError, ingest_external, make_header, read_log, write_log

EXIT_USAGE, EXIT_DATA, EXIT_ANALYSIS = 1, 2, 3
POLICY_ALIASES = {
    "pool-random": "pool_random", "pool-tpe": "pool_tpe", "pool-oracle": "oracle_policy",
    "oracle": "oracle_policy",
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit 2, which we reserve for data errors
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def config_hash(obj: Any) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _breadcrumb(seed: int | None, obj: Any) -> None:
    print(f"# seed={seed} config_hash={config_hash(obj)}")


def _policy_name(name: str) -> str:
    return POLICY_ALIASES.get(name, name.replace("-", "_"))


def _load(path: str):
    try:
        log = read_log(path)
    except FileNotFoundError:
        raise DataError(f"no such log: {path}") from None
    except (LogFormatError, SpaceError) as exc:
        raise DataError(str(exc)) from None
    return log


def _table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(h) for h in headers]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.4g}"
    return str(v)


# ---------------------------------------------------------------- space


def cmd_space_show(args) -> int:
    space = load_space(args.space) if args.space else default_space()
    _breadcrumb(None, {"space": space.schema_hash()})
    if args.format == "yaml":
        print(yaml.safe_dump(space.to_dict(), sort_keys=False).rstrip())
        return 0
    rows = []
    for d in space.dimensions:
        domain = ", ".join(d.levels) if d.is_categorical else f"[{d.bounds[0]:g}, {d.bounds[1]:g}] {d.scale}"
        cond = next((f"{r.guard_dim}={r.guard_level}" for r in space.conditional_rules if d.name in r.active), "")
        rows.append((d.name, d.subspace, d.kind, domain, cond))
    print(_table(["dimension", "subspace", "kind", "domain", "active when"], rows))
    print(f"discrete cells: {discrete_cardinality(space)}  schema hash: {space.schema_hash()}")
    return 0


# ---------------------------------------------------------------- campaigns


def _campaign_config(args) -> CampaignConfig:
    doc: dict = {}
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text()) or {}
    if args.steps is not None:
        doc["n_steps"] = args.steps
    if args.workers is not None:
        doc["n_workers"] = args.workers
    if args.dedup is not None:
        doc["dedup_threshold"] = args.dedup
    doc["seed"] = args.seed
    if args.policy:
        doc["agents"] = [
            {"name": f"{_policy_name(p)}_{i}" if args.policy.count(",") else _policy_name(p),
             "policy": _policy_name(p), "ideas_per_cycle": args.ideas_per_cycle}
            for i, p in enumerate(args.policy.split(","))
        ]
    if args.no_budget:
        doc["diversity_budget"] = {"min_non_modal": {}}
    if "n_steps" not in doc:
        raise UsageError("campaign run needs --steps or a config file with n_steps")
    return CampaignConfig.from_mapping(doc)


def cmd_campaign_run(args) -> int:
    space = load_space(args.space) if args.space else default_space()
    try:
        cfg = _campaign_config(args)
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"invalid campaign configuration: {exc}") from None
    if args.oracle == "synthetic":
        params = LandscapeParams.load(args.landscape) if args.landscape else calibrate_default(space, args.seed)
        oracle = SyntheticOracle(space, params)
        cell, f_star = true_optimum(params, space)
        oracle_info = {"kind": "synthetic", "f_star": f_star, "optimum_cell": list(cell),
                       "landscape": params.to_dict()}
    else:
        if not args.pool:
            raise UsageError("--oracle replay needs --pool LOG")
        if any(a.policy not in POOL_POLICIES for a in cfg.agents):
            raise UsageError("--oracle replay supports only pool policies (pool-random, pool-tpe, pool-oracle)")
        pool_log = _load(args.pool)
        oracle = ReplayOracle(pool_log.records, space)
        oracle_info = {"kind": "replay", "pool": str(args.pool), "pool_size": len(oracle.entries)}
    _breadcrumb(cfg.seed, {"campaign": cfg.to_dict(), "oracle": oracle_info, "space": space.schema_hash()})
    history = run_campaign(space, oracle, cfg)
    header = make_header(space, cfg.to_dict(), cfg.seed, oracle_info, history)
    write_log(history, args.out, header)
    done = [r for r in history if r.completed]
    best = max((r.ap for r in done), default=float("nan"))
    print(f"wrote {len(history)} records to {args.out}; completed {len(done)}; best AP {best:.4f}"
          + (f"; truncated: {history.truncation_reason}" if history.truncated else ""))
    return 0


def cmd_campaign_replay(args) -> int:
    log = _load(args.inp)
    space = log.space or default_space()
    policy = _policy_name(args.policy)
    _breadcrumb(args.seed, {"in": log.header.get("schema_hash"), "policy": policy,
                            "permutations": args.permutations, "steps": args.steps})
    rows = []
    for k in range(args.permutations):
        seed = args.seed + k
        try:
            h = replay_campaign(space, log.records, policy, args.steps, seed=seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        best = cumulative_best(h.records)
        try:
            c = fit_model(best, "power").params[2]
        except AnalysisError:
            c = float("nan")
        rows.append((seed, len(best), float(best.ap_star[-1]) if len(best) else float("nan"), c))
        if args.out and k == 0:
            header = make_header(space, None, seed, {"kind": "replay", "policy": policy,
                                                     "source_schema": log.header.get("schema_hash")}, h)
            write_log(h, args.out, header)
    print(_table(["seed", "n", "final_best", "power_c"], rows))
    cs = np.array([r[3] for r in rows], dtype=float)
    if np.isfinite(cs).any():
        print(f"power c: mean {np.nanmean(cs):.4f} median {np.nanmedian(cs):.4f}")
    return 0


def cmd_ingest(args) -> int:
    mapping = yaml.safe_load(Path(args.mapping).read_text()) or {}
    space = load_space(args.space) if args.space else default_space()
    _breadcrumb(None, {"mapping": mapping, "space": space.schema_hash()})
    try:
        log, report = ingest_external(args.inp, mapping, space)
    except FileNotFoundError:
        raise DataError(f"no such file: {args.inp}") from None
    except IngestError as exc:
        raise DataError(str(exc)) from None
    write_log(log, args.out)
    print(f"rows {report.n_rows}; ingested {report.n_ingested}; dropped {report.n_dropped}"
          + "".join(f"; {k} {v}" for k, v in sorted(report.dropped.items())))
    return 0


# ---------------------------------------------------------------- analysis


def cmd_analyze(args) -> int:
    log = _load(args.inp)
    records = log.records
    seed = args.seed
    _breadcrumb(seed, {k: v for k, v in sorted(vars(args).items()) if k != "func"})
    rng = np.random.default_rng(seed)
    kind = args.kind
    if kind == "convergence":
        best = cumulative_best(records)
        models = MODELS if args.model == "all" else (args.model,)
        fits = select_model_aic(best, models) if args.model == "all" else [fit_model(best, args.model)]
        rows = [(f.model, ", ".join(f"{p:.4g}" for p in f.params), f.r2, f.aic, f.converged) for f in fits]
        print(_table(["model", "params (a, b, c)", "R2", "AIC", "converged"], rows))
        if args.permutations:
            base = permutation_r2_baseline(records, args.permutations, rng)
            print(f"permutation R2: mean {base.mean_r2:.4f} sd {base.sd_r2:.4f}; "
                  f"observed {base.observed_r2:.4f} at percentile {base.percentile_of_observed:.1f}")
    elif kind == "dynamics":
        done = [r for r in completion_order(records) if r.completed]
        ent = entropy_series(done, args.projection)
        fit = ent.meta["log_fit"]
        print(f"entropy({args.projection}): final {ent.values[-1]:.4f}; "
              f"H0 {fit.get('h0', float('nan')):.4f} k {fit.get('k', float('nan')):.4f} R2 {fit.get('r2', float('nan')):.4f}")
        inn = innovation_series(done, window=min(args.window, max(1, len(done))))
        decay = fit_innovation_decay(inn)
        print(f"innovation decay: alpha {decay.alpha:.4f} R2 {decay.r2:.4f} over {decay.n_bins} bins")
        agents = args.agents.split(",") if args.agents else sorted({r.agent for r in done})[:2]
        if len(agents) == 2:
            js = jsd_series(records, agents[0], agents[1], args.projection, window=args.window)
            finite = js.values[np.isfinite(js.values)]
            if finite.size:
                print(f"JSD {agents[0]} vs {agents[1]}: mean {finite.mean():.4f} final {finite[-1]:.4f}")
    elif kind == "anova":
        factors = tuple(args.factors.split(","))
        if args.two_way:
            if len(factors) != 2:
                raise UsageError("--two-way needs exactly two factors")
            res = anova_twoway(records, factors[0], factors[1], args.permutations, rng)
            rows = [(name, t.ss, t.df, t.f_stat, t.eta_sq, t.partial_eta_sq, t.p_perm) for name, t in res.terms.items()]
            print(_table(["term", "SS", "df", "F", "eta2", "partial eta2", "p_perm"], rows))
        elif args.balanced:
            res = anova_balanced(records, factors, args.balanced, seed, args.permutations)
        else:
            res = anova_oneway(records, factors, args.min_n, args.permutations, rng)
        if not args.two_way:
            print(f"F {res.f_stat:.4f} eta2 {res.eta_sq:.4f} p_perm {res.p_perm:.4g} "
                  f"df ({res.df_between}, {res.df_within}) groups {len(res.groups)}")
        for note in res.notes:
            print(f"note: {note}")
    elif kind == "enrichment":
        if not (args.dim and args.level):
            raise UsageError("enrichment needs --dim and --level")
        ratio = enrichment_ratio(records, lambda r: str(r.config.get(args.dim)) == args.level, args.top_k)
        print(f"enrichment {args.dim}={args.level} in top {args.top_k}: {ratio:.4f}")
    elif kind == "jumps":
        jumps = detect_jumps(cumulative_best(records), args.min_jump)
        print(_table(["n", "before", "after", "magnitude"], [(j.n, j.before, j.after, j.magnitude) for j in jumps]))
    elif kind == "regret":
        f_star = args.f_star
        if f_star is None:
            f_star = (log.header.get("oracle") or {}).get("f_star")
        if f_star is None:
            raise UsageError("regret needs --f-star (the log header has none)")
        best = cumulative_best(records)
        regret = simple_regret(best, float(f_star))
        checkpoints = [n for n in (1, 10, 100, 1000, 10000) if n <= len(best)] + ([len(best)] if len(best) else [])
        rows = [(n, float(best.at(n)), float(regret[n - 1])) for n in dict.fromkeys(checkpoints)]
        print(f"f* = {float(f_star):.6g}")
        print(_table(["N", "AP*", "regret"], rows))
    return 0


def cmd_encoders_selftest(args) -> int:
    _breadcrumb(args.seed, {"selftest": args.seed})
    checks = selftest(args.seed)
    print(_table(["check", "result", "detail"], [(c.name, "PASS" if c.passed else "FAIL", c.detail) for c in checks]))
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else EXIT_ANALYSIS


def cmd_report(args) -> int:
    log = _load(args.inp)
    _breadcrumb(log.seed, {"in": log.header.get("schema_hash"), "n": len(log.records), "window": args.window})
    paths = emit_report(log.records, args.out_dir, window=args.window, projection=args.projection)
    for p in paths:
        print(p)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="expsearch", description="Simulate and analyze experiment-search campaigns.")
    p.add_argument("--version", action="version", version=f"expsearch {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    space = sub.add_parser("space", help="configuration space tools")
    ssub = space.add_subparsers(dest="action", required=True, parser_class=_Parser)
    show = ssub.add_parser("show", help="print the dimensions of a space")
    show.add_argument("--space", help="schema YAML (default: shipped space)")
    show.add_argument("--format", choices=("table", "yaml"), default="table")
    show.set_defaults(func=cmd_space_show)

    camp = sub.add_parser("campaign", help="run or replay campaigns")
    csub = camp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = csub.add_parser("run", help="simulate a campaign and write its log")
    run.add_argument("--space")
    run.add_argument("--oracle", choices=("synthetic", "replay"), default="synthetic")
    run.add_argument("--pool", help="log whose records form the replay pool")
    run.add_argument("--landscape", help="landscape JSON (default: calibrated from --seed)")
    run.add_argument("--config", help="campaign YAML; flags override its keys")
    run.add_argument("--policy", help="comma-separated agent policies")
    run.add_argument("--ideas-per-cycle", type=int, default=4)
    run.add_argument("--steps", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--dedup", type=float)
    run.add_argument("--no-budget", action="store_true", help="disable the diversity budget")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_campaign_run)

    rep = csub.add_parser("replay", help="re-order a recorded campaign under a pool policy")
    rep.add_argument("--in", dest="inp", required=True)
    rep.add_argument("--policy", choices=("pool-random", "pool-tpe", "pool-oracle"), required=True)
    rep.add_argument("--permutations", type=int, default=1)
    rep.add_argument("--steps", type=int)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--out", help="write the first replay's log here")
    rep.set_defaults(func=cmd_campaign_replay)

    ing = sub.add_parser("ingest", help="normalize an external CSV/JSONL result table")
    ing.add_argument("--in", dest="inp", required=True)
    ing.add_argument("--mapping", required=True, help="mapping spec YAML")
    ing.add_argument("--space")
    ing.add_argument("--out", required=True)
    ing.set_defaults(func=cmd_ingest)

    an = sub.add_parser("analyze", help="statistics on a campaign log")
    an.add_argument("kind", choices=("convergence", "dynamics", "anova", "enrichment", "jumps", "regret"))
    an.add_argument("--in", dest="inp", required=True)
    an.add_argument("--seed", type=int, default=0)
    an.add_argument("--model", choices=(*MODELS, "all"), default="all")
    an.add_argument("--permutations", type=int, default=0)
    an.add_argument("--projection", default="backbone")
    an.add_argument("--window", type=int, default=100)
    an.add_argument("--agents", help="two agent names for JSD, comma-separated")
    an.add_argument("--factors", default="backbone,encoder")
    an.add_argument("--two-way", action="store_true")
    an.add_argument("--balanced", type=int, help="subsample each group to this size")
    an.add_argument("--min-n", type=int, default=10)
    an.add_argument("--dim")
    an.add_argument("--level")
    an.add_argument("--top-k", type=int, default=100)
    an.add_argument("--min-jump", type=float, default=0.01)
    an.add_argument("--f-star", type=float)
    an.set_defaults(func=cmd_analyze)

    enc = sub.add_parser("encoders", help="encoder building blocks")
    esub = enc.add_subparsers(dest="action", required=True, parser_class=_Parser)
    st = esub.add_parser("selftest", help="numerical checks of the encoder blocks")
    st.add_argument("--seed", type=int, default=0)
    st.set_defaults(func=cmd_encoders_selftest)

    rp = sub.add_parser("report", help="write plot data, SVG plots and a heatmap table")
    rp.add_argument("--in", dest="inp", required=True)
    rp.add_argument("--out-dir", required=True)
    rp.add_argument("--window", type=int, default=100)
    rp.add_argument("--projection", default="backbone")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LogFormatError, IngestError, SpaceError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (AnalysisError, ValueError, ArithmeticError) as exc:
        print(f"analysis error: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


def cli(argv: Sequence[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
