"""Report emission: plot-data CSVs plus minimal, byte-stable SVG line plots."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .analysis import cumulative_best, entropy_series, innovation_series, jsd_series  # noqa: E402
from .analysis.stats import group_mean_table, heatmap_grid  # noqa: E402
from .records import ExperimentRecord, completion_order  # noqa: E402

SVG_RC = {"svg.hashsalt": "expsearch", "svg.fonttype": "none", "path.simplify": False}


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.9g}"


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def line_svg(path: Path, series: Sequence[tuple[str, np.ndarray, np.ndarray]], xlabel: str, ylabel: str,
             logx: bool = False) -> Path:
    with plt.rc_context(SVG_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, x, y in series:
            ax.plot(x, y, label=label, linewidth=1.2)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if len(series) > 1:
            ax.legend(loc="best", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def emit_report(records: Sequence[ExperimentRecord], out_dir: str | Path, window: int = 100,
                projection: str = "backbone") -> list[Path]:
    """Write cumulative-best, entropy, JSD, innovation and heatmap outputs.

    Returns the written paths in a fixed order. JSD needs two agents with
    records; with fewer it is skipped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = completion_order(records)
    written: list[Path] = []
    win = max(1, min(window, sum(r.completed for r in records) or 1))

    best = cumulative_best(records)
    written.append(write_csv(out / "cumulative_best.csv", ["n", "ap_star"],
                             list(zip(best.n.tolist(), best.ap_star.tolist()))))
    written.append(line_svg(out / "cumulative_best.svg", [("AP*", best.n, best.ap_star)],
                            "completed experiments", "best AP"))

    ent = entropy_series([r for r in records if r.completed], projection)
    written.append(write_csv(out / "entropy.csv", ["t", "entropy"], list(zip(ent.t.tolist(), ent.values.tolist()))))
    written.append(line_svg(out / "entropy.svg", [(f"H({projection})", ent.t, ent.values)],
                            "completed experiments", "entropy (nats)"))

    agents = sorted({r.agent for r in records if r.completed})
    if len(agents) >= 2:
        js = jsd_series(records, agents[0], agents[1], projection, window=win)
        written.append(write_csv(out / "jsd.csv", ["t", "jsd"], list(zip(js.t.tolist(), js.values.tolist()))))
        written.append(line_svg(out / "jsd.svg", [(f"{agents[0]} vs {agents[1]}", js.t, js.values)],
                                "completed experiments", "JSD"))

    inn = innovation_series(records, window=win)
    written.append(write_csv(out / "innovation.csv", ["t", "rate"], list(zip(inn.t.tolist(), inn.values.tolist()))))
    written.append(line_svg(out / "innovation.svg", [("innovation rate", inn.t, inn.values)],
                            "completed experiments", "P(new best)"))

    rows = group_mean_table(records, ("backbone", "encoder"), min_n=1)
    row_levels, col_levels, grid = heatmap_grid(rows)
    table = [[lvl, *grid[i].tolist()] for i, lvl in enumerate(row_levels)]
    written.append(write_csv(out / "heatmap_backbone_encoder.csv", ["backbone", *col_levels], table))
    return written
