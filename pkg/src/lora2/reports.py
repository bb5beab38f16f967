"""CSV/JSON run reports and the figures rendered next to them."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .losses import HyperPrior, variational_diagnostic

METRIC_COLUMNS = ("step", "total", "mse", "reg", "entropy", "weight", "active_params", "bytes")


def _writer(f):
    return csv.writer(f, lineterminator="\n")


def write_metrics(history, path: Path) -> None:
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(METRIC_COLUMNS)
        for row in history.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def write_ranks(history, path: Path) -> None:
    """One row per layer: name, kind, final rank, then the rank after each refresh."""
    interval = history.config.rank_refresh_interval
    steps = [r["step"] for r in history.rows if r["step"] % interval == 0]
    snap = {r["step"]: i for i, r in enumerate(history.rows)}
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(["layer_name", "kind", "final_rank"] + [f"step_{s}" for s in steps])
        for k, (name, kind) in enumerate(zip(history.layer_names, history.layer_kinds)):
            w.writerow([name, kind, history.final_ranks[k]]
                       + [history.ranks[snap[s]][k] for s in steps])


def summary(history) -> dict:
    cfg = history.config
    layers = history.model.layers if history.model is not None else []
    prior = HyperPrior(cfg.mu_lambda, cfg.sigma_lambda, cfg.sigma_theta)
    return {
        "config": cfg.to_dict(),
        "steps_run": len(history),
        "initial": history.initial,
        "final": history.final,
        "layers": [
            {"name": l.name, "kind": l.kind, "rank": l.d, "nu": l.rank.nu, "m": l.base.m,
             "n": l.base.n}
            for l in layers
        ],
        "resize_events": len(history.resizes),
        "diagnostic": variational_diagnostic([l.rank.nu for l in layers], layers, prior),
        "bytes": len(history.checkpoint),
    }


def export_reports(history, outdir: str | os.PathLike, figures: bool = True) -> list[Path]:
    """Write metrics.csv, ranks.csv, summary.json (and PNG figures) into ``outdir``."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "metrics.csv", out / "ranks.csv", out / "summary.json"]
    write_metrics(history, written[0])
    write_ranks(history, written[1])
    written[2].write_text(json.dumps(summary(history), indent=2) + "\n")
    if figures and len(history):
        from . import plots

        written += plots.run_figures(history, out)
    return written


def write_sweep(rows, outdir: str | os.PathLike, figures: bool = True) -> list[Path]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = _writer(f)
        w.writerow(["label", "rank", "final_mse", "active_params", "bytes", "layer_ranks"])
        for r in rows:
            w.writerow([r.label, "" if r.rank is None else r.rank, _fmt(r.final_mse), r.params,
                        r.bytes, " ".join(map(str, r.ranks))])
    written = [path]
    if figures:
        from . import plots

        written.append(plots.tradeoff_figure(rows, out / "tradeoff.png"))
    return written


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
