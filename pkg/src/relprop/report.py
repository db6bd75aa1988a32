"""JSON-lines reports with a plain-text summary and optional matplotlib figures."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    return v


def dumps_record(record: dict) -> str:
    return json.dumps({k: _clean(v) for k, v in record.items()}, sort_keys=True, separators=(",", ":"))


def write_records(stream: TextIO, records: Iterable[dict]) -> None:
    for r in records:
        stream.write(dumps_record(r) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.2e}"
    return str(v)


def summary_table(summaries: Sequence[dict]) -> str:
    """Fixed-width table of the summary and Wilcoxon records."""
    lines = []
    rows = [s for s in summaries if s.get("kind") == "summary"]
    for metric in dict.fromkeys(r["metric"] for r in rows):
        sub = [r for r in rows if r["metric"] == metric]
        cols = ["mean_lc", "mean_c", "mean_total", "median_total", "product_of_means"] if metric == "gae" else ["mean_value", "median_value"]
        width = max(len(r["method"]) for r in sub) + 2
        lines.append(f"[{metric}]")
        lines.append("method".ljust(width) + "".join(c.rjust(18) for c in cols) + "n".rjust(6) + "skip".rjust(6))
        for r in sub:
            lines.append(r["method"].ljust(width) + "".join(_fmt(r.get(c)).rjust(18) for c in cols) + str(r["n"]).rjust(6) + str(r["skipped"]).rjust(6))
        for w in (s for s in summaries if s.get("kind") == "wilcoxon" and s["metric"] == metric):
            lines.append(f"  wilcoxon {w['a']} vs {w['b']}: p = {_fmt(w['p'])} (n = {w['n']})")
    return "\n".join(lines)


def render_figures(directory, records: Sequence[dict], summaries: Sequence[dict], curves: dict | None = None) -> list[Path]:
    """Write PNG figures next to the report; returns the written paths.

    One bar chart per metric with per-method means, and, when ``curves``
    (method -> dict of mean MoRF/LeRF output arrays) is given, a line plot
    of the masking curves.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rows = [s for s in summaries if s.get("kind") == "summary"]
    for metric in dict.fromkeys(r["metric"] for r in rows):
        sub = [r for r in rows if r["metric"] == metric]
        names = [r["method"] for r in sub]
        fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(names) + 2), 3.2))
        if metric == "gae":
            x = np.arange(len(names))
            for off, key, lab in ((-0.27, "mean_lc", "LC"), (0.0, "mean_c", "C"), (0.27, "mean_total", "GAE")):
                ax.bar(x + off, [r.get(key) or 0.0 for r in sub], width=0.27, label=lab)
            ax.legend(frameon=False, fontsize=8)
        else:
            x = np.arange(len(names))
            ax.bar(x, [r.get("mean_value") or 0.0 for r in sub], color="0.4")
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=40, ha="right", fontsize=8)
        ax.set_ylabel(f"mean {metric}")
        ax.spines[["top", "right"]].set_visible(False)
        fig.tight_layout()
        path = out_dir / f"{metric}_means.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    if curves:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        any_method = next(iter(curves.values()))
        steps = np.arange(1, len(any_method["o_morf"]) + 1)
        ax.plot(steps, any_method["o_morf"], "k-", label="output, MoRF")
        ax.plot(steps, any_method["o_lerf"], "k--", label="output, LeRF")
        for name, c in curves.items():
            ax.plot(steps, c["sim_lerf"] - c["sim_morf"], label=f"d_A {name}", lw=1)
        ax.set_xlabel("masking step")
        ax.set_ylabel("mean normalized value")
        ax.legend(frameon=False, fontsize=7)
        ax.spines[["top", "right"]].set_visible(False)
        fig.tight_layout()
        path = out_dir / "gae_masking_curves.png"
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
