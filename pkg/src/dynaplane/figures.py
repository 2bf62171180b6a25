"""Report figures rendered to files next to the CSV outputs.

All plotting goes through the Agg backend so figure generation works
headless; style defaults are kept deliberately plain.
"""

from __future__ import annotations

import csv
import math
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.figsize": (7.2, 4.2),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "legend.fontsize": 8,
}


def _styled():
    return plt.rc_context(RC)


def _read_metrics_csv(path):
    rows = []
    with open(path) as fh:
        for rec in csv.DictReader(fh):
            rows.append(rec)
    return rows


def save_training_curves(metrics_csv, out_png):
    """Loss-term curves plus the holdout-PSNR trace from a metrics CSV."""
    rows = _read_metrics_csv(metrics_csv)
    if not rows:
        raise ValueError(f"no metric rows in {metrics_csv}")
    it = [int(r["iter"]) for r in rows]
    series = {k: [float(r[k]) for r in rows] for k in ("L_c", "L_r", "L_e",
                                                       "L_total")}
    ps = [(int(r["iter"]), float(r["psnr_holdout"])) for r in rows
          if r["psnr_holdout"] not in ("", None)
          and math.isfinite(float(r["psnr_holdout"]))]
    with _styled():
        fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.6))
        for key in ("L_total", "L_c", "L_r", "L_e"):
            vals = [max(v, 1e-12) for v in series[key]]
            axes[0].plot(it, vals, label=key)
        axes[0].set_yscale("log")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("loss")
        axes[0].legend()
        if ps:
            axes[1].plot([p[0] for p in ps], [p[1] for p in ps], "o-")
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("holdout PSNR (dB)")
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png


def save_eval_report(records, out_png):
    """Per-frame PSNR/SSIM bars for an evaluation run."""
    if not records:
        raise ValueError("no evaluation records")
    labels = [f"v{r['view']}/f{r['frame']}" for r in records]
    cap = 99.0
    ps = [min(r["psnr"], cap) for r in records]
    ss = [r["ssim"] for r in records]
    with _styled():
        fig, axes = plt.subplots(1, 2, figsize=(max(6.0, 0.5 * len(records) + 3), 3.4))
        x = range(len(records))
        axes[0].bar(x, ps, color="#4878a8")
        axes[0].set_ylabel("PSNR (dB)")
        axes[1].bar(x, ss, color="#6aa074")
        axes[1].set_ylabel("SSIM")
        axes[1].set_ylim(0, 1.02)
        for ax in axes:
            ax.set_xticks(list(x))
            ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png


def save_stats_chart(components, out_png):
    """Byte footprint per component (log scale), including the hypothetical
    dense 4D grid bar."""
    names = [c["component"] for c in components]
    bytes_ = [max(c["bytes"], 1) for c in components]
    with _styled():
        fig, ax = plt.subplots(figsize=(6.4, 3.4))
        ax.bar(range(len(names)), bytes_, color="#a86048")
        ax.set_yscale("log")
        ax.set_ylabel("bytes (fp32)")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        fig.tight_layout()
        fig.savefig(out_png)
        plt.close(fig)
    return out_png
