"""PNG figures for the evaluation reports (non-interactive Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (4.5, 3.4),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_cmc(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(report.ranks, report.rates, marker="o")
        ax.set_xticks(report.ranks)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("rank")
        ax.set_ylabel("identification rate")
        ax.set_title(f"CMC ({report.metric})")
        return _save(fig, path)


def plot_roc(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(report.fmr, report.tmr, drawstyle="steps-post")
        ax.axvline(0.05, color="0.6", ls="--", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false match rate")
        ax.set_ylabel("true match rate")
        ax.set_title(f"ROC ({report.metric}), TMR@5% = {report.tmr_at_5:.3f}")
        return _save(fig, path)


def plot_sweep(result, path):
    rows = result["rows"]
    ks = [r["k"] for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ks, [r["tmr_at_5"] for r in rows], marker="o", label="TMR@5%FMR")
        ax.plot(ks, [r["rank1"] for r in rows], marker="s", label="rank-1")
        ax.set_xscale("log", base=2)
        ax.set_xticks(ks)
        ax.set_xticklabels([str(k) for k in ks])
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("embedding size k")
        ax.set_ylabel("validation accuracy")
        ax.legend(frameon=False)
        return _save(fig, path)
