"""Render study figures from plot-data rows.

Works from the same rows that ``plotdata.csv`` holds, so a figure can be
redrawn later from the CSV alone.
"""

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METHOD_STYLE = {
    "regret": ("minimax regret", "tab:orange"),
    "relative_risk": ("relative risk", "tab:blue"),
    "pooled": ("pooled", "tab:green"),
    "risk_2site": ("two-site risk", "tab:purple"),
}


def setup_rc_params(fontsize=9):
    matplotlib.rcdefaults()
    matplotlib.use("Agg")
    matplotlib.rcParams.update({
        "font.size": fontsize,
        "axes.labelsize": fontsize,
        "legend.fontsize": fontsize - 1,
        "xtick.labelsize": fontsize - 1,
        "ytick.labelsize": fontsize - 1,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "savefig.dpi": 150,
    })


def figsize(width=6.5, ratio=None):
    ratio = ratio or (math.sqrt(5) - 1.0) / 2.0
    return width, width * ratio


def _grouped_bars(ax, groups, methods, values, errors):
    n = len(methods)
    width = 0.8 / max(n, 1)
    for k, m in enumerate(methods):
        label, color = METHOD_STYLE.get(m, (m, None))
        xs = [i + (k - (n - 1) / 2) * width for i in range(len(groups))]
        ax.bar(xs, [values[(m, g)] for g in groups], width, yerr=[errors[(m, g)] for g in groups],
               label=label, color=color, capsize=2, linewidth=0)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(groups, rotation=30, ha="right")
    ax.legend(frameon=False)


def _collect(rows, figure, scenario=None):
    sel = [r for r in rows if r["figure"] == figure and (scenario is None or r["scenario"] == scenario)]
    groups, methods = [], []
    values, errors = {}, {}
    for r in sel:
        if r["label"] not in groups:
            groups.append(r["label"])
        if r["method"] not in methods:
            methods.append(r["method"])
        values[(r["method"], r["label"])] = r["mean"]
        errors[(r["method"], r["label"])] = r["stderr"]
    return groups, methods, values, errors


def render_figures(rows, out_dir, prefix="study"):
    """Write one per-site chart per scenario and one worst-case chart; returns the paths."""
    setup_rc_params()
    paths = []
    scenarios = []
    for r in rows:
        if r["figure"] == "per_site" and r["scenario"] not in scenarios:
            scenarios.append(r["scenario"])
    for sc in scenarios:
        fig, ax = plt.subplots(figsize=figsize())
        _grouped_bars(ax, *_collect(rows, "per_site", sc))
        ax.set_ylabel("mean regret (MSE)")
        ax.set_title(f"per-site regret, {sc} allocation")
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_per_site_{sc.replace(':', '')}.png")
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)

    fig, ax = plt.subplots(figsize=figsize())
    _grouped_bars(ax, *_collect(rows, "worst_case"))
    ax.set_ylabel("mean worst-case regret")
    fig.tight_layout()
    path = os.path.join(out_dir, f"{prefix}_worst_case.png")
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    paths.append(path)
    return paths
