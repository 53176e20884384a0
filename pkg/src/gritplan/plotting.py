"""Report figures: training curve and baseline-vs-bilevel comparison."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from gritplan.policy import IterationRecord  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def training_curve(rows: Sequence[IterationRecord], path: str | Path, title: str = "") -> Path:
    """Z1 and Z2 per iteration on twin axes, vehicle count as bars underneath."""
    ok = [r for r in rows if r.status == "ok" and not math.isnan(r.Z1_min)]
    its = [r.iter for r in ok]
    fig, ax1 = plt.subplots(figsize=(7.0, 4.0))
    ax1.bar(its, [r.NoV for r in ok], color="0.85", width=0.6, label="NoV", zorder=1)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("vehicles (NoV)")
    ax2 = ax1.twinx()
    ax2.plot(its, [r.Z1_min for r in ok], "o-", color="tab:blue", label="Z1 (min)", zorder=3)
    ax2.set_ylabel("Z1 makespan (min)", color="tab:blue")
    ax3 = ax1.twinx()
    ax3.spines["right"].set_position(("axes", 1.15))
    ax3.plot(its, [r.Z2_kg for r in ok], "s--", color="tab:red", label="Z2 (kg CO2)", zorder=3)
    ax3.set_ylabel("Z2 emissions (kg CO2)", color="tab:red")
    failed = [r.iter for r in rows if r.status != "ok"]
    for it in failed:
        ax1.axvline(it, color="k", alpha=0.3, linestyle=":")
    handles = []
    for ax in (ax1, ax2, ax3):
        handles += ax.get_legend_handles_labels()[0]
    ax1.legend(handles, [h.get_label() for h in handles], loc="upper right", fontsize=8)
    if rows:
        ax1.set_xticks([r.iter for r in rows])
    if title:
        ax1.set_title(title)
    return _save(fig, path)


def comparison_chart(aggregate: Sequence[dict], path: str | Path, title: str = "") -> Path:
    """Side-by-side bars of mean Z1, Z2 and NoV per method.

    ``aggregate`` is the output of ``ComparisonReport.aggregate``.
    """
    metrics = [("Z1_min", "Z1 (min)"), ("Z2_kg", "Z2 (kg CO2)"), ("NoV", "NoV")]
    fig, axes = plt.subplots(1, len(metrics), figsize=(9.0, 3.4))
    names = [a["method"] for a in aggregate]
    colors = ["tab:gray", "tab:green", "tab:orange", "tab:purple"]
    for ax, (key, label) in zip(axes, metrics):
        vals = [a[key] for a in aggregate]
        ax.bar(range(len(vals)), vals, color=colors[: len(vals)])
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(names, rotation=15, fontsize=8)
        ax.set_title(label, fontsize=9)
        if vals:
            lo = min(vals)
            ax.set_ylim(lo * 0.9 if lo > 0 else 0.0, max(vals) * 1.05 or 1.0)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)
