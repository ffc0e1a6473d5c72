"""PNG figures rendered next to the CSV traces."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from voltchain.harness.runner import RunReport  # noqa: E402


def _series(rows):
    out = defaultdict(lambda: ([], []))
    for step, key, val in rows:
        xs, ys = out[key]
        xs.append(step)
        ys.append(val)
    return out


def _plot(rows, title: str, ylabel: str, path: Path, keys=None, label="agent", band=None) -> Path:
    fig, ax = plt.subplots(figsize=(8, 4.5))
    series = _series(rows)
    for key in sorted(series):
        if keys is not None and key not in keys:
            continue
        xs, ys = series[key]
        ax.plot(xs, ys, label=f"{label} {key}", lw=1.2)
    if band is not None:
        for y in band:
            ax.axhline(y, color="k", ls="--", lw=0.8)
    ax.set_title(title)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def watched_buses(report: RunReport, limit: int = 6) -> list[int]:
    """Buses with the largest excursion from 1.0 p.u. over the run."""
    worst: dict[int, float] = {}
    for _, bus, v in report.voltages:
        worst[bus] = max(worst.get(bus, 0.0), abs(v - 1.0))
    return sorted(sorted(worst, key=lambda b: (-worst[b], b))[:limit])


def render_figures(report: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        _plot(report.voltages, f"{report.scenario}: bus voltages", "v (p.u.)",
              out / "voltages.png", keys=set(watched_buses(report)), label="bus",
              band=(0.95, 1.05)),
        _plot(report.reputation, f"{report.scenario}: reputation", "G", out / "reputation.png"),
        _plot(report.wallets, f"{report.scenario}: wallet balance", "$", out / "wallets.png"),
    ]
