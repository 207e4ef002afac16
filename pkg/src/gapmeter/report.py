"""Render simulation-grid results into figures plus a derived MDE table.

Takes the results CSV produced by the grid runner and writes PNG figures for
the standard views (power curves, minimum detectable effect, bias and
dispersion versus k, homogeneity exposure) next to ``mde.csv``, the derived
delimited output. Rendering is read-only over the results file.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from gapmeter.io import atomic_write, read_results_csv  # noqa: E402
from gapmeter.stats import mde  # noqa: E402

_RC = {
    "figure.figsize": (7.0, 4.5),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 150,
}


def _sorted_unique(cells: Sequence[dict], key: str) -> list:
    return sorted({cell[key] for cell in cells})


def _save(fig, out_dir: Path, name: str) -> Path:
    path = out_dir / name
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _fig_power_by_effect(cells: Sequence[dict], out_dir: Path) -> Path:
    ks = _sorted_unique(cells, "k")
    ns = _sorted_unique(cells, "n")
    fig, axes = plt.subplots(1, len(ks), figsize=(4.0 * len(ks), 3.6), sharey=True, squeeze=False)
    for ax, k in zip(axes[0], ks):
        for n in ns:
            points = sorted(
                (abs(c["effect_size"]), c["power"])
                for c in cells
                if c["k"] == k and c["n"] == n
            )
            if points:
                ax.plot(*zip(*points), marker="o", label=f"N={n:,}")
        ax.set_title(f"k = {k}")
        ax.set_xlabel("effect size (pp)")
        ax.axhline(0.8, color="gray", linestyle="--", linewidth=1)
        ax.set_ylim(0, 1.05)
    axes[0][0].set_ylabel("power")
    axes[0][-1].legend(fontsize=8)
    return _save(fig, out_dir, "power_by_effect.png")


def compute_mde_table(cells: Sequence[dict]) -> list[tuple[int, int, float | None]]:
    """Minimum detectable effect per (k, N), None when no grid point reaches 80%."""
    table = []
    for k in _sorted_unique(cells, "k"):
        for n in _sorted_unique(cells, "n"):
            curve = {
                c["effect_size"]: c["power"] for c in cells if c["k"] == k and c["n"] == n
            }
            if curve:
                table.append((k, n, mde(curve)))
    return table


def _fig_mde_by_n(table: Sequence[tuple[int, int, float | None]], out_dir: Path) -> Path:
    fig, ax = plt.subplots()
    plotted = False
    for k in sorted({k for k, _, _ in table}):
        points = [(n, value) for kk, n, value in table if kk == k and value is not None]
        if points:
            ax.plot(*zip(*points), marker="o", label=f"k={k}")
            plotted = True
    ax.set_xlabel("contacts in analysis (N)")
    ax.set_ylabel("minimum detectable effect (pp)")
    if plotted:
        ax.legend(fontsize=8)
    else:
        ax.set_title("no cell reached the power target")
    return _save(fig, out_dir, "mde_by_n.png")


def _fig_metric_by_k(cells: Sequence[dict], metric: str, label: str, name: str, out_dir: Path) -> Path:
    ks = _sorted_unique(cells, "k")
    fig, ax = plt.subplots()
    for k in ks:
        values = [c[metric] for c in cells if c["k"] == k]
        ax.plot([k] * len(values), values, "o", color="steelblue", alpha=0.5)
    means = [
        sum(c[metric] for c in cells if c["k"] == k) / len([c for c in cells if c["k"] == k])
        for k in ks
    ]
    ax.plot(ks, means, "-s", color="firebrick", label="mean over cells")
    ax.set_xlabel("k")
    ax.set_ylabel(label)
    ax.legend(fontsize=8)
    return _save(fig, out_dir, name)


def render_report(results_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write all figures and mde.csv for a results file; returns written paths."""
    cells = read_results_csv(results_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    with plt.rc_context(_RC):
        written.append(_fig_power_by_effect(cells, out))
        table = compute_mde_table(cells)
        written.append(_fig_mde_by_n(table, out))
        written.append(
            _fig_metric_by_k(cells, "bias_pct", "relative bias of observed effects (%)",
                             "bias_by_k.png", out)
        )
        written.append(
            _fig_metric_by_k(cells, "sd_c", "sd of observed effects (pp)",
                             "dispersion_by_k.png", out)
        )
        written.append(
            _fig_metric_by_k(cells, "homogeneity_fraction",
                             "fraction of rows in homogeneous classes",
                             "homogeneity_by_k.png", out)
        )
    mde_path = out / "mde.csv"
    with atomic_write(mde_path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["k", "n", "mde"])
        for k, n, value in table:
            writer.writerow([k, n, "" if value is None else repr(value)])
    written.append(mde_path)
    return written
