"""Delimited report files and popularity-vs-position figures.

The alignment table and per-bin figure data go out as CSV (byte-stable across
platforms); figures are rendered with matplotlib to SVG next to them.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Mapping, Sequence

from .metrics import PopPositionBin

log = logging.getLogger(__name__)

ALIGNMENT_COLUMNS = ("dataset", "cohort", "method", "pds", "epd",
                     "no_cf_rate", "p_value_vs_accent")
FIG_COLUMNS = ("cohort", "bin", "method", "x", "y")

METHOD_STYLE = {
    "accent": {"color": "tab:red", "marker": "o", "label": "accent"},
    "accent_filtered": {"color": "tab:blue", "marker": "o", "label": "accent_filtered"},
    "top_popular": {"color": "0.45", "marker": "D", "label": "top_popular"},
}


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if value != value:  # NaN
            return ""
        return format(value, ".12g")
    return str(value)


def write_alignment_csv(rows: Sequence[Mapping], path: str | Path) -> Path:
    """One row per (dataset, cohort, method) with PDS/EPD/no-CF/significance."""
    path = Path(path)
    lines = [",".join(ALIGNMENT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in ALIGNMENT_COLUMNS))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_fig_bins_csv(bins: Sequence[PopPositionBin], path: str | Path) -> Path:
    """Figure source data: one row per (cohort, bin, method) point."""
    path = Path(path)
    lines = [",".join(FIG_COLUMNS)]
    for b in bins:
        lines.append(",".join([b.cohort, str(b.bin_index), b.method,
                               _fmt(b.mean_normalized_position),
                               _fmt(b.mean_cf_popularity)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def render_pop_position_figure(bins: Sequence[PopPositionBin], cohort: str,
                               path: str | Path) -> Path | None:
    """Scatter of per-bin mean counterfactual popularity vs normalized position.

    Paired accent / accent_filtered points of the same bin are joined with a
    gray segment so the correction direction is visible per bin.
    """
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "popcfx"
    import matplotlib.pyplot as plt

    rows = [b for b in bins if b.cohort == cohort]
    if not rows:
        return None
    by_method: dict[str, list[PopPositionBin]] = {}
    by_bin: dict[int, dict[str, PopPositionBin]] = {}
    for b in rows:
        by_method.setdefault(b.method, []).append(b)
        by_bin.setdefault(b.bin_index, {})[b.method] = b

    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    for methods in by_bin.values():
        if "accent" in methods and "accent_filtered" in methods:
            a, f = methods["accent"], methods["accent_filtered"]
            ax.plot([a.mean_normalized_position, f.mean_normalized_position],
                    [a.mean_cf_popularity, f.mean_cf_popularity],
                    color="0.7", linewidth=1.0, zorder=1)
    for method in sorted(by_method):
        style = METHOD_STYLE.get(method, {"color": "tab:green", "marker": "s",
                                          "label": method})
        xs = [b.mean_normalized_position for b in by_method[method]]
        ys = [b.mean_cf_popularity for b in by_method[method]]
        ax.scatter(xs, ys, s=24, color=style["color"], marker=style["marker"],
                   label=style["label"], zorder=2)
    if all(b.mean_cf_popularity > 0 for b in rows):
        ax.set_yscale("log")
    ax.set_xlabel("mean normalized position in history")
    ax.set_ylabel("mean counterfactual popularity")
    ax.set_title(f"{cohort} users")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def emit_report(rows: Sequence[Mapping], fig_bins: Sequence[PopPositionBin],
                out_dir: str | Path, fmt: str = "csv",
                dataset: str = "dataset") -> list[Path]:
    """Write alignment + figure-bin CSVs, and SVG figures when fmt is 'svg'."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_alignment_csv(rows, out_dir / "alignment.csv"),
               write_fig_bins_csv(fig_bins, out_dir / "pop_position_bins.csv")]
    if fmt == "svg":
        for cohort in sorted({b.cohort for b in fig_bins}):
            out = render_pop_position_figure(fig_bins, cohort,
                                             out_dir / f"pop_vs_position_{cohort}.svg")
            if out is not None:
                written.append(out)
    return written
