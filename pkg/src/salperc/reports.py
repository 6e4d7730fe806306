"""Post-fit reporting: partial-effect curves as CSV plus SVG figures.

Each univariate smooth gets a delimited curve file (grid value, estimate,
standard error) and a matching matplotlib figure with a +-1 SE band, and
the model-level numbers (effective degrees of freedom, cut points,
penalties) land in one summary JSON.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import FittedPerceptionModel


def _pyplot():
    # Agg keeps this usable on headless boxes; hashsalt + fonttype pin
    # the SVG output down to the byte for identical inputs.
    import matplotlib

    matplotlib.use("Agg", force=True)
    matplotlib.rcParams["svg.hashsalt"] = "salperc"
    matplotlib.rcParams["svg.fonttype"] = "none"
    import matplotlib.pyplot as plt

    return plt


def term_grid(model: FittedPerceptionModel, term: str, grid_points: int = 100) -> np.ndarray:
    """Evenly spaced grid over the term covariate's training range."""
    block = model.design.block_by_name(term)
    lo, hi = block.payload["spec"].range
    return np.linspace(lo, hi, grid_points)


def write_curve_csv(path, grid, curve, se) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "estimate", "se"])
        for x, y, s in zip(grid, curve, se):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])


def read_curve_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = tuple(np.array([float(r[k]) for r in rows]) for k in ("x", "estimate", "se"))
    return cols


def _curve_figure(plt, term, covariate, grid, curve, se, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.fill_between(grid, curve - se, curve + se, alpha=0.25, color="#cc4125", linewidth=0)
    ax.plot(grid, curve, color="#cc4125", linewidth=1.6)
    ax.axhline(0.0, color="#999999", linewidth=0.8, linestyle="--")
    ax.set_xlabel(covariate)
    ax.set_ylabel("partial effect")
    ax.set_title(term)
    fig.tight_layout()
    # Date metadata would otherwise make two identical runs differ
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def partial_effect_report(
    model: FittedPerceptionModel,
    out_dir,
    grid_points: int = 100,
    terms: list[str] | None = None,
) -> list[Path]:
    """Write curve CSVs, SVG figures, and summary.json under out_dir.

    Returns every path written, curve files first, summary last.
    """
    if grid_points < 2:
        raise ValueError(f"grid_points must be >= 2, got {grid_points}")
    available = model.smooth_terms()
    if terms is None:
        terms = available
    else:
        missing = [t for t in terms if t not in available]
        if missing:
            raise KeyError(f"unknown terms {missing}; available: {available}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plt = _pyplot() if terms else None

    written = []
    for term in terms:
        block = model.design.block_by_name(term)
        covariate = block.payload["covariate"]
        grid = term_grid(model, term, grid_points)
        curve, se = model.partial_effect(term, grid)
        csv_path = out_dir / f"partial_{covariate}.csv"
        svg_path = out_dir / f"partial_{covariate}.svg"
        write_curve_csv(csv_path, grid, curve, se)
        _curve_figure(plt, term, covariate, grid, curve, se, svg_path)
        written += [csv_path, svg_path]

    summary = {
        "edf": model.edf(),
        "cut_points": [float(c) for c in model.cut_points],
        "lams": model.lams,
        "converged": model.report.converged,
        "terms": list(terms),
        "grid_points": int(grid_points),
    }
    summary_path = out_dir / "summary.json"
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    written.append(summary_path)
    return written
