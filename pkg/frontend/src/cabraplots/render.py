"""Render experiment figures: faint per-trial curves with the mean in bold.

Input is the experiment manifest JSON plus the trace CSV files it lists;
this package never imports the solver.  One image holds one panel per
requested metric column, each variant in its own color, trials drawn as
translucent lines behind the arithmetic-mean curve.  Residual-like panels
default to a logarithmic vertical axis.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLUMN_ALIASES = {
    "gap": "objective_gap",
    "violation": "violation",
    "fp": "fp_residual",
    "consensus": "consensus_residual",
    "inclusion": "inclusion_residual",
}

LOG_DEFAULT = {"fp_residual", "consensus_residual", "inclusion_residual",
               "objective_gap", "violation"}


class RenderError(Exception):
    pass


@dataclass
class FigureSpec:
    manifest: str
    panels: tuple
    out: str
    log_y: tuple | None = None  # per panel; None = by column kind

    def __post_init__(self):
        self.panels = tuple(COLUMN_ALIASES.get(p, p) for p in self.panels)
        if not self.panels:
            raise RenderError("no panels requested")


def read_trace_csv(path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        cols = {name: [] for name in header}
        for line in fh:
            for name, val in zip(header, line.rstrip("\n").split(",")):
                cols[name].append(float(val) if val else None)
    return cols


def load_manifest(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("variants", "traces"):
        if key not in doc:
            raise RenderError(f"manifest is missing {key!r}")
    if not doc["variants"]:
        raise RenderError("manifest lists no variants")
    return doc


def mean_curve(series: list[list]) -> np.ndarray:
    """Arithmetic mean across trials, padding finished runs with last value."""
    if not series:
        raise RenderError("no trials to average")
    length = max(len(s) for s in series)
    padded = []
    for s in series:
        vals = [np.nan if v is None else float(v) for v in s]
        vals = vals + [vals[-1]] * (length - len(vals))
        padded.append(vals)
    return np.mean(np.asarray(padded), axis=0)


def collect(doc: dict, manifest_dir: str, column: str) -> dict:
    """Per variant: (list of per-trial value lists) for one column."""
    out = {}
    for variant in doc["variants"]:
        files = doc["traces"].get(variant, [])
        if not files:
            raise RenderError(f"variant {variant!r} has no trace files")
        trials = []
        for fname in files:
            cols = read_trace_csv(os.path.join(manifest_dir, fname))
            if column not in cols:
                raise RenderError(f"column {column!r} not in {fname}")
            vals = cols[column]
            if all(v is None for v in vals):
                raise RenderError(f"column {column!r} is empty in {fname}")
            trials.append(vals)
        out[variant] = trials
    return out


def render(spec: FigureSpec):
    """Write the figure and return the matplotlib Figure object."""
    doc = load_manifest(spec.manifest)
    base = os.path.dirname(os.path.abspath(spec.manifest))
    n_panels = len(spec.panels)
    fig, axes = plt.subplots(1, n_panels, figsize=(5.2 * n_panels, 4.0))
    if n_panels == 1:
        axes = [axes]
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]

    for ax, column, idx in zip(axes, spec.panels, range(n_panels)):
        data = collect(doc, base, column)
        use_log = (
            spec.log_y[idx] if spec.log_y is not None else column in LOG_DEFAULT
        )
        def displayable(values):
            ys = np.array([np.nan if v is None else float(v) for v in values])
            if use_log:
                ys = np.where(ys > 0.0, ys, np.nan)  # gaps where the log axis is undefined
            return ys

        for v_idx, (variant, trials) in enumerate(data.items()):
            color = colors[v_idx % len(colors)]
            for trial in trials:
                ys = displayable(trial)
                ax.plot(range(1, ys.size + 1), ys, color=color, alpha=0.25,
                        linewidth=0.8)
            mean = mean_curve(trials)
            ax.plot(range(1, mean.size + 1), displayable(mean), color=color,
                    linewidth=2.2, label=variant)
        if use_log:
            ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel(column)
        ax.legend()
    fig.tight_layout()
    fig.savefig(spec.out, dpi=120, metadata={"Software": None})
    return fig


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cabra-plots", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("render", help="render panels from a manifest")
    r.add_argument("--manifest", required=True)
    r.add_argument("--fig", required=True,
                   help="comma-separated metric columns, e.g. gap,violation")
    r.add_argument("--out", required=True)
    r.add_argument("--linear", action="store_true",
                   help="linear vertical axes (default: log for residual panels)")
    args = ap.parse_args(argv)
    panels = tuple(p.strip() for p in args.fig.split(",") if p.strip())
    try:
        spec = FigureSpec(
            manifest=args.manifest, panels=panels, out=args.out,
            log_y=tuple(False for _ in panels) if args.linear else None,
        )
        render(spec)
    except (RenderError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
