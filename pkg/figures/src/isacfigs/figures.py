"""Render figure panels and summary tables from trading result tables.

Input is the results CSV written by the market harness: one row per
trial per strategy, with metric columns named in the table header.
Rendering never writes to the input tables and produces identical
bytes for identical inputs.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
# Fixed salt keeps generated SVG element ids, and so file bytes, stable;
# text kept as text nodes so labels stay searchable in the output.
matplotlib.rcParams["svg.hashsalt"] = "isacfigs"
matplotlib.rcParams["svg.fonttype"] = "none"

import matplotlib.pyplot as plt

PANEL_KINDS = ("welfare", "overhead", "demand", "defaults", "summary")

PANEL_METRICS: dict[str, tuple[str, ...]] = {
    "welfare": ("social_welfare", "mu_utility", "bs_utility"),
    "overhead": ("rt_ms", "ni", "dibc_ms", "ecibc_w"),
    "demand": ("rdslc_b", "rdslc_p"),
    "defaults": ("drlc",),
    "summary": ("social_welfare", "rt_ms", "ni", "dibc_ms", "ecibc_w"),
}

# Abscissa column per panel; the summary table has none.
PANEL_X: dict[str, str | None] = {
    "welfare": "n_mus",
    "overhead": "n_mus",
    "demand": "overbook",
    "defaults": "n_mus",
    "summary": None,
}

PANEL_SCALE: dict[str, str] = {
    "welfare": "linear",
    "overhead": "log",
    "demand": "linear",
    "defaults": "linear",
    "summary": "linear",
}

METRIC_LABELS: dict[str, str] = {
    "social_welfare": "social welfare",
    "mu_utility": "user utility",
    "bs_utility": "station utility",
    "rt_ms": "runtime (ms)",
    "ni": "interactions",
    "dibc_ms": "interaction delay (ms)",
    "ecibc_w": "interaction energy (W s)",
    "rdslc_b": "bandwidth demand share",
    "rdslc_p": "power demand share",
    "drlc": "default rate",
}

X_LABELS: dict[str, str] = {
    "n_mus": "mobile users",
    "overbook": "overbooking rate",
}


class SchemaError(ValueError):
    """A referenced column is missing from a results table."""


@dataclass(frozen=True, slots=True)
class FigureSpec:
    """One renderable panel: input tables, kind, strategy subset, output."""

    tables: tuple[str, ...]
    panel: str
    out_path: str
    strategies: tuple[str, ...] = ()
    scale: str | None = None

    def __post_init__(self) -> None:
        if not self.tables:
            raise ValueError("tables must not be empty")
        if self.panel not in PANEL_KINDS:
            raise ValueError(f"unknown panel {self.panel!r}, expected one of {PANEL_KINDS}")
        if self.scale not in (None, "linear", "log"):
            raise ValueError(f"scale must be 'linear' or 'log', got {self.scale!r}")


def panel_columns(panel: str) -> tuple[str, ...]:
    """Columns a panel reads: strategy, the abscissa if any, and its metrics."""
    cols = ["strategy"]
    x = PANEL_X[panel]
    if x is not None:
        cols.append(x)
    cols.extend(PANEL_METRICS[panel])
    return tuple(cols)


def load_rows(tables: tuple[str, ...], required: tuple[str, ...]) -> list[dict[str, str]]:
    """Concatenate CSV tables, checking each header for the required columns."""
    rows: list[dict[str, str]] = []
    for path in tables:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            missing = [c for c in required if c not in header]
            if missing:
                raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
            rows.extend(reader)
    return rows


def _strategy_order(rows: list[dict[str, str]], requested: tuple[str, ...]) -> list[str]:
    present: list[str] = []
    for row in rows:
        name = row["strategy"]
        if name not in present:
            present.append(name)
    if not requested:
        return present
    absent = [s for s in requested if s not in present]
    if absent:
        raise SchemaError(f"strategy not in table(s): {', '.join(absent)}")
    return list(requested)


def _mean_se(values: list[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n < 2:
        return mean, 0.0
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var / n)


def _series(
    rows: list[dict[str, str]], strategy: str, x_key: str, metric: str
) -> tuple[list[float], list[float], list[float]]:
    """Per-abscissa mean and standard error of one metric for one strategy."""
    buckets: dict[float, list[float]] = {}
    for row in rows:
        if row["strategy"] != strategy:
            continue
        buckets.setdefault(float(row[x_key]), []).append(float(row[metric]))
    xs = sorted(buckets)
    means: list[float] = []
    ses: list[float] = []
    for x in xs:
        mean, se = _mean_se(buckets[x])
        means.append(mean)
        ses.append(se)
    return xs, means, ses


def summary_table(
    rows: list[dict[str, str]], strategies: tuple[str, ...] = ()
) -> tuple[list[str], list[list[str]]]:
    """Header and body of the per-strategy metric-mean table."""
    order = _strategy_order(rows, strategies)
    metrics = PANEL_METRICS["summary"]
    header = ["strategy"] + [METRIC_LABELS[m] for m in metrics]
    body: list[list[str]] = []
    for name in order:
        cells = [name]
        for metric in metrics:
            values = [float(r[metric]) for r in rows if r["strategy"] == name]
            mean, _ = _mean_se(values)
            cells.append(f"{mean:.6g}")
        body.append(cells)
    return header, body


def _save(fig: plt.Figure, out_path: str) -> None:
    directory = os.path.dirname(out_path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    # SVG output carries a creation date by default; drop it so reruns
    # produce identical bytes.
    metadata = {"Date": None} if out_path.endswith(".svg") else None
    fig.savefig(out_path, metadata=metadata)
    plt.close(fig)


def _render_lines(spec: FigureSpec, rows: list[dict[str, str]], order: list[str]) -> None:
    metrics = PANEL_METRICS[spec.panel]
    x_key = PANEL_X[spec.panel]
    assert x_key is not None
    scale = spec.scale or PANEL_SCALE[spec.panel]
    if len(metrics) == 4:
        n_rows, n_cols = 2, 2
    else:
        n_rows, n_cols = 1, len(metrics)
    fig, axes = plt.subplots(
        n_rows, n_cols, figsize=(4.0 * n_cols, 3.2 * n_rows), squeeze=False
    )
    flat = [ax for row in axes for ax in row]
    for ax, metric in zip(flat, metrics):
        for name in order:
            xs, means, ses = _series(rows, name, x_key, metric)
            ax.plot(xs, means, marker="o", markersize=3, label=name)
            if any(se > 0 for se in ses):
                lo = [m - s for m, s in zip(means, ses)]
                hi = [m + s for m, s in zip(means, ses)]
                ax.fill_between(xs, lo, hi, alpha=0.2)
        ax.set_yscale(scale)
        ax.set_xlabel(X_LABELS.get(x_key, x_key))
        ax.set_ylabel(METRIC_LABELS[metric])
        ax.grid(True, alpha=0.3)
    flat[0].legend(fontsize=8)
    fig.tight_layout()
    _save(fig, spec.out_path)


def _render_bars(spec: FigureSpec, rows: list[dict[str, str]], order: list[str]) -> None:
    metric = PANEL_METRICS["defaults"][0]
    x_key = PANEL_X["defaults"]
    assert x_key is not None
    groups = sorted({float(r[x_key]) for r in rows})
    fig, ax = plt.subplots(figsize=(1.2 + 1.4 * len(groups), 3.4))
    width = 0.8 / len(order)
    for i, name in enumerate(order):
        xs, means, ses = _series(rows, name, x_key, metric)
        by_x = dict(zip(xs, zip(means, ses)))
        heights = [by_x.get(g, (0.0, 0.0))[0] for g in groups]
        errs = [by_x.get(g, (0.0, 0.0))[1] for g in groups]
        offsets = [j + (i - (len(order) - 1) / 2) * width for j in range(len(groups))]
        ax.bar(offsets, heights, width=width, yerr=errs, capsize=2, label=name)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels([f"{g:g}" for g in groups])
    ax.set_yscale(spec.scale or PANEL_SCALE["defaults"])
    ax.set_xlabel(X_LABELS.get(x_key, x_key))
    ax.set_ylabel(METRIC_LABELS[metric])
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, spec.out_path)


def _render_summary(spec: FigureSpec, rows: list[dict[str, str]], order: list[str]) -> None:
    header, body = summary_table(rows, tuple(order))
    fig, ax = plt.subplots(figsize=(1.8 * len(header), 0.5 * (len(body) + 2)))
    ax.axis("off")
    table = ax.table(cellText=body, colLabels=header, loc="center", cellLoc="right")
    table.auto_set_font_size(False)
    table.set_fontsize(8)
    table.scale(1.0, 1.3)
    fig.tight_layout()
    _save(fig, spec.out_path)


def render(spec: FigureSpec) -> str:
    """Render one panel to spec.out_path and return that path."""
    rows = load_rows(spec.tables, panel_columns(spec.panel))
    if not rows:
        raise SchemaError(f"{spec.tables[0]}: no data rows")
    order = _strategy_order(rows, spec.strategies)
    if spec.panel == "summary":
        _render_summary(spec, rows, order)
    elif spec.panel == "defaults":
        _render_bars(spec, rows, order)
    else:
        _render_lines(spec, rows, order)
    return spec.out_path
