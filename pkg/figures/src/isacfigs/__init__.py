"""Figure rendering for resource-trading result tables."""

from .figures import (
    METRIC_LABELS,
    PANEL_KINDS,
    PANEL_METRICS,
    PANEL_SCALE,
    PANEL_X,
    FigureSpec,
    SchemaError,
    load_rows,
    panel_columns,
    render,
    summary_table,
)

__version__ = "0.1.0"

__all__ = [
    "FigureSpec",
    "METRIC_LABELS",
    "PANEL_KINDS",
    "PANEL_METRICS",
    "PANEL_SCALE",
    "PANEL_X",
    "SchemaError",
    "load_rows",
    "panel_columns",
    "render",
    "summary_table",
]
