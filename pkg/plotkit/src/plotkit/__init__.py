"""Offline rendering of training-variance plots from metrics CSVs."""

from .jobs import PlotJob, SchemaError, load_compare_csv, load_metrics_csv
from .render import PLOT_KINDS, render

__all__ = ["PlotJob", "SchemaError", "load_compare_csv", "load_metrics_csv",
           "PLOT_KINDS", "render"]
