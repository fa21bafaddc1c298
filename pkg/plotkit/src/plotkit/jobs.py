"""CSV loading and validation for plot jobs.

Two input schemas are understood: per-iteration metrics tables written by
the training runs, and the compare tables written by budget sweeps. Both
are validated column by column so a mismatch can name the missing field.
"""

import csv
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

METRICS_COLUMNS = ("iteration", "reward_mean", "reward_std", "zero_std_ratio",
                   "smoothed_std", "dispersion", "mode_coverage",
                   "l_emb_final", "wallclock_s")
COMPARE_COLUMNS = ("G", "K", "seed", "final_reward", "final_zero_std_ratio",
                   "final_mode_coverage")


class SchemaError(Exception):
    """Input CSV does not match the expected schema."""


@dataclass
class PlotJob:
    inputs: List[Tuple[str, str]]      # (path, legend label)
    out_path: str
    kind: str


def _check_columns(path: str, header: Sequence[str], expected: Sequence[str]) -> None:
    for col in expected:
        if col not in header:
            raise SchemaError(f"{path}: missing column {col!r}")
    for col in header:
        if col not in expected:
            raise SchemaError(f"{path}: unexpected column {col!r}")


def load_metrics_csv(path: str) -> Dict[str, List[float]]:
    """Columns of a per-iteration metrics CSV, as lists keyed by name."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected a metrics header")
        _check_columns(path, reader.fieldnames, METRICS_COLUMNS)
        cols: Dict[str, List[float]] = {name: [] for name in METRICS_COLUMNS}
        for row in reader:
            for name in METRICS_COLUMNS:
                try:
                    cols[name].append(float(row[name]))
                except (TypeError, ValueError):
                    raise SchemaError(
                        f"{path}: bad value {row[name]!r} in column {name!r}")
    return cols


def load_compare_csv(path: str) -> List[Dict[str, float]]:
    """Rows of a budget-sweep compare CSV; duplicate (G, K, seed) is an error."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty file, expected a compare header")
        _check_columns(path, reader.fieldnames, COMPARE_COLUMNS)
        rows = []
        seen = set()
        for row in reader:
            try:
                parsed = {name: float(row[name]) for name in COMPARE_COLUMNS}
            except (TypeError, ValueError):
                raise SchemaError(f"{path}: unparsable row {row!r}")
            key = (parsed["G"], parsed["K"], parsed["seed"])
            if key in seen:
                raise SchemaError(
                    f"{path}: duplicate entry for G={int(key[0])} "
                    f"K={int(key[1])} seed={int(key[2])}")
            seen.add(key)
            rows.append(parsed)
    return rows
