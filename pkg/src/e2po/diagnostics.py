"""Variance-collapse and diversity instrumentation plus CSV export."""

import csv
import io
from dataclasses import dataclass, fields as dataclass_fields
from typing import List, Sequence

import torch

from .errors import E2POError
from .rewardlab import TaskSpec, nearest_mode

CSV_HEADER = ("iteration,reward_mean,reward_std,zero_std_ratio,smoothed_std,"
              "dispersion,mode_coverage,l_emb_final,wallclock_s")
DEFAULT_WINDOW = 20
DEFAULT_ALPHA = 0.1


@dataclass
class MetricsRow:
    iteration: int
    reward_mean: float
    reward_std: float
    zero_std_ratio: float
    smoothed_std: float
    dispersion: float
    mode_coverage: float
    l_emb_final: float
    wallclock_s: float


def zero_std_ratio(flags: Sequence[bool]) -> float:
    """Fraction of zero-std groups in a trailing window of flags."""
    if len(flags) == 0:
        raise ValueError("window of zero-std flags must be nonempty")
    return sum(bool(f) for f in flags) / len(flags)


def smooth(series: Sequence[float], alpha: float) -> List[float]:
    """Exponential moving average: s_0 = x_0, s_i = a*x_i + (1-a)*s_{i-1}."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if len(series) == 0:
        raise ValueError("series must be nonempty")
    out = [float(series[0])]
    for x in series[1:]:
        out.append(alpha * float(x) + (1.0 - alpha) * out[-1])
    return out


def dispersion(samples: torch.Tensor) -> float:
    """Mean pairwise Euclidean distance of an (N, D) sample set."""
    n = samples.shape[0]
    if n < 2:
        raise ValueError("dispersion needs at least 2 samples")
    d = torch.cdist(samples, samples)
    return (d.sum() / (n * (n - 1))).item()


def mode_coverage(samples: torch.Tensor, task: TaskSpec) -> float:
    """Distinct nearest modes among the samples, as a fraction of M."""
    if samples.shape[0] < 1:
        raise ValueError("mode_coverage needs at least 1 sample")
    modes = nearest_mode(samples, task)
    return len(set(modes.tolist())) / task.n_modes


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def export_csv(rows: Sequence[MetricsRow], path) -> None:
    """Write the metrics table with the fixed schema header; floats carry
    9 significant digits."""
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(CSV_HEADER + "\n")
            for row in rows:
                fields = [str(row.iteration)] + [
                    _fmt(getattr(row, f.name))
                    for f in dataclass_fields(MetricsRow)[1:]
                ]
                fh.write(",".join(fields) + "\n")
    except OSError as exc:
        raise E2POError(f"failed to write metrics CSV at {path}: {exc}") from exc


def parse_csv(path) -> List[MetricsRow]:
    """Inverse of export_csv, used by the diagnose subcommand."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != CSV_HEADER:
            raise E2POError(f"unexpected metrics header in {path}: {header!r}")
        rows = []
        for line in fh:
            parts = line.strip().split(",")
            rows.append(MetricsRow(int(parts[0]), *[float(p) for p in parts[1:]]))
    return rows
