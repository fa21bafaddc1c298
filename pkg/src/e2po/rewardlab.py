"""Synthetic conditional-generation tasks: Gaussian mixtures on a circle
with analytically computable continuous and discrete rewards."""

import math
from dataclasses import dataclass, field
from typing import Tuple

import torch

DTYPE = torch.float64


@dataclass
class TaskSpec:
    """Gaussian-mixture task: M modes evenly spaced on a circle of radius
    ``radius`` (in the first two coordinates if dim > 2). Prompt m targets
    mode m."""

    dim: int = 2
    n_modes: int = 8
    radius: float = 4.0
    mode_std: float = 0.3

    def __post_init__(self):
        if self.n_modes < 2:
            raise ValueError("n_modes must be >= 2")

    @property
    def centers(self) -> torch.Tensor:
        angles = torch.arange(self.n_modes, dtype=DTYPE) * (2.0 * math.pi / self.n_modes)
        c = torch.zeros(self.n_modes, self.dim, dtype=DTYPE)
        c[:, 0] = self.radius * torch.cos(angles)
        c[:, 1] = self.radius * torch.sin(angles)
        return c


def sample_task_data(task: TaskSpec, mode: int, n: int,
                     rng: torch.Generator) -> torch.Tensor:
    """n draws from N(center_mode, mode_std^2 I)."""
    if not 0 <= mode < task.n_modes:
        raise ValueError(f"mode {mode} out of range [0, {task.n_modes})")
    if n == 0:
        return torch.empty(0, task.dim, dtype=DTYPE)
    noise = torch.randn(n, task.dim, generator=rng, dtype=DTYPE)
    return task.centers[mode] + task.mode_std * noise


def reward_continuous(x: torch.Tensor, target: torch.Tensor, bandwidth: float) -> torch.Tensor:
    """exp(-||x - target||^2 / bandwidth^2), elementwise over a batch."""
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    d2 = ((x - target) ** 2).sum(dim=-1)
    return torch.exp(-d2 / bandwidth**2)


def nearest_mode(x: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    """Index of the closest mode center; ties break to the lowest index."""
    d2 = ((x.unsqueeze(-2) - task.centers) ** 2).sum(dim=-1)
    return torch.argmin(d2, dim=-1)


def reward_discrete(x: torch.Tensor, task: TaskSpec, target_mode: int,
                    hit_radius: float = None) -> torch.Tensor:
    """1.0 where the nearest mode is the target, else 0.0.

    With ``hit_radius`` set, the sample must additionally land within that
    distance of the target center, so sloppy hits do not score."""
    if not 0 <= target_mode < task.n_modes:
        raise ValueError(f"target_mode {target_mode} out of range")
    if hit_radius is not None and hit_radius <= 0:
        raise ValueError(f"hit_radius must be > 0, got {hit_radius}")
    hit = nearest_mode(x, task) == target_mode
    if hit_radius is not None:
        d = (x - task.centers[target_mode]).norm(dim=-1)
        hit = hit & (d <= hit_radius)
    return hit.to(DTYPE)


def group_stats(raw: torch.Tensor, std_floor: float) -> Tuple[float, float, bool]:
    """(mean, population std, zero_std flag) of one group's raw rewards."""
    if raw.numel() < 2:
        raise ValueError("group must contain at least 2 rewards")
    mean = raw.mean().item()
    std = raw.std(correction=0).item()
    return mean, std, std < std_floor
