"""Rectified-flow kinematics: linear interpolation paths, velocity targets,
data recovery, and Euler(-Maruyama) trajectory sampling."""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch

from .errors import NumericalFailure


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass
class SamplePoint:
    """One training point on a linear noise-to-data path.

    When all fields are populated together they satisfy
    xt = (1-t)*x0 + t*x1 and v = x1 - x0.
    """

    x0: torch.Tensor
    x1: torch.Tensor
    t: float
    xt: torch.Tensor
    v: torch.Tensor

    @classmethod
    def make(cls, x0: torch.Tensor, x1: torch.Tensor, t: float) -> "SamplePoint":
        return cls(x0=x0, x1=x1, t=t, xt=interpolate(x0, x1, t), v=target_velocity(x0, x1))


@dataclass
class Trajectory:
    """Integration record: (t, x) states from t=1 down to t=0 plus the
    provenance tag of the condition used at each step."""

    states: List[Tuple[float, torch.Tensor]] = field(default_factory=list)
    conditions_used: List[str] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1][1]


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: float) -> torch.Tensor:
    """xt = (1-t)*x0 + t*x1."""
    _check_same_shape(x0, x1)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Regression target v = x1 - x0 of the flow-matching objective."""
    _check_same_shape(x0, x1)
    return x1 - x0


def predict_x0(xt: torch.Tensor, t, v: torch.Tensor) -> torch.Tensor:
    """Invert the interpolation: x0 = xt - t*v.

    Exact inverse of (interpolate, target_velocity) for any (x0, x1, t).
    ``t`` may be a scalar or a per-row tensor broadcastable against ``xt``.
    """
    return xt - t * v


def sample_trajectory(
    model,
    x1: torch.Tensor,
    cond_fn: Callable[[int], "object"],
    steps: int,
    noise_scale: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> Trajectory:
    """Integrate dx = -v_theta dt from t=1 to t=0 on a uniform grid.

    ``cond_fn(step)`` supplies the ConditionContext for each of the
    ``steps`` Euler steps. With noise_scale > 0 an Euler-Maruyama term
    noise_scale*sqrt(dt)*N(0, I) is added per step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if noise_scale < 0:
        raise ValueError(f"noise_scale must be >= 0, got {noise_scale}")
    dt = 1.0 / steps
    x = x1.clone()
    traj = Trajectory(states=[(1.0, x.clone())])
    with torch.no_grad():
        for step in range(steps):
            t = 1.0 - step * dt
            cond = cond_fn(step)
            v = model(x, t, cond.vector)
            if not torch.isfinite(v).all():
                raise NumericalFailure("velocity field produced non-finite output", where=f"step {step}")
            x = x - dt * v
            if noise_scale > 0.0:
                x = x + noise_scale * dt**0.5 * torch.randn(
                    x.shape, generator=rng, dtype=x.dtype
                )
            t_next = 0.0 if step == steps - 1 else 1.0 - (step + 1) * dt
            traj.states.append((t_next, x.clone()))
            traj.conditions_used.append(cond.provenance)
    return traj


def sample_batch(
    model,
    x1: torch.Tensor,
    cond_fn: Callable[[int], torch.Tensor],
    steps: int,
    noise_scale: float = 0.0,
    rng: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Vectorized sampler used by the trainer: integrates a whole (N, D)
    batch at once. ``cond_fn(step)`` returns the (N, Dc) condition matrix
    for that step. Returns the final (N, D) samples."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    x = x1.clone()
    with torch.no_grad():
        for step in range(steps):
            t = 1.0 - step * dt
            v = model(x, t, cond_fn(step))
            if not torch.isfinite(v).all():
                raise NumericalFailure("velocity field produced non-finite output", where=f"step {step}")
            x = x - dt * v
            if noise_scale > 0.0:
                x = x + noise_scale * dt**0.5 * torch.randn(
                    x.shape, generator=rng, dtype=x.dtype
                )
    return x
