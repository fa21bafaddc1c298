"""Negative-aware fine-tuning objective: group reward normalization into
optimality probabilities, implicit positive/negative velocity policies,
and the contrastive velocity / self-normalized x0-regression losses."""

from dataclasses import dataclass
from typing import Tuple

import torch

from .errors import NumericalFailure
from .flowcore import predict_x0

DEFAULT_STD_FLOOR = 1e-6
DEFAULT_DENOM_FLOOR = 1e-8


@dataclass
class GroupRecord:
    """Per-group reward statistics: raw moments, the stabilizer Z, the
    normalized optimality probabilities, and the zero-std flag."""

    mean_raw: float
    std_raw: float
    z: float
    optimality: torch.Tensor
    zero_std: bool


def optimality_probability(raw: torch.Tensor,
                           std_floor: float = DEFAULT_STD_FLOOR) -> Tuple[torch.Tensor, GroupRecord]:
    """r_i = 0.5 + 0.5 * clip((raw_i - mean) / Z, -1, 1) with
    Z = max(group std, std_floor).

    When the group std collapses below the floor every r_i is exactly 0.5
    and the zero_std flag is set; this is the vanishing-signal pathology,
    reported rather than raised.
    """
    if raw.numel() < 2:
        raise ValueError("group must contain at least 2 rewards")
    mean = raw.mean()
    std = raw.std(correction=0)
    zero_std = bool(std < std_floor)
    if zero_std:
        r = torch.full_like(raw, 0.5)
    else:
        r = 0.5 + 0.5 * torch.clamp((raw - mean) / std, -1.0, 1.0)
    z = max(std.item(), std_floor)
    return r, GroupRecord(mean_raw=mean.item(), std_raw=std.item(), z=z,
                          optimality=r, zero_std=zero_std)


def implicit_velocities(v_old: torch.Tensor, v_theta: torch.Tensor,
                        beta: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """v+ = (1-beta)*v_old + beta*v_theta, v- = (1+beta)*v_old - beta*v_theta.

    Satisfies v+ + v- = 2*v_old exactly for any beta.
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    v_plus = (1.0 - beta) * v_old + beta * v_theta
    v_minus = (1.0 + beta) * v_old - beta * v_theta
    return v_plus, v_minus


def nft_loss_velocity(v_old: torch.Tensor, v_theta: torch.Tensor,
                      v_target: torch.Tensor, r: torch.Tensor,
                      beta: float) -> torch.Tensor:
    """Contrastive velocity loss:
    mean_i [ r_i ||v+ - v||^2 + (1-r_i) ||v- - v||^2 ].

    ``v_old`` is the rollout policy's output and is detached here so
    gradients reach only the training parameters behind ``v_theta``.
    """
    v_plus, v_minus = implicit_velocities(v_old.detach(), v_theta, beta)
    pos = ((v_plus - v_target) ** 2).sum(dim=-1)
    neg = ((v_minus - v_target) ** 2).sum(dim=-1)
    loss = (r * pos + (1.0 - r) * neg).mean()
    if not torch.isfinite(loss):
        raise NumericalFailure("velocity NFT loss is non-finite")
    return loss


def nft_loss_x0(xt: torch.Tensor, t: torch.Tensor, v_old: torch.Tensor,
                v_theta: torch.Tensor, x0: torch.Tensor, r: torch.Tensor,
                beta: float, denom_floor: float = DEFAULT_DENOM_FLOOR) -> torch.Tensor:
    """Self-normalized x0-regression loss:
    mean_i [ r ||x+ - x0||^2 / sg(mu|x+ - x0|) + (1-r) ||x- - x0||^2 / sg(mu|x- - x0|) ]
    with x+- the data predicted from the implicit velocities and the
    detached denominators floored at ``denom_floor``.
    """
    v_plus, v_minus = implicit_velocities(v_old.detach(), v_theta, beta)
    t = t.reshape(-1, 1) if torch.is_tensor(t) else torch.full((xt.shape[0], 1), float(t), dtype=xt.dtype)
    x_plus = predict_x0(xt, t, v_plus)
    x_minus = predict_x0(xt, t, v_minus)
    err_plus = x_plus - x0
    err_minus = x_minus - x0
    den_plus = err_plus.abs().mean(dim=-1).detach().clamp_min(denom_floor)
    den_minus = err_minus.abs().mean(dim=-1).detach().clamp_min(denom_floor)
    pos = (err_plus**2).sum(dim=-1) / den_plus
    neg = (err_minus**2).sum(dim=-1) / den_minus
    loss = (r * pos + (1.0 - r) * neg).mean()
    if not torch.isfinite(loss):
        raise NumericalFailure("x0-regression NFT loss is non-finite")
    return loss


def kl_proxy(v_theta: torch.Tensor, v_ref: torch.Tensor) -> torch.Tensor:
    """Mean squared velocity difference to the frozen reference policy.

    Stand-in regularizer attached to the KL penalty weight; set the
    weight to zero to disable it exactly.
    """
    if v_theta.shape != v_ref.shape:
        raise ValueError("dimension mismatch between policy and reference velocities")
    return ((v_theta - v_ref.detach()) ** 2).mean()
