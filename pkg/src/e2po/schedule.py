"""Noise-aware condition interpolation and reference-anchored batch assembly."""

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch


@dataclass
class ConditionContext:
    """A pooled conditioning vector tagged with its provenance:
    'original', 'variant(k)', or 'interpolated(k, g)'."""

    vector: torch.Tensor
    kind: str = "original"          # original | variant | interpolated
    k: Optional[int] = None
    g: Optional[float] = None

    @property
    def provenance(self) -> str:
        if self.kind == "original":
            return "original"
        if self.kind == "variant":
            return f"variant({self.k})"
        return f"interpolated({self.k}, {self.g:.6g})"


def gamma(sigma_t: float, rho: float) -> float:
    """Perturbation ramp: clip((sigma_t - (1 - rho)) / rho, 0, 1).

    Zero for sigma_t <= 1-rho, one at sigma_t = 1; nondecreasing.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho}")
    if not 0.0 <= sigma_t <= 1.0:
        raise ValueError(f"sigma_t must lie in [0, 1], got {sigma_t}")
    if sigma_t >= 1.0:
        return 1.0  # exact top of ramp regardless of rounding in the ratio
    return min(1.0, max(0.0, (sigma_t - (1.0 - rho)) / rho))


def interpolate_condition(c_opt: ConditionContext, c_orig: ConditionContext,
                          g: float) -> ConditionContext:
    """g * c_opt + (1-g) * c_orig, tagged interpolated(k, g)."""
    if not 0.0 <= g <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {g}")
    if c_opt.vector.shape != c_orig.vector.shape:
        raise ValueError("condition dimension mismatch")
    vec = g * c_opt.vector + (1.0 - g) * c_orig.vector
    return ConditionContext(vector=vec, kind="interpolated", k=c_opt.k, g=g)


def assemble_batch(c_orig: ConditionContext,
                   variants: Sequence[ConditionContext]) -> List[ConditionContext]:
    """Reference-anchored batch: the untouched original at position 0
    followed by the K-1 variants."""
    return [c_orig, *variants]
