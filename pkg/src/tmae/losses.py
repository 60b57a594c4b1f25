"""Pretraining objectives: masked reconstruction + temporal contrastive loss.

The reconstruction term averages per-pixel squared error over the masked
patches only (visible patches contribute nothing); the normalizer is the
total masked-patch count across the clip, and each patch error is further
averaged over its p*p pixels so the loss is patch-size invariant.

The temporal term pools each frame's encoded tokens into a feature f_t,
measures cosine distance d = 1 - cos(f_t, f_{t+dt}) between every ordered
frame pair, and applies d^2 to temporally close pairs (gap <= tau_p) and
a squared hinge max(0, tau_m - d)^2 to distant ones, normalized by the
pair count C = T*(T-1)/2.

All functions are differentiable torch ops and accept a leading batch
dimension (batch elements are averaged).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch
from torch import Tensor

from .errors import (
    DegenerateNorm,
    EmptyFrame,
    EmptyMaskSet,
    ShapeMismatch,
    TooFewFrames,
)
from .masking import MaskPlan

NORM_EPS = 1e-8

Plans = Union[MaskPlan, Sequence[MaskPlan]]


def _first_plan(plan: Plans) -> MaskPlan:
    return plan if isinstance(plan, MaskPlan) else plan[0]


def _stacked_mask(plan: Plans) -> np.ndarray:
    if isinstance(plan, MaskPlan):
        return plan.mask
    return np.stack([p.mask for p in plan])


@dataclass(frozen=True)
class ContrastiveParams:
    """tau_p: frame-gap threshold for positive pairs; tau_m: hinge margin;
    weight: contribution of the contrastive term to the total loss."""

    tau_p: int = 1
    tau_m: float = 0.5
    weight: float = 0.1

    def __post_init__(self):
        if self.tau_p < 1:
            raise ValueError(f"tau_p must be >= 1, got {self.tau_p}")
        if not (0.0 < self.tau_m <= 2.0):
            raise ValueError(f"tau_m must be in (0, 2], got {self.tau_m}")
        if not (0.0 <= self.weight <= 1.0):
            raise ValueError(f"weight must be in [0, 1], got {self.weight}")


def reconstruction_loss(pred: Tensor, target: Tensor, plan: Plans) -> Tensor:
    """Masked reconstruction error.

    pred/target: (..., T, N, p*p). Returns the mean over all masked patches
    of each patch's pixel-mean squared error. A sequence of plans pairs one
    plan with each element of a leading batch dimension.
    """
    first = _first_plan(plan)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    if pred.shape[-3] != first.T or pred.shape[-2] != first.N:
        raise ShapeMismatch(
            f"patches {tuple(pred.shape[-3:-1])} do not match plan ({first.T}, {first.N})"
        )
    if first.n_masked == 0:
        raise EmptyMaskSet("mask ratio 0 leaves nothing to reconstruct")
    per_patch = ((pred - target) ** 2).mean(dim=-1)  # (..., T, N)
    mask = torch.from_numpy(_stacked_mask(plan)).to(pred.device)
    if mask.shape != per_patch.shape:
        raise ShapeMismatch(
            f"mask shape {tuple(mask.shape)} does not match patches {tuple(per_patch.shape)}"
        )
    masked_err = per_patch * mask.to(pred.dtype)
    # fixed per-frame count => sum / (T * m) is the masked-patch mean
    return masked_err.sum(dim=(-2, -1)).mean() / first.n_masked


def frame_features(encoded_visible: Tensor, plan: Plans) -> Tensor:
    """Per-frame mean of the encoded visible tokens.

    encoded_visible: (..., V, D) in frame-major order with a uniform
    per-frame count, as produced by apply_mask. Returns (..., T, D).
    """
    first = _first_plan(plan)
    per_frame = first.N - first.masked_per_frame
    if per_frame < 1:
        raise EmptyFrame("every patch in a frame is masked")
    if encoded_visible.shape[-2] != first.n_visible:
        raise ShapeMismatch(
            f"got {encoded_visible.shape[-2]} tokens, plan has {first.n_visible} visible"
        )
    lead = encoded_visible.shape[:-2]
    D = encoded_visible.shape[-1]
    grouped = encoded_visible.reshape(*lead, first.T, per_frame, D)
    return grouped.mean(dim=-2)


def cosine_distance(f_a: Tensor, f_b: Tensor) -> Tensor:
    """1 - cos(f_a, f_b), in [0, 2]. Norms below 1e-8 are rejected."""
    na = torch.linalg.vector_norm(f_a, dim=-1)
    nb = torch.linalg.vector_norm(f_b, dim=-1)
    if (na < NORM_EPS).any() or (nb < NORM_EPS).any():
        raise DegenerateNorm("feature norm below 1e-8")
    return 1.0 - (f_a * f_b).sum(dim=-1) / (na * nb)


def temporal_contrastive_loss(features: Tensor, params: ContrastiveParams) -> Tensor:
    """Contrastive loss over all ordered frame pairs of a clip.

    features: (..., T, D). Pairs with gap <= tau_p contribute d^2, the rest
    max(0, tau_m - d)^2; the sum is divided by C = T*(T-1)/2. Batch
    elements are averaged.
    """
    T = features.shape[-2]
    if T < 2:
        raise TooFewFrames(f"need at least 2 frames, got {T}")
    norms = torch.linalg.vector_norm(features, dim=-1, keepdim=True)
    if (norms < NORM_EPS).any():
        raise DegenerateNorm("frame feature norm below 1e-8")
    unit = features / norms
    dist = 1.0 - unit @ unit.transpose(-2, -1)  # (..., T, T)
    rows = torch.arange(T, device=features.device)
    gap = rows[None, :] - rows[:, None]
    upper = gap >= 1
    positive = upper & (gap <= params.tau_p)
    hinge = torch.clamp(params.tau_m - dist, min=0.0)
    terms = torch.where(positive, dist**2, hinge**2) * upper
    C = T * (T - 1) // 2
    return terms.sum(dim=(-2, -1)).mean() / C


def comparison_count(T: int) -> int:
    """Number of ordered frame pairs: sum_t (T - t) = T*(T-1)/2."""
    return T * (T - 1) // 2


def total_loss(l_rec: Tensor, l_contrast: Tensor, weight: float) -> Tensor:
    """Weighted pretraining objective: l_rec + weight * l_contrast."""
    if not (0.0 <= weight <= 1.0):
        raise ValueError(f"weight must be in [0, 1], got {weight}")
    return l_rec + weight * l_contrast
