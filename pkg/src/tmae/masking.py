"""Frame-wise random masking and the visible/masked index bookkeeping.

Each frame independently masks exactly floor(ratio * N) of its N patches,
drawn uniformly without replacement from a stream keyed by (seed, frame),
so a plan is reproducible from (T, N, ratio, seed) alone and identical no
matter in which order frames are generated. Masking every frame to the
same count keeps visible sequences rectangular across a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidRatio, ShapeMismatch
from .tokenizer import PositionalTables, TokenSequence, add_positional


@dataclass(frozen=True)
class MaskPlan:
    """Per-frame boolean masks (True = masked) plus sorted visible indices."""

    mask: np.ndarray  # (T, N) bool
    ratio: float
    keep_indices: np.ndarray  # (T, N - m) int64, sorted per frame
    seed: int

    @property
    def T(self) -> int:
        return self.mask.shape[0]

    @property
    def N(self) -> int:
        return self.mask.shape[1]

    @property
    def masked_per_frame(self) -> int:
        return self.N - self.keep_indices.shape[1]

    @property
    def n_visible(self) -> int:
        return self.keep_indices.size

    @property
    def n_masked(self) -> int:
        return self.T * self.masked_per_frame

    def flat_keep_indices(self) -> np.ndarray:
        """Visible flat token indices, frame-major order."""
        offsets = (np.arange(self.T, dtype=np.int64) * self.N)[:, None]
        return (self.keep_indices + offsets).reshape(-1)

    def flat_masked_indices(self) -> np.ndarray:
        flat_mask = self.mask.reshape(-1)
        return np.nonzero(flat_mask)[0].astype(np.int64)


def make_mask_plan(T: int, N: int, ratio: float, seed: int) -> MaskPlan:
    """Draw an independent uniform mask of floor(ratio * N) patches per frame."""
    if not (0.0 <= ratio < 1.0):
        raise InvalidRatio(f"mask ratio must be in [0, 1), got {ratio}")
    if N < 1 or T < 1:
        raise InvalidRatio(f"need T >= 1 and N >= 1, got T={T}, N={N}")
    m = math.floor(ratio * N)
    mask = np.zeros((T, N), dtype=bool)
    keep = np.empty((T, N - m), dtype=np.int64)
    for t in range(T):
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((seed & (2**64 - 1), t)))
        )
        masked = rng.permutation(N)[:m]
        mask[t, masked] = True
        keep[t] = np.sort(np.nonzero(~mask[t])[0])
    return MaskPlan(mask=mask, ratio=ratio, keep_indices=keep, seed=seed)


def apply_mask(seq: TokenSequence, plan: MaskPlan) -> tuple[TokenSequence, np.ndarray]:
    """Drop masked tokens; returns the visible sequence and its gather map.

    The gather map lists each surviving token's original flat index, in the
    (unchanged) frame-major order.
    """
    L = plan.T * plan.N
    if seq.tokens.shape[-2] != L:
        raise ShapeMismatch(
            f"sequence has {seq.tokens.shape[-2]} tokens but plan covers {L}"
        )
    gather = plan.flat_keep_indices()
    idx = torch.from_numpy(gather).to(seq.tokens.device)
    visible = seq.tokens.index_select(-2, idx)
    return TokenSequence(tokens=visible, cls=seq.cls), gather


def restore_sequence(
    encoded_visible: Tensor,
    mask_token: Tensor,
    plan: MaskPlan,
    tables: PositionalTables,
) -> Tensor:
    """Scatter visible tokens back, fill masked slots with the shared mask
    token, then add positional content to every slot.

    encoded_visible: (..., V, D) with V = plan.n_visible; returns (..., T*N, D).
    """
    if encoded_visible.shape[-2] != plan.n_visible:
        raise ShapeMismatch(
            f"got {encoded_visible.shape[-2]} visible tokens, plan has {plan.n_visible}"
        )
    if mask_token.shape[-1] != encoded_visible.shape[-1]:
        raise ShapeMismatch("mask_token width differs from encoded tokens")
    L = plan.T * plan.N
    lead = encoded_visible.shape[:-2]
    D = encoded_visible.shape[-1]
    full = mask_token.expand(*lead, L, D).clone()
    idx = torch.from_numpy(plan.flat_keep_indices()).to(encoded_visible.device)
    full.index_copy_(-2, idx, encoded_visible)
    return add_positional(TokenSequence(tokens=full), tables).tokens
