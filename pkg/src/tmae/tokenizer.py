"""Patch extraction and token embedding for short video clips.

A clip of T frames at HxW is cut into non-overlapping p x p patches,
N = (H/p)*(W/p) per frame, and flattened frame-major into a (T*N) x D
token sequence: all patches of frame 0 first, then frame 1, and so on.
Flat token index k maps to (frame, patch) = (k // N, k % N); patch index
i walks the patch grid row-major.

All operations are pure tensor functions, differentiable, and accept
leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import Tensor

from .errors import IndivisibleDimensions, ShapeMismatch


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int
    H: int
    W: int
    T: int
    D: int

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.H % p or self.W % p:
            raise IndivisibleDimensions(
                f"patch size {p} must divide H={self.H} and W={self.W}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.patch_size, self.W // self.patch_size

    @property
    def N(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def tokens_per_clip(self) -> int:
        return self.T * self.N


@dataclass
class TokenSequence:
    """Frame-major token sequence, optionally with a CLS vector alongside."""

    tokens: Tensor  # (..., T*N, D)
    cls: Optional[Tensor] = None  # (..., D)


@dataclass
class PositionalTables:
    """Learned positional content: spatial rows by patch index, temporal by frame."""

    spatial: Tensor  # (N, D)
    temporal: Tensor  # (T, D)
    cls: Optional[Tensor] = None  # (D,)


def flat_index(t: int, i: int, N: int) -> int:
    return t * N + i


def unflat_index(k: int, N: int) -> tuple[int, int]:
    return k // N, k % N


def patchify(frames: Tensor, cfg: PatchConfig) -> Tensor:
    """(..., T, H, W) -> (..., T, N, p*p), each patch flattened row-major."""
    p = cfg.patch_size
    if frames.shape[-3:] != (cfg.T, cfg.H, cfg.W):
        raise ShapeMismatch(
            f"expected frames (..., {cfg.T}, {cfg.H}, {cfg.W}), got {tuple(frames.shape)}"
        )
    gh, gw = cfg.grid
    lead = frames.shape[:-3]
    x = frames.reshape(*lead, cfg.T, gh, p, gw, p)
    x = x.permute(*range(len(lead)), -5, -4, -2, -3, -1)  # (..., T, gh, gw, p, p)
    return x.reshape(*lead, cfg.T, cfg.N, p * p)


def unpatchify(patches: Tensor, cfg: PatchConfig) -> Tensor:
    """Exact inverse of patchify: (..., T, N, p*p) -> (..., T, H, W)."""
    p = cfg.patch_size
    if patches.shape[-3:] != (cfg.T, cfg.N, p * p):
        raise ShapeMismatch(
            f"expected patches (..., {cfg.T}, {cfg.N}, {p * p}), got {tuple(patches.shape)}"
        )
    gh, gw = cfg.grid
    lead = patches.shape[:-3]
    x = patches.reshape(*lead, cfg.T, gh, gw, p, p)
    x = x.permute(*range(len(lead)), -5, -4, -2, -3, -1)  # (..., T, gh, p, gw, p)
    return x.reshape(*lead, cfg.T, cfg.H, cfg.W)


def embed(patches: Tensor, W_embed: Tensor, b_embed: Tensor) -> TokenSequence:
    """Linear projection of flattened patches into the latent space.

    patches (..., T, N, p*p) x W_embed (p*p, D) + b_embed (D) ->
    tokens (..., T*N, D), frame-major order preserved.
    """
    if patches.shape[-1] != W_embed.shape[0]:
        raise ShapeMismatch(
            f"patch dim {patches.shape[-1]} != W_embed rows {W_embed.shape[0]}"
        )
    if W_embed.shape[1] != b_embed.shape[0]:
        raise ShapeMismatch("W_embed columns and b_embed length differ")
    lead = patches.shape[:-3]
    flat = patches.reshape(*lead, patches.shape[-3] * patches.shape[-2], patches.shape[-1])
    return TokenSequence(tokens=flat @ W_embed + b_embed)


def positional_content(tables: PositionalTables) -> Tensor:
    """(T*N, D) additive positional term: spatial by patch slot, temporal by frame.

    T and N are the row counts of the temporal and spatial tables.
    """
    if tables.spatial.shape[1] != tables.temporal.shape[1]:
        raise ShapeMismatch("spatial and temporal tables have different widths")
    T = tables.temporal.shape[0]
    N = tables.spatial.shape[0]
    spatial = tables.spatial.repeat(T, 1)  # index k -> row k % N
    temporal = tables.temporal.repeat_interleave(N, dim=0)  # index k -> row k // N
    return spatial + temporal


def add_positional(seq: TokenSequence, tables: PositionalTables) -> TokenSequence:
    """Add positional content to every token (and CLS when both sides carry one)."""
    T = tables.temporal.shape[0]
    N = tables.spatial.shape[0]
    if seq.tokens.shape[-2] != T * N:
        raise ShapeMismatch(
            f"sequence has {seq.tokens.shape[-2]} tokens, expected T*N = {T * N}"
        )
    tokens = seq.tokens + positional_content(tables)
    cls = seq.cls
    if cls is not None and tables.cls is not None:
        cls = cls + tables.cls
    return TokenSequence(tokens=tokens, cls=cls)
