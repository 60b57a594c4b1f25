"""Transformer encoder/decoder with CLS token and the downstream classifier.

The encoder sees only visible patch tokens (plus CLS); the decoder sees the
full restored sequence with a shared learned mask token in the masked slots
and its own positional tables, and predicts raw pixels per patch. Every
learnable tensor is reachable under a stable dotted name via
``named_parameters()``, which the checkpoint format relies on.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import NonFiniteActivation, ShapeMismatch
from .losses import frame_features
from .masking import MaskPlan
from .tokenizer import (
    PatchConfig,
    PositionalTables,
    embed,
    patchify,
    positional_content,
)

ENCODER_PRESETS = {
    # name: (width, depth, heads)
    "micro": (8, 1, 2),  # test-only, small enough for finite differences
    "tiny": (192, 12, 3),
    "base": (768, 12, 12),
}


@dataclass(frozen=True)
class EncoderConfig:
    D: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0
    variant: str = "custom"

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"width {self.D} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @classmethod
    def from_variant(cls, name: str, mlp_ratio: float = 4.0) -> "EncoderConfig":
        if name not in ENCODER_PRESETS:
            raise ValueError(f"unknown variant {name!r}, expected {list(ENCODER_PRESETS)}")
        D, depth, heads = ENCODER_PRESETS[name]
        return cls(D=D, depth=depth, heads=heads, mlp_ratio=mlp_ratio, variant=name)


@dataclass(frozen=True)
class DecoderConfig:
    D: int = 128
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"width {self.D} not divisible by {self.heads} heads")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ClassifierHead(nn.Module):
    """Three-layer head: D -> hidden[0] -> hidden[1] -> 1 logit."""

    def __init__(
        self,
        dim: int,
        hidden: tuple[int, int] = (256, 128),
        activation: Callable[[Tensor], Tensor] = F.gelu,
    ):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], 1)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        x = self.activation(self.fc1(x))
        x = self.activation(self.fc2(x))
        return self.fc3(x)


@dataclass
class PretrainOutputs:
    pred: Tensor  # (B, T, N, p*p) reconstructed patches
    frame_feats: Tensor  # (B, T, D or D_dec) pooled per-frame features
    cls: Tensor  # (B, D) encoded CLS token


class TemporalMAE(nn.Module):
    """Masked autoencoder over frame-major video tokens.

    frame_feature_mode selects what the contrastive loss pools: "visible"
    averages each frame's encoded visible tokens; "restored" averages the
    full restored decoder-input sequence per frame.
    """

    def __init__(
        self,
        patch_cfg: PatchConfig,
        enc_cfg: EncoderConfig,
        dec_cfg: DecoderConfig,
        head_hidden: tuple[int, int] = (256, 128),
        frame_feature_mode: str = "visible",
    ):
        super().__init__()
        if patch_cfg.D != enc_cfg.D:
            raise ValueError("patch config width must match encoder width")
        if frame_feature_mode not in ("visible", "restored"):
            raise ValueError(f"unknown frame_feature_mode {frame_feature_mode!r}")
        self.patch_cfg = patch_cfg
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.head_hidden = head_hidden
        self.frame_feature_mode = frame_feature_mode

        p2 = patch_cfg.patch_size**2
        D, Dd = enc_cfg.D, dec_cfg.D
        N, T = patch_cfg.N, patch_cfg.T

        self.patch_weight = nn.Parameter(torch.empty(p2, D))
        self.patch_bias = nn.Parameter(torch.zeros(D))
        self.pos_spatial = nn.Parameter(torch.empty(N, D))
        self.pos_temporal = nn.Parameter(torch.empty(T, D))
        self.pos_cls = nn.Parameter(torch.empty(D))
        self.cls_token = nn.Parameter(torch.empty(D))
        self.blocks = nn.ModuleList(
            Block(D, enc_cfg.heads, enc_cfg.mlp_ratio) for _ in range(enc_cfg.depth)
        )
        self.enc_norm = nn.LayerNorm(D)

        self.dec_embed = nn.Linear(D, Dd)
        self.mask_token = nn.Parameter(torch.empty(Dd))
        self.dec_pos_spatial = nn.Parameter(torch.empty(N, Dd))
        self.dec_pos_temporal = nn.Parameter(torch.empty(T, Dd))
        self.dec_blocks = nn.ModuleList(
            Block(Dd, dec_cfg.heads, dec_cfg.mlp_ratio) for _ in range(dec_cfg.depth)
        )
        self.dec_norm = nn.LayerNorm(Dd)
        self.dec_head = nn.Linear(Dd, p2)

        self.head = ClassifierHead(D, head_hidden)
        self._init_weights()

    def _init_weights(self):
        for table in (
            self.patch_weight,
            self.pos_spatial,
            self.pos_temporal,
            self.pos_cls,
            self.cls_token,
            self.mask_token,
            self.dec_pos_spatial,
            self.dec_pos_temporal,
        ):
            nn.init.trunc_normal_(table, std=0.02)
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    # --- pieces -------------------------------------------------------

    def enc_tables(self) -> PositionalTables:
        return PositionalTables(
            spatial=self.pos_spatial, temporal=self.pos_temporal, cls=self.pos_cls
        )

    def dec_tables(self) -> PositionalTables:
        return PositionalTables(
            spatial=self.dec_pos_spatial, temporal=self.dec_pos_temporal
        )

    def tokenize(self, frames: Tensor) -> Tensor:
        """(B, T, H, W) -> position-embedded tokens (B, T*N, D), no CLS."""
        patches = patchify(frames, self.patch_cfg)
        seq = embed(patches, self.patch_weight, self.patch_bias)
        return seq.tokens + positional_content(self.enc_tables())

    def encode(self, x: Tensor) -> Tensor:
        """Raw pre-norm block stack; length-preserving (identity at depth 0)."""
        for block in self.blocks:
            x = block(x)
        if not torch.isfinite(x).all():
            raise NonFiniteActivation("encoder produced non-finite activations")
        return x

    def decode(self, restored: Tensor) -> Tensor:
        """Restored (B, T*N, D_dec) -> reconstructed patches (B, T, N, p*p)."""
        if restored.shape[-2] != self.patch_cfg.tokens_per_clip:
            raise ShapeMismatch(
                f"decoder expects {self.patch_cfg.tokens_per_clip} tokens, "
                f"got {restored.shape[-2]}"
            )
        x = restored
        for block in self.dec_blocks:
            x = block(x)
        x = self.dec_head(self.dec_norm(x))
        if not torch.isfinite(x).all():
            raise NonFiniteActivation("decoder produced non-finite activations")
        B = x.shape[0]
        return x.reshape(B, self.patch_cfg.T, self.patch_cfg.N, -1)

    def classify(self, cls_vector: Tensor) -> Tensor:
        """Encoded CLS vector(s) -> raw logit(s); sigmoid is the caller's."""
        if not torch.isfinite(cls_vector).all():
            raise NonFiniteActivation("classifier input is non-finite")
        return self.head(cls_vector).squeeze(-1)

    # --- full passes ------------------------------------------------------

    def forward_pretrain(
        self, frames: Tensor, plans: Sequence[MaskPlan]
    ) -> PretrainOutputs:
        """Masked forward pass of a batch of clips, one MaskPlan each."""
        if frames.ndim == 3:
            frames = frames.unsqueeze(0)
        B = frames.shape[0]
        if len(plans) != B:
            raise ShapeMismatch(f"{B} clips but {len(plans)} mask plans")
        tokens = self.tokenize(frames)
        keep = torch.from_numpy(
            np.stack([plan.flat_keep_indices() for plan in plans])
        ).to(frames.device)
        D = tokens.shape[-1]
        visible = tokens.gather(1, keep.unsqueeze(-1).expand(-1, -1, D))

        cls_in = (self.cls_token + self.pos_cls).expand(B, 1, D)
        encoded = self.enc_norm(self.encode(torch.cat([cls_in, visible], dim=1)))
        cls_out = encoded[:, 0]
        enc_visible = encoded[:, 1:]

        proj = self.dec_embed(enc_visible)
        restored = self._restore_batch(proj, keep)
        pred = self.decode(restored)

        if self.frame_feature_mode == "visible":
            feats = frame_features(enc_visible, plans)
        else:
            T, N = self.patch_cfg.T, self.patch_cfg.N
            feats = restored.reshape(B, T, N, -1).mean(dim=2)
        return PretrainOutputs(pred=pred, frame_feats=feats, cls=cls_out)

    def _restore_batch(self, visible: Tensor, keep: Tensor) -> Tensor:
        """Scatter per-clip visible tokens into full sequences + positions."""
        B, V, Dd = visible.shape
        L = self.patch_cfg.tokens_per_clip
        full = self.mask_token.expand(B, L, Dd).clone()
        full = full.scatter(1, keep.unsqueeze(-1).expand(-1, -1, Dd), visible)
        return full + positional_content(self.dec_tables())

    def encode_clips(self, frames: Tensor) -> tuple[Tensor, Tensor]:
        """Unmasked pass for fine-tuning/inference: returns (cls, tokens)."""
        if frames.ndim == 3:
            frames = frames.unsqueeze(0)
        B = frames.shape[0]
        tokens = self.tokenize(frames)
        cls_in = (self.cls_token + self.pos_cls).expand(B, 1, tokens.shape[-1])
        encoded = self.enc_norm(self.encode(torch.cat([cls_in, tokens], dim=1)))
        return encoded[:, 0], encoded[:, 1:]

    def score_clips(self, frames: Tensor) -> Tensor:
        """Unmasked pass to classification logits, one per clip."""
        cls_out, _ = self.encode_clips(frames)
        return self.classify(cls_out)

    # --- bookkeeping -----------------------------------------------------

    def count_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encoder_param_names(self) -> list[str]:
        """Everything that is frozen in base-mode fine-tuning (non-head params)."""
        return [name for name, _ in self.named_parameters() if not name.startswith("head.")]


def build_model(
    patch_cfg: PatchConfig,
    enc_cfg: EncoderConfig,
    dec_cfg: DecoderConfig,
    head_hidden: tuple[int, int] = (256, 128),
    frame_feature_mode: str = "visible",
    init_seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> TemporalMAE:
    """Construct and deterministically initialize a model from configs."""
    torch.manual_seed(init_seed & (2**63 - 1))
    model = TemporalMAE(patch_cfg, enc_cfg, dec_cfg, head_hidden, frame_feature_mode)
    return model.to(dtype)


def single_clip_forward(
    model: TemporalMAE, clip_frames: Tensor, plan: MaskPlan
) -> tuple[Tensor, Tensor]:
    """Spec-level convenience: one clip in, (pred, frame features) out."""
    out = model.forward_pretrain(clip_frames.unsqueeze(0), [plan])
    return out.pred.squeeze(0), out.frame_feats.squeeze(0)


def build_model_from_config(
    config, init_seed: int = 0, dtype: torch.dtype = torch.float32
) -> TemporalMAE:
    """Build a model from a resolved Config (see tmae.config)."""
    m = config.values["model"]
    d = config.values["data"]
    enc_cfg = EncoderConfig.from_variant(m["variant"], mlp_ratio=m["mlp_ratio"])
    patch_cfg = PatchConfig(
        patch_size=m["patch_size"], H=d["height"], W=d["width"], T=d["frames"], D=enc_cfg.D
    )
    dec_cfg = DecoderConfig(
        D=m["dec_dim"], depth=m["dec_depth"], heads=m["dec_heads"], mlp_ratio=m["mlp_ratio"]
    )
    return build_model(
        patch_cfg,
        enc_cfg,
        dec_cfg,
        head_hidden=(m["head_hidden1"], m["head_hidden2"]),
        frame_feature_mode=m["frame_features"],
        init_seed=init_seed,
        dtype=dtype,
    )
