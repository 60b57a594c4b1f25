import numpy as np
import pytest
import torch

from tmae.config import load_config
from tmae.model import DecoderConfig, EncoderConfig, build_model
from tmae.tokenizer import PatchConfig

# micro geometry used throughout: T=2 frames of 4x4 pixels, 2x2 patches -> N=4
MICRO_T, MICRO_H, MICRO_W, MICRO_P = 2, 4, 4, 2


@pytest.fixture
def micro_patch_cfg():
    return PatchConfig(patch_size=MICRO_P, H=MICRO_H, W=MICRO_W, T=MICRO_T, D=8)


@pytest.fixture
def micro_model(micro_patch_cfg):
    return build_model(
        micro_patch_cfg,
        EncoderConfig.from_variant("micro"),
        DecoderConfig(D=8, depth=1, heads=2),
        head_hidden=(8, 4),
        init_seed=7,
    )


def micro_config(**extra):
    """Resolved Config for micro-scale training runs; extra sets overrides."""
    overrides = [
        "model.variant=micro",
        "model.patch_size=2",
        "data.height=4",
        "data.width=4",
        "data.frames=2",
        "model.dec_dim=8",
        "model.dec_depth=1",
        "model.dec_heads=2",
        "model.head_hidden1=8",
        "model.head_hidden2=4",
        "loss.lambda=0.1",
        "loss.tau_p=1",
        "loss.tau_m=0.5",
    ]
    overrides += [f"{k}={v}" for k, v in extra.items()]
    return load_config(None, overrides)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
