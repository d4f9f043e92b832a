"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from mcvt.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**overrides):
    """Small configuration for fast end-to-end tests."""
    base = dict(image_size=8, patch_size=4, stem_channels=4, pre_blocks=1,
                local_blocks=1, mid_blocks=1, global_blocks=1, embed_dim=12,
                heads=3, mlp_ratio=2, num_classes=3, fusion="geef",
                modalities=("rgb", "depth"))
    base.update(overrides)
    return ModelConfig(**base)


def zero_residual_branches(model):
    """Zero every residual branch's final layer across the network.

    Pre/mid residual conv blocks: zero the second batch norm's scale and
    shift so the branch contributes nothing. Transformer blocks: zero the
    attention output projection and the MLP's second linear layer.
    """
    from mcvt.nn import TransformerBlock
    from mcvt.model import PreResidualBlock, MidResidualBlock

    for mod in model.modules():
        if isinstance(mod, (PreResidualBlock, MidResidualBlock)):
            mod.bn2.weight.data[...] = 0.0
            mod.bn2.bias.data[...] = 0.0
        elif isinstance(mod, TransformerBlock):
            mod.msa.out_proj.weight.data[...] = 0.0
            mod.msa.out_proj.bias.data[...] = 0.0
            mod.mlp.fc2.weight.data[...] = 0.0
            mod.mlp.fc2.bias.data[...] = 0.0
    return model
