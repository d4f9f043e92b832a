"""Neural layers: norms, attention, MLP, transformer block, patch embedding."""

import numpy as np
import pytest

from mcvt.tensor import Tensor
from mcvt.nn import (Module, Parameter, Linear, Conv2d3x3, BatchNorm2d,
                     LayerNorm, MultiHeadSelfAttention, Mlp, TransformerBlock,
                     PatchEmbed)


# ------------------------------------------------------------------- Module

def test_module_tracks_registration_order(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.a = Linear(2, 3, rng)
            self.b = Linear(3, 1, rng)

    names = [n for n, _ in Net().named_parameters()]
    assert names == ["a.weight", "a.bias", "b.weight", "b.bias"]


def test_module_param_count(rng):
    lin = Linear(5, 7, rng)
    assert lin.param_count() == 5 * 7 + 7


def test_module_train_eval_propagates(rng):
    class Net(Module):
        def __init__(self):
            super().__init__()
            self.bn = BatchNorm2d(2)

    net = Net().eval()
    assert not net.bn.training
    net.train()
    assert net.bn.training


def test_module_astype(rng):
    lin = Linear(2, 2, rng).astype(np.float64)
    assert lin.weight.dtype == np.float64


# ------------------------------------------------------------------- Linear

def test_linear_matches_affine_map(rng):
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4)).astype(np.float32)
    np.testing.assert_allclose(lin(Tensor(x)).data,
                               x @ lin.weight.data + lin.bias.data, rtol=1e-6)


def test_linear_flattens_leading_dims(rng):
    lin = Linear(4, 3, rng)
    x = rng.normal(size=(2, 5, 4)).astype(np.float32)
    out = lin(Tensor(x))
    assert out.shape == (2, 5, 3)
    np.testing.assert_allclose(out.data[1], lin(Tensor(x[1])).data, rtol=1e-6)


# --------------------------------------------------------------------- Conv

def test_conv_module_bias_modes(rng):
    with_bias = Conv2d3x3(2, 3, rng)
    without = Conv2d3x3(2, 3, rng, bias=False)
    assert with_bias.param_count() == 2 * 3 * 9 + 3
    assert without.param_count() == 2 * 3 * 9
    x = Tensor(rng.normal(size=(1, 2, 4, 4)).astype(np.float32))
    assert without(x).shape == (1, 3, 4, 4)


# --------------------------------------------------------------- batch norm

def test_batch_norm_constant_channel_outputs_shift(rng):
    bn = BatchNorm2d(2)
    bn.bias.data = np.array([0.7, -1.2], dtype=np.float32)
    x = Tensor(np.full((2, 2, 3, 3), 5.0, dtype=np.float32))
    out = bn(x).data
    np.testing.assert_allclose(out[:, 0], 0.7, atol=1e-5)
    np.testing.assert_allclose(out[:, 1], -1.2, atol=1e-5)


def test_batch_norm_eval_is_per_channel_affine(rng):
    bn = BatchNorm2d(3)
    bn(Tensor(rng.normal(size=(4, 3, 5, 5)).astype(np.float32)))  # set stats
    bn.eval()
    a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    b = a.copy()
    b[0, :, 0, 0] += 1.0  # perturb one sample
    out_a = bn(Tensor(a)).data
    out_b = bn(Tensor(b)).data
    # all untouched positions agree: no batch coupling in eval mode
    mask = a == b
    np.testing.assert_array_equal(out_a[mask], out_b[mask])


def test_batch_norm_updates_running_statistics(rng):
    bn = BatchNorm2d(1, momentum=0.1)
    x = rng.normal(size=(4, 1, 3, 3))
    n = x.size
    bn(Tensor(x.astype(np.float32)))
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(), atol=1e-6)
    expected_var = 1.0 * 0.9 + 0.1 * x.var() * n / (n - 1)
    np.testing.assert_allclose(bn.running_var, expected_var, rtol=1e-5)


def test_batch_norm_single_element_channel_rejected():
    with pytest.raises(ValueError):
        BatchNorm2d(2)(Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32)))


def test_batch_norm_shape_validation():
    with pytest.raises(ValueError):
        BatchNorm2d(2)(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)))


# --------------------------------------------------------------- layer norm

def test_layer_norm_zero_mean_unit_variance(rng):
    ln = LayerNorm(16)
    x = Tensor(rng.normal(size=(5, 16)) * 3 + 2)
    out = ln(x).data  # weight 1, bias 0 at init
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


# ---------------------------------------------------------------- attention

def test_attention_rows_sum_to_one(rng):
    msa = MultiHeadSelfAttention(12, 3, rng)
    x = Tensor(rng.normal(size=(2, 9, 12)).astype(np.float32))
    attn = msa.attention_weights(x).data
    assert attn.shape == (2, 3, 9, 9)
    np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_single_token_is_output_projection_of_value(rng):
    # with a 1-token sequence the attention matrix is [[1]], so the output
    # is out_proj(v_proj(x)); make v_proj the identity to see out_proj(x)
    msa = MultiHeadSelfAttention(6, 2, rng)
    msa.v_proj.weight.data = np.eye(6, dtype=np.float32)
    msa.v_proj.bias.data[...] = 0.0
    x = rng.normal(size=(1, 1, 6)).astype(np.float32)
    out = msa(Tensor(x)).data
    expected = msa.out_proj(Tensor(x)).data
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_attention_preserves_shape(rng):
    msa = MultiHeadSelfAttention(12, 3, rng)
    x = Tensor(rng.normal(size=(2, 7, 12)).astype(np.float32))
    assert msa(x).shape == (2, 7, 12)


def test_attention_dim_not_divisible_by_heads():
    with pytest.raises(ValueError, match="divisible"):
        MultiHeadSelfAttention(10, 3, np.random.default_rng(0))


def test_attention_permutation_equivariance(rng):
    msa = MultiHeadSelfAttention(8, 2, rng)
    x = rng.normal(size=(1, 6, 8)).astype(np.float32)
    perm = rng.permutation(6)
    out = msa(Tensor(x)).data
    out_perm = msa(Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


# -------------------------------------------------------- transformer block

def test_block_identity_when_projections_zeroed(rng):
    block = TransformerBlock(12, 3, rng, mlp_ratio=2)
    block.msa.out_proj.weight.data[...] = 0.0
    block.msa.out_proj.bias.data[...] = 0.0
    block.mlp.fc2.weight.data[...] = 0.0
    block.mlp.fc2.bias.data[...] = 0.0
    x = rng.normal(size=(2, 5, 12)).astype(np.float32)
    np.testing.assert_array_equal(block(Tensor(x)).data, x)


def test_block_shape_65x192(rng):
    block = TransformerBlock(192, 3, rng)
    x = Tensor(rng.normal(size=(1, 65, 192)).astype(np.float32))
    assert block(x).shape == (1, 65, 192)


def test_mlp_hidden_width_and_shape(rng):
    mlp = Mlp(8, rng, ratio=4)
    assert mlp.fc1.weight.shape == (8, 32)
    assert mlp(Tensor(np.zeros((3, 8), dtype=np.float32))).shape == (3, 8)


# -------------------------------------------------------------- patch embed

def test_patch_embed_32x32_gives_65_tokens(rng):
    pe = PatchEmbed(4, 4, 32, 24, rng)
    x = Tensor(rng.normal(size=(2, 4, 32, 32)).astype(np.float32))
    assert pe(x).shape == (2, 65, 24)


def test_patch_embed_degenerate_single_patch(rng):
    pe = PatchEmbed(3, 8, 8, 10, rng)
    x = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
    assert pe(x).shape == (1, 2, 10)


def test_patch_embed_deterministic(rng):
    pe = PatchEmbed(2, 4, 8, 6, rng)
    x = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(pe(Tensor(x)).data, pe(Tensor(x.copy())).data)


def test_patch_embed_indivisible_extent_rejected(rng):
    with pytest.raises(ValueError, match="divisible"):
        PatchEmbed(3, 5, 32, 16, rng)


def test_patch_embed_patchify_is_row_major(rng):
    # patch (row 0, col 1) of the grid must land in token row 2 (after cls)
    pe = PatchEmbed(1, 2, 4, 4, rng)
    x = np.zeros((1, 1, 4, 4), dtype=np.float32)
    x[0, 0, 0, 2] = 1.0  # inside grid patch (0, 1)
    patches = pe.patchify(Tensor(x)).data
    assert patches.shape == (1, 4, 4)
    nonzero_rows = np.nonzero(np.abs(patches[0]).sum(axis=1))[0]
    np.testing.assert_array_equal(nonzero_rows, [1])
