"""Reusable neural layers: norms, attention, MLP, patch embedding.

Layers follow the pre-norm transformer convention: each block computes
``y1 = x + MSA(LN1(x))`` and ``y = y1 + MLP(LN2(y1))``.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, concat, layer_norm, batch_norm

__all__ = [
    "Module", "ModuleList", "Parameter", "Linear", "Conv2d3x3", "BatchNorm2d",
    "LayerNorm", "MultiHeadSelfAttention", "Mlp", "TransformerBlock",
    "PatchEmbed",
]


class Parameter(Tensor):
    """A learned tensor; always participates in the tape."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal container tracking parameters, buffers and submodules.

    Registration order is attribute-assignment order, which fixes the
    checkpoint serialization order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value):
        self._buffers[name] = np.asarray(value)
        object.__setattr__(self, name, self._buffers[name])

    def _set_buffer(self, name, value):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    # -------------------------------------------------------------- traversal
    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self):
        for m in self.modules():
            object.__setattr__(m, "training", True)
        return self

    def eval(self):
        for m in self.modules():
            object.__setattr__(m, "training", False)
        return self

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        """Cast all parameters and float buffers in place."""
        for m in self.modules():
            for name, p in list(m._params.items()):
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                if np.issubdtype(b.dtype, np.floating):
                    m._set_buffer(name, b.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, blocks=()):
        super().__init__()
        self._list = []
        for block in blocks:
            self.append(block)

    def append(self, block):
        setattr(self, str(len(self._list)), block)
        self._list.append(block)

    def __iter__(self):
        return iter(self._list)

    def __len__(self):
        return len(self._list)

    def __getitem__(self, i):
        return self._list[i]


# --------------------------------------------------------------------- layers

class Linear(Module):
    """y = x @ W + b with W of shape (in, out)."""

    def __init__(self, in_features, out_features, rng, init_std=0.02, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            rng.normal(0.0, init_std, size=(in_features, out_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        if x.ndim > 2:
            # one large GEMM instead of a batched loop of small ones
            lead = x.shape[:-1]
            flat = x.reshape(-1, self.in_features)
            return (flat @ self.weight + self.bias).reshape(*lead, self.out_features)
        return x @ self.weight + self.bias


class Conv2d3x3(Module):
    """3x3 / stride 1 / padding 1 convolution, He-normal init.

    ``bias=False`` drops the bias parameter; used whenever the conv feeds a
    batch norm, where a bias would be redundant (its gradient is identically
    zero through the batch mean).
    """

    def __init__(self, in_channels, out_channels, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        std = np.sqrt(2.0 / (in_channels * 9))
        self.weight = Parameter(
            rng.normal(0.0, std, size=(out_channels, in_channels, 3, 3)).astype(dtype))
        if bias:
            self.bias = Parameter(np.zeros(out_channels, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x):
        from .tensor import conv2d
        bias = self.bias
        if bias is None:
            bias = Tensor(np.zeros(self.out_channels, dtype=x.dtype))
        return conv2d(x, self.weight, bias)


class BatchNorm2d(Module):
    """Batch normalization over (B, H, W) per channel.

    Train mode normalizes by batch statistics (biased variance) and updates
    running statistics with momentum; eval mode uses the running statistics.
    """

    def __init__(self, num_channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(num_channels, dtype=dtype))
        self.bias = Parameter(np.zeros(num_channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(num_channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(num_channels, dtype=dtype))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ValueError(
                f"batch_norm expects (B,{self.num_channels},H,W), got {x.shape}")
        c = self.num_channels
        if self.training:
            B, _, H, W = x.shape
            n = B * H * W
            if n <= 1:
                raise ValueError(
                    "batch_norm train mode needs more than one element per channel")
            out, batch_mean, batch_var = batch_norm(
                x, self.weight, self.bias, eps=self.eps)
            m = self.momentum
            batch_var = batch_var * (n / (n - 1))  # unbiased for running
            self._set_buffer("running_mean",
                             ((1 - m) * self.running_mean + m * batch_mean).astype(x.dtype))
            self._set_buffer("running_var",
                             ((1 - m) * self.running_var + m * batch_var).astype(x.dtype))
            return out
        mean = Tensor(self.running_mean.reshape(1, c, 1, 1))
        inv = (self.running_var + self.eps) ** -0.5
        xhat = (x - mean) * Tensor(inv.reshape(1, c, 1, 1))
        gamma = self.weight.reshape(1, c, 1, 1)
        beta = self.bias.reshape(1, c, 1, 1)
        return xhat * gamma + beta


class LayerNorm(Module):
    """Normalization over the last axis with learned scale/shift."""

    def __init__(self, dim, eps=1e-6, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, eps=self.eps)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention with h heads over width-D tokens."""

    def __init__(self, dim, heads, rng, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by head count {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = float(1.0 / np.sqrt(self.head_dim))
        self.q_proj = Linear(dim, dim, rng, dtype=dtype)
        self.k_proj = Linear(dim, dim, rng, dtype=dtype)
        self.v_proj = Linear(dim, dim, rng, dtype=dtype)
        self.out_proj = Linear(dim, dim, rng, dtype=dtype)

    def _split_heads(self, x):
        # (..., T, D) -> (..., h, T, dh)
        *lead, T, D = x.shape
        x = x.reshape(*lead, T, self.heads, self.head_dim)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes)

    def _merge_heads(self, x):
        *lead, h, T, dh = x.shape
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return x.transpose(axes).reshape(*lead, T, h * dh)

    def attention_weights(self, x):
        """Row-stochastic attention matrices, (..., h, T, T)."""
        q = self._split_heads(self.q_proj(x))
        k = self._split_heads(self.k_proj(x))
        kt = k.transpose(*range(k.ndim - 2), k.ndim - 1, k.ndim - 2)
        return ((q @ kt) * self.scale).softmax(axis=-1)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ValueError(f"attention expects width {self.dim}, got {x.shape}")
        attn = self.attention_weights(x)
        v = self._split_heads(self.v_proj(x))
        out = self._merge_heads(attn @ v)
        return self.out_proj(out)


class Mlp(Module):
    """Two-layer GELU MLP with hidden width ratio x dim."""

    def __init__(self, dim, rng, ratio=4, dtype=np.float32):
        super().__init__()
        hidden = dim * ratio
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(self.fc1(x).gelu())


class TransformerBlock(Module):
    """Pre-norm encoder block: x + MSA(LN1(x)), then + MLP(LN2(.))."""

    def __init__(self, dim, heads, rng, mlp_ratio=4, dtype=np.float32):
        super().__init__()
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.msa = MultiHeadSelfAttention(dim, heads, rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, rng, ratio=mlp_ratio, dtype=dtype)

    def forward(self, x):
        y1 = x + self.msa(self.ln1(x))
        return y1 + self.mlp(self.ln2(y1))


class PatchEmbed(Module):
    """Linear patch projection with class token and learned positions.

    Maps a (B, C, H, W) feature map to (B, p+1, D) token sequences: row 0 is
    the class token, rows 1..p the projected patches (row-major patch grid).
    """

    def __init__(self, in_channels, patch_size, image_size, dim, rng, dtype=np.float32):
        super().__init__()
        if image_size % patch_size != 0:
            raise ValueError(
                f"image size {image_size} not divisible by patch size {patch_size}")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.num_patches = self.grid * self.grid
        self.dim = dim
        self.in_channels = in_channels
        self.proj = Linear(in_channels * patch_size * patch_size, dim, rng, dtype=dtype)
        self.cls_token = Parameter(rng.normal(0.0, 0.02, size=(dim,)).astype(dtype))
        self.pos_embed = Parameter(
            rng.normal(0.0, 0.02, size=(self.num_patches + 1, dim)).astype(dtype))

    def patchify(self, x):
        # (B,C,H,W) -> (B, p, C*P*P)
        B, C, H, W = x.shape
        P, g = self.patch_size, self.grid
        x = x.reshape(B, C, g, P, g, P)
        x = x.transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(B, g * g, C * P * P)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"patch embed expects {self.in_channels} channels, got {x.shape}")
        B = x.shape[0]
        tokens = self.proj(self.patchify(x))  # (B, p, D)
        cls = self.cls_token.reshape(1, 1, self.dim) + Tensor(
            np.zeros((B, 1, self.dim), dtype=x.dtype))
        seq = concat([cls, tokens], axis=1)
        return seq + self.pos_embed
