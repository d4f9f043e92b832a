"""Multi-view convolutional-transformer backbone.

Per view and per modality the pipeline is: stem -> M pre-residual conv
blocks -> patch embedding (cls token + positions) -> K local transformer
blocks -> S mid-residual conv blocks on the reshaped patch tokens (cls
bypasses) -> N global transformer blocks -> per-view features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .tensor import Tensor, concat
from .nn import (Module, ModuleList, Conv2d3x3, BatchNorm2d,
                 TransformerBlock, PatchEmbed)
from . import fusion as fusion_mod

__all__ = [
    "ModelConfig", "ViewFeatures", "Stem", "PreResidualBlock",
    "MidResidualBlock", "Backbone", "MultiViewNet", "param_count",
    "save_checkpoint", "load_checkpoint", "layer_summary",
]

MODALITY_CHANNELS = {"rgb": 3, "depth": 1}

_CKPT_MAGIC = b"MCVT"
_CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """All architecture hyperparameters.

    ``pre_blocks``/``local_blocks``/``mid_blocks``/``global_blocks`` are the
    M/K/S/N stage depths; defaults give the full-size network
    (2, 8, 7, 4).
    """

    image_size: int = 32
    patch_size: int = 4
    stem_channels: int = 32
    pre_blocks: int = 2       # M
    local_blocks: int = 8     # K
    mid_blocks: int = 7       # S
    global_blocks: int = 4    # N
    embed_dim: int = 192
    heads: int = 3
    mlp_ratio: int = 4
    num_classes: int = 4
    fusion: str = "geef"
    modalities: tuple = ("rgb", "depth")
    cross_view_global: bool = False
    separate_backbones: bool = False

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        self.fusion = self.fusion.lower()
        if self.fusion not in fusion_mod.STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.fusion!r}")
        unknown = set(self.modalities) - set(MODALITY_CHANNELS)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if not self.modalities:
            raise ValueError("at least one modality is required")
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size "
                f"{self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ValueError(
                f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def patch_grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.patch_grid * self.patch_grid

    @property
    def fusion_dim(self):
        parts = fusion_mod.STRATEGY_PARTS[self.fusion]
        return parts * self.embed_dim * len(self.modalities)

    def to_dict(self):
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d):
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ViewFeatures:
    """Per-view output of the backbone: patch tokens and the class token."""

    patch_tokens: object  # Tensor (p, D)
    cls_token: object     # Tensor (D,)


class Stem(Module):
    """Modality entry: 3x3 conv + batch norm + ReLU to stem width."""

    def __init__(self, in_channels, out_channels, rng, dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.conv = Conv2d3x3(in_channels, out_channels, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"stem expects {self.in_channels} input channels, got {x.shape}")
        return self.bn(self.conv(x)).relu()


class PreResidualBlock(Module):
    """y = ReLU(BN2(Conv2(ReLU(BN1(Conv1(x))))) + x), channel-preserving."""

    def __init__(self, channels, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d3x3(channels, channels, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype=dtype)
        self.conv2 = Conv2d3x3(channels, channels, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype=dtype)

    def forward(self, x):
        y = self.bn1(self.conv1(x)).relu()
        y = self.bn2(self.conv2(y))
        return (y + x).relu()


class MidResidualBlock(Module):
    """Residual conv block on patch tokens reshaped to a square feature map.

    Tokens (B, p, D) with p = g*g are viewed as a (D, g, g) map, passed
    through Conv-BN-ReLU-Conv-BN, residually added and re-activated, then
    reshaped back. The class token is handled outside this block.
    """

    def __init__(self, dim, grid, rng, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.grid = grid
        self.conv1 = Conv2d3x3(dim, dim, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(dim, dtype=dtype)
        self.conv2 = Conv2d3x3(dim, dim, rng, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(dim, dtype=dtype)

    def forward(self, tokens):
        B, p, D = tokens.shape
        g = self.grid
        if p != g * g:
            raise ValueError(f"token count {p} is not the square grid {g}x{g}")
        x = tokens.transpose(0, 2, 1).reshape(B, D, g, g)
        y = self.bn1(self.conv1(x)).relu()
        y = self.bn2(self.conv2(y))
        y = (y + x).relu()
        return y.reshape(B, D, p).transpose(0, 2, 1)


class Backbone(Module):
    """Shared trunk from stem output to per-view token sequences."""

    def __init__(self, config, rng, dtype=np.float32):
        super().__init__()
        c = config
        self.config = c
        self.pre = ModuleList(
            PreResidualBlock(c.stem_channels, rng, dtype=dtype)
            for _ in range(c.pre_blocks))
        self.patch_embed = PatchEmbed(c.stem_channels, c.patch_size,
                                      c.image_size, c.embed_dim, rng, dtype=dtype)
        self.local = ModuleList(
            TransformerBlock(c.embed_dim, c.heads, rng, c.mlp_ratio, dtype=dtype)
            for _ in range(c.local_blocks))
        self.mid = ModuleList(
            MidResidualBlock(c.embed_dim, c.patch_grid, rng, dtype=dtype)
            for _ in range(c.mid_blocks))
        self.global_ = ModuleList(
            TransformerBlock(c.embed_dim, c.heads, rng, c.mlp_ratio, dtype=dtype)
            for _ in range(c.global_blocks))

    def tokens_before_global(self, x):
        """(B, stem_channels, H, W) -> (B, p+1, D) after the mid stage."""
        for block in self.pre:
            x = block(x)
        tokens = self.patch_embed(x)
        for block in self.local:
            tokens = block(tokens)
        cls = tokens[:, 0:1, :]
        patches = tokens[:, 1:, :]
        for block in self.mid:
            patches = block(patches)
        return concat([cls, patches], axis=1)

    def run_global(self, tokens):
        for block in self.global_:
            tokens = block(tokens)
        return tokens

    def forward(self, x):
        return self.run_global(self.tokens_before_global(x))


class MultiViewNet(Module):
    """Full network: per-modality stems, backbone(s), fusion, classifier."""

    def __init__(self, config, rng=None, dtype=np.float32):
        super().__init__()
        if rng is None:
            rng = np.random.default_rng(0)
        self.config = config
        self.stems = _ModuleDict(
            (m, Stem(MODALITY_CHANNELS[m], config.stem_channels, rng, dtype=dtype))
            for m in config.modalities)
        if config.separate_backbones:
            self.backbones = _ModuleDict(
                (m, Backbone(config, rng, dtype=dtype)) for m in config.modalities)
        else:
            self.backbone = Backbone(config, rng, dtype=dtype)
        self.head = fusion_mod.ClassifierHead(config.fusion_dim,
                                              config.num_classes, rng, dtype=dtype)

    def _backbone_for(self, modality):
        if self.config.separate_backbones:
            return self.backbones[modality]
        return self.backbone

    def view_tokens(self, views, modality):
        """(B, l, C, H, W) -> patch tokens (B, l, p, D) and cls (B, l, D)."""
        c = self.config
        B, l = views.shape[0], views.shape[1]
        flat = views.reshape(B * l, *views.shape[2:])
        x = self.stems[modality](flat)
        bb = self._backbone_for(modality)
        tokens = bb.tokens_before_global(x)  # (B*l, p+1, D)
        T = tokens.shape[1]
        if c.cross_view_global:
            tokens = tokens.reshape(B, l * T, c.embed_dim)
            tokens = bb.run_global(tokens)
            tokens = tokens.reshape(B, l, T, c.embed_dim)
        else:
            tokens = bb.run_global(tokens)
            tokens = tokens.reshape(B, l, T, c.embed_dim)
        cls = tokens[:, :, 0, :]
        patches = tokens[:, :, 1:, :]
        return patches, cls

    def forward_view(self, image, modality="rgb"):
        """Single view (C, H, W) -> ViewFeatures (eval-style single pass)."""
        image = image if isinstance(image, Tensor) else Tensor(image)
        patches, cls = self.view_tokens(image.reshape(1, 1, *image.shape), modality)
        p = self.config.num_patches
        d = self.config.embed_dim
        return ViewFeatures(patch_tokens=patches.reshape(p, d),
                            cls_token=cls.reshape(d))

    def forward(self, views_by_modality):
        """dict modality -> (B, l, C, H, W) Tensor; returns logits (B, classes)."""
        patch_tokens = {}
        cls_tokens = {}
        for m in self.config.modalities:
            patches, cls = self.view_tokens(views_by_modality[m], m)
            patch_tokens[m] = patches
            cls_tokens[m] = cls
        feature = fusion_mod.fuse_batched(patch_tokens, cls_tokens,
                                          self.config.fusion,
                                          self.config.modalities)
        return self.head(feature)


class _ModuleDict(Module):
    def __init__(self, items):
        super().__init__()
        self._keys = []
        for key, mod in items:
            setattr(self, key, mod)
            self._keys.append(key)

    def __getitem__(self, key):
        return getattr(self, key)

    def keys(self):
        return list(self._keys)


def param_count(config):
    """Exact learned-parameter count of the configured network."""
    return MultiViewNet(config, np.random.default_rng(0)).param_count()


def layer_summary(config):
    """List of (parameter name, shape, size) in registration order."""
    model = MultiViewNet(config, np.random.default_rng(0))
    return [(name, tuple(p.shape), p.size) for name, p in model.named_parameters()]


# ----------------------------------------------------------------- checkpoint

def save_checkpoint(model, path):
    """Single binary file: magic, version, JSON index, little-endian f32 data.

    Parameters first, then float buffers (batch-norm running statistics),
    both in deterministic registration order.
    """
    entries = []
    blobs = []
    for name, p in model.named_parameters():
        entries.append({"name": name, "shape": list(p.shape), "kind": "param"})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f4"))
    for name, b in model.named_buffers():
        entries.append({"name": name, "shape": list(b.shape), "kind": "buffer"})
        blobs.append(np.ascontiguousarray(b, dtype="<f4"))
    header = json.dumps({"version": _CKPT_VERSION, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob.tobytes())


def load_checkpoint(path, model):
    """Load parameters and buffers saved by save_checkpoint into model."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len))
        params = dict(model.named_parameters())
        expected = [{"name": n, "shape": list(p.shape), "kind": "param"}
                    for n, p in params.items()]
        expected += [{"name": n, "shape": list(b.shape), "kind": "buffer"}
                     for n, b in model.named_buffers()]
        if header["tensors"] != expected:
            raise ValueError(f"{path}: checkpoint does not match model structure")
        for entry in header["tensors"]:
            n = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated checkpoint")
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            if entry["kind"] == "param":
                p = params[entry["name"]]
                p.data = arr.astype(p.dtype)
                p.grad = None
            else:
                _assign_buffer(model, entry["name"], arr)
    return model


def _assign_buffer(model, dotted_name, value):
    parts = dotted_name.split(".")
    mod = model
    for part in parts[:-1]:
        mod = mod._modules[part]
    leaf = parts[-1]
    mod._set_buffer(leaf, value.astype(mod._buffers[leaf].dtype))
