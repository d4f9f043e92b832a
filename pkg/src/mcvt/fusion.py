"""Multi-view embedding fusion strategies and the classifier head.

Strategies:
  acf  - average of per-view class tokens (per modality)
  ecf  - entropy-weighted sum of per-view class tokens
  aef  - average over views and patches of patch embeddings (no class tokens)
  geef - aef-style pooled patches concatenated with ecf-style class tokens

The entropy of a view is the Shannon entropy of the softmax of its class
token; per-view weights are entropies normalized to the simplex. If all
entropies are zero the weights fall back to uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat
from .nn import Module, Linear

__all__ = [
    "STRATEGIES", "STRATEGY_PARTS", "FusionBundle", "FusedRepresentation",
    "view_entropy", "entropy_weights", "fuse", "fuse_batched", "ClassifierHead",
]

STRATEGIES = ("acf", "ecf", "aef", "geef")

# width of the fused feature, in multiples of embed_dim, per modality
STRATEGY_PARTS = {"acf": 1, "ecf": 1, "aef": 1, "geef": 2}


@dataclass
class FusionBundle:
    """Per-modality lists over views of (patch_tokens (p, D), cls_token (D,))."""

    per_modality: dict

    def modalities(self):
        return list(self.per_modality)


@dataclass
class FusedRepresentation:
    pooled_patches: dict      # modality -> Tensor (D,) or None
    fused_cls: dict           # modality -> Tensor (D,) or None
    weights: dict             # modality -> ndarray (l,) or None
    feature: object           # Tensor (d_fuse,)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def view_entropy(cls_token):
    """Shannon entropy (nats) of the softmax of a class token; scalar Tensor."""
    t = _as_tensor(cls_token)
    logp = t.log_softmax(axis=-1)
    p = logp.exp()
    return -(p * logp).sum()


def entropy_weights(cls_tokens):
    """Per-view weights H_j / sum_k H_k as a Tensor (l,); uniform if sum is 0."""
    if len(cls_tokens) == 0:
        raise ValueError("entropy_weights requires at least one view")
    stacked = concat([_as_tensor(c).reshape(1, -1) for c in cls_tokens], axis=0)
    return _entropy_weights_batched(stacked.reshape(1, *stacked.shape)).reshape(-1)


def _entropies_batched(cls, axis=-1):
    """cls (..., D) -> entropies (...,)."""
    logp = cls.log_softmax(axis=axis)
    p = logp.exp()
    return -(p * logp).sum(axis=axis)


def _entropy_weights_batched(cls):
    """cls (B, l, D) -> weights (B, l) on the simplex."""
    H = _entropies_batched(cls)  # (B, l)
    total = H.data.sum(axis=1, keepdims=True)
    degenerate = total <= 0.0
    if degenerate.any():
        # replace all-zero-entropy rows by constants -> uniform weights
        mask = Tensor((~degenerate).astype(H.dtype))
        H = H * mask + Tensor(degenerate.astype(H.dtype))
    return H / H.sum(axis=1, keepdims=True)


def fuse_batched(patch_tokens, cls_tokens, strategy, modalities):
    """Fuse batched features into one (B, d_fuse) tensor.

    patch_tokens: modality -> Tensor (B, l, p, D);
    cls_tokens:   modality -> Tensor (B, l, D).
    """
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    parts = []
    for m in modalities:
        cls = cls_tokens[m]
        B, l, D = cls.shape
        if l < 1:
            raise ValueError("fusion requires at least one view")
        if strategy in ("aef", "geef"):
            pooled = patch_tokens[m].mean(axis=(1, 2))  # (B, D)
            parts.append(pooled)
        if strategy == "acf":
            parts.append(cls.mean(axis=1))
        elif strategy in ("ecf", "geef"):
            w = _entropy_weights_batched(cls).reshape(B, l, 1)
            parts.append((w * cls).sum(axis=1))
    return concat(parts, axis=-1)


def fuse(bundle, strategy):
    """Fuse one sample's FusionBundle into a FusedRepresentation."""
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown fusion strategy {strategy!r}")
    if not bundle.per_modality:
        raise ValueError("fusion bundle has no modalities")

    pooled = {}
    fused_cls = {}
    weights = {}
    patch_tokens = {}
    cls_tokens = {}
    for m, views in bundle.per_modality.items():
        if len(views) == 0:
            raise ValueError(f"fusion bundle has no views for modality {m!r}")
        patches = []
        clss = []
        for view in views:
            if hasattr(view, "patch_tokens"):
                e, c = view.patch_tokens, view.cls_token
            else:
                e, c = view
            patches.append(_as_tensor(e))
            clss.append(_as_tensor(c))
        l = len(views)
        p, D = patches[0].shape
        patch_tokens[m] = concat([t.reshape(1, 1, p, D) for t in patches], axis=1)
        cls_tokens[m] = concat([t.reshape(1, 1, D) for t in clss], axis=1)

        pooled[m] = patch_tokens[m].mean(axis=(1, 2)).reshape(D) \
            if strategy in ("aef", "geef") else None
        if strategy == "acf":
            fused_cls[m] = cls_tokens[m].mean(axis=1).reshape(D)
            weights[m] = None
        elif strategy in ("ecf", "geef"):
            w = _entropy_weights_batched(cls_tokens[m])
            fused_cls[m] = (w.reshape(1, l, 1) * cls_tokens[m]).sum(axis=1).reshape(D)
            weights[m] = w.data.reshape(l).copy()
        else:
            fused_cls[m] = None
            weights[m] = None

    modalities = list(bundle.per_modality)
    feature = fuse_batched(patch_tokens, cls_tokens, strategy, modalities)
    return FusedRepresentation(pooled_patches=pooled, fused_cls=fused_cls,
                               weights=weights,
                               feature=feature.reshape(feature.shape[-1]))


class ClassifierHead(Module):
    """Two-layer MLP (hidden width = input width, GELU) producing logits."""

    def __init__(self, in_features, num_classes, rng, dtype=np.float32):
        super().__init__()
        self.in_features = in_features
        self.fc1 = Linear(in_features, in_features, rng, dtype=dtype)
        self.fc2 = Linear(in_features, num_classes, rng, dtype=dtype)

    def forward(self, feature):
        if feature.shape[-1] != self.in_features:
            raise ValueError(
                f"classifier expects width {self.in_features}, got {feature.shape}")
        return self.fc2(self.fc1(feature).gelu())
