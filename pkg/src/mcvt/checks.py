"""Gradient-check suite: finite-difference verification of every
differentiable operation and of the full backbone+fusion+head composite.

All checks run at float64 with h = 1e-5 against the 1e-4 relative-error
tolerance (1e-6 for ops whose derivative is exact away from kinks).
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .tensor import Tensor, concat, conv2d
from .gradcheck import grad_check, grad_check_sampled
from .nn import (LayerNorm, BatchNorm2d, MultiHeadSelfAttention,
                 TransformerBlock, PatchEmbed, Mlp)
from .model import (ModelConfig, MultiViewNet, Stem, PreResidualBlock,
                    MidResidualBlock)
from .fusion import fuse_batched, ClassifierHead
from .trainer import cross_entropy

__all__ = ["tiny_config", "run_gradient_suite", "composite_loss"]

F64 = np.float64


def tiny_config(**overrides):
    """A one-block-each configuration small enough for end-to-end checks."""
    base = dict(image_size=8, patch_size=4, stem_channels=4, pre_blocks=1,
                local_blocks=1, mid_blocks=1, global_blocks=1, embed_dim=12,
                heads=3, mlp_ratio=2, num_classes=3, fusion="geef",
                modalities=("rgb", "depth"))
    base.update(overrides)
    return ModelConfig(**base)


def composite_loss(model, views, targets):
    """Cross-entropy of the full network on a small batch (scalar Tensor)."""
    return cross_entropy(model(views), targets)


def _check_op(name, make_fn, make_x, rng, instances, tol=1e-4):
    worst = 0.0
    for _ in range(instances):
        x = Tensor(make_x(rng), requires_grad=True)
        worst = max(worst, grad_check(make_fn(rng), x))
    return (name, worst, tol)


@contextmanager
def _track_relu_margin(store):
    """Record the smallest |pre-activation| seen by any relu call."""
    orig = Tensor.relu

    def wrapped(self):
        if self.data.size:
            store[0] = min(store[0], float(np.abs(self.data).min()))
        return orig(self)

    Tensor.relu = wrapped
    try:
        yield
    finally:
        Tensor.relu = orig


def _sample_off_kink(make_x, fn, rng, margin=2e-4, tries=100):
    """Draw inputs whose relu pre-activations stay off the kink.

    Central differences at h = 1e-5 are exact for relu only when no
    pre-activation changes sign under the perturbation; a small margin
    guarantees that.
    """
    x = None
    for _ in range(tries):
        x = Tensor(make_x(rng), requires_grad=True)
        store = [np.inf]
        with _track_relu_margin(store):
            fn(x)
        if store[0] > margin:
            return x
    return x


def run_gradient_suite(seed=42, full=False, instances=None):
    """Returns a list of (check name, max relative error, tolerance)."""
    rng = np.random.default_rng(seed)
    n = instances if instances is not None else (20 if full else 5)
    results = []

    def _matmul_fn(r):
        w = Tensor(r.normal(size=(7, 3)))
        return lambda t: (t @ w).sum()

    def _softmax_fn(r):
        w = Tensor(r.normal(size=(3, 5)))
        return lambda t: (t.softmax(axis=-1) * w).sum()

    def _log_softmax_fn(r):
        w = Tensor(r.normal(size=(3, 5)))
        return lambda t: (t.log_softmax(axis=-1) * w).sum()

    # ---- elementary ops (reduced through random weighted sums to scalars)
    results.append(_check_op(
        "matmul", _matmul_fn,
        lambda r: r.normal(size=(5, 7)), rng, n))
    results.append(_check_op(
        "add/mul/pow", lambda r: (lambda t: ((t * t + 2.0 * t) ** 2.0).sum()),
        lambda r: r.normal(size=(4, 3)) + 3.0, rng, n))
    results.append(_check_op(
        "relu (off the kink)",
        lambda r: (lambda t: t.relu().sum()),
        lambda r: np.where(np.abs(z := r.normal(size=(6, 6))) < 0.05,
                           z + 0.2, z), rng, n, tol=1e-6))
    results.append(_check_op(
        "gelu", lambda r: (lambda t: t.gelu().sum()),
        lambda r: r.normal(size=(5, 4)), rng, n))
    results.append(_check_op(
        "exp/log", lambda r: (lambda t: (t.exp() + (t * t + 1.0).log()).sum()),
        lambda r: r.normal(size=(4, 4)), rng, n))
    results.append(_check_op(
        "softmax", _softmax_fn,
        lambda r: 3.0 * r.normal(size=(3, 5)), rng, n))
    results.append(_check_op(
        "log_softmax", _log_softmax_fn,
        lambda r: 3.0 * r.normal(size=(3, 5)), rng, n))
    results.append(_check_op(
        "reductions/reshape",
        lambda r: (lambda t: (t.mean(axis=0, keepdims=True) * t.sum(axis=1,
                   keepdims=True)).reshape(-1).sum()),
        lambda r: r.normal(size=(4, 4)), rng, n))
    results.append(_check_op(
        "concat/slice",
        lambda r: (lambda t: (concat([t[:, :2], t[:, 2:] * 2.0], axis=1)
                              ** 2.0).sum()),
        lambda r: r.normal(size=(3, 5)), rng, n))

    # ---- conv2d w.r.t. input, kernel and bias
    def conv_case(which):
        def run(r):
            x = r.normal(size=(2, 4, 8, 8))
            w = r.normal(size=(3, 4, 3, 3)) * 0.5
            b = r.normal(size=3)
            red = r.normal(size=(2, 3, 8, 8))
            def fn(t):
                parts = {"x": Tensor(x), "w": Tensor(w), "b": Tensor(b)}
                parts[which] = t
                return (conv2d(parts["x"], parts["w"], parts["b"])
                        * Tensor(red)).sum()
            init = {"x": x, "w": w, "b": b}[which]
            return grad_check(fn, Tensor(init.copy(), requires_grad=True))
        return run
    for which in ("x", "w", "b"):
        worst = max(conv_case(which)(np.random.default_rng(seed + i))
                    for i in range(n))
        results.append((f"conv2d d{which}", worst, 1e-4))

    # ---- layers
    def layer_check(name, build, x_shape, instances=n, tol=1e-4):
        worst = 0.0
        for i in range(instances):
            r = np.random.default_rng(seed + 7000 + i)
            module, fn = build(r)
            x = _sample_off_kink(lambda r: r.normal(size=x_shape), fn, r)
            worst = max(worst, grad_check(fn, x))
            # also check a couple of parameters
            for p in list(module.parameters())[:2]:
                worst = max(worst, grad_check_sampled(
                    lambda t, fn=fn, x=x: fn(x), p, r, max_components=6))
        results.append((name, worst, tol))

    def build_ln(r):
        m = LayerNorm(6, dtype=F64)
        m.weight.data = r.normal(size=6)
        m.bias.data = r.normal(size=6)
        red = Tensor(r.normal(size=(4, 6)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("layer_norm", build_ln, (4, 6))

    def build_bn(r):
        m = BatchNorm2d(3, dtype=F64)
        m.weight.data = 1.0 + 0.1 * r.normal(size=3)
        m.bias.data = r.normal(size=3)
        red = Tensor(r.normal(size=(2, 3, 4, 4)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("batch_norm (train mode)", build_bn, (2, 3, 4, 4))

    def build_msa(r):
        m = MultiHeadSelfAttention(12, 3, r, dtype=F64)
        red = Tensor(r.normal(size=(9, 12)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("multi_head_attention", build_msa, (9, 12))

    def build_block(r):
        m = TransformerBlock(12, 3, r, mlp_ratio=2, dtype=F64)
        red = Tensor(r.normal(size=(5, 12)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("transformer_block", build_block, (5, 12))

    def build_mlp(r):
        m = Mlp(8, r, ratio=2, dtype=F64)
        red = Tensor(r.normal(size=(3, 8)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("mlp", build_mlp, (3, 8))

    def build_stem(r):
        m = Stem(3, 4, r, dtype=F64)
        red = Tensor(r.normal(size=(2, 4, 6, 6)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("stem", build_stem, (2, 3, 6, 6))

    def build_pre(r):
        m = PreResidualBlock(3, r, dtype=F64)
        red = Tensor(r.normal(size=(2, 3, 5, 5)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("pre_residual_block", build_pre, (2, 3, 5, 5))

    def build_mid(r):
        m = MidResidualBlock(6, 3, r, dtype=F64)
        red = Tensor(r.normal(size=(2, 9, 6)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("mid_residual_block", build_mid, (2, 9, 6))

    def build_patch(r):
        m = PatchEmbed(3, 4, 8, 10, r, dtype=F64)
        red = Tensor(r.normal(size=(2, 5, 10)))
        return m, lambda t: (m(t) * red).sum()
    layer_check("patch_embed", build_patch, (2, 3, 8, 8))

    # ---- fusion + head, and cross entropy
    def build_fusion(r):
        head = ClassifierHead(4 * 6, 3, r, dtype=F64)
        targets = r.integers(0, 3, size=2)
        def fn(t):
            patches = {"rgb": t, "depth": t * 0.5 + 1.0}
            cls = {"rgb": t.mean(axis=2), "depth": (t * t).mean(axis=2)}
            feat = fuse_batched(patches, cls, "geef", ("rgb", "depth"))
            return cross_entropy(head(feat), targets)
        return head, fn
    layer_check("geef_fusion+classifier", build_fusion, (2, 3, 4, 6))

    worst = 0.0
    for i in range(n):
        r = np.random.default_rng(seed + 9000 + i)
        logits = Tensor(r.normal(size=(4, 5)), requires_grad=True)
        targets = r.integers(0, 5, size=4)
        worst = max(worst, grad_check(
            lambda t, tg=targets: cross_entropy(t, tg), logits))
    results.append(("cross_entropy", worst, 1e-4))

    # ---- full composite: backbone + fusion + head on a 2-sample batch
    worst = 0.0
    for i in range(n):
        r = np.random.default_rng(seed + 11000 + i)
        cfg = tiny_config()
        model = MultiViewNet(cfg, r, dtype=F64)
        depth_views = Tensor(r.normal(size=(2, 2, 1, 8, 8)))
        targets = r.integers(0, cfg.num_classes, size=2)

        def input_fn(t):
            return composite_loss(model, {"rgb": t, "depth": depth_views},
                                  targets)
        rgb_views = _sample_off_kink(
            lambda r: r.normal(size=(2, 2, 3, 8, 8)), input_fn, r)
        views = {"rgb": rgb_views, "depth": depth_views}
        worst = max(worst, grad_check(input_fn, rgb_views,
                                      indices=r.choice(2 * 2 * 3 * 64, 24,
                                                       replace=False)))
        # the strongest-gradient components of every parameter tensor
        for name, p in model.named_parameters():
            def param_fn(_):
                return composite_loss(model, views, targets)
            worst = max(worst, grad_check_sampled(param_fn, p, r,
                                                  max_components=3,
                                                  select="largest"))
    results.append(("full composite (backbone+fusion+head)", worst, 1e-4))

    return results
