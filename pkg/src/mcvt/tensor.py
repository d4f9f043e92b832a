"""Dense tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every op that touches a tensor with
``requires_grad`` records a backward closure, and ``Tensor.backward`` walks
the recorded graph in reverse topological order exactly once. Gradients
accumulate into ``.grad`` across repeated backward calls until reset.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = ["Tensor", "concat", "conv2d", "layer_norm", "batch_norm",
           "no_grad", "set_debug_checks"]

# python floats: numpy-scalar factors would promote float32 data to float64
_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))

# When enabled, every forward op asserts its output is finite.
_DEBUG_CHECK_FINITE = False

# When False, ops produce plain tensors with no tape (inference mode).
_GRAD_ENABLED = True


def set_debug_checks(enabled):
    """Toggle NaN/Inf checking of every forward result (slow; for tests)."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(enabled)


class no_grad:
    """Context manager that disables tape recording (for inference)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(value, dtype=None):
    arr = np.asarray(value)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy-backed n-d array participating in a reverse-mode tape."""

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._pass_grad = None  # gradient flowing within one backward() pass
        if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise FloatingPointError("non-finite values in forward result")

    # ------------------------------------------------------------------ misc
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    # ------------------------------------------------------------- op helper
    @staticmethod
    def _op(out_data, parents, backward):
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        if req:
            return Tensor(out_data, requires_grad=True, _parents=tuple(parents),
                          _backward=backward)
        return Tensor(out_data)

    @staticmethod
    def _coerce(other, like):
        if isinstance(other, Tensor):
            return other
        return Tensor(_as_array(other, like.dtype))

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other):
        other = Tensor._coerce(other, self)
        out_data = self.data + other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._op(out_data, (self, other), backward)

    __radd__ = __add__

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        out_data = self.data * other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._op(out_data, (self, other), backward)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        return self + (-other)

    def __rsub__(self, other):
        return Tensor._coerce(other, self) + (-self)

    def __truediv__(self, other):
        # a single correctly rounded division keeps quotients like x/(4x) exact
        other = Tensor._coerce(other, self)
        out_data = self.data / other.data

        def backward(g, a=self, b=other):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data),
                                           b.shape))

        return Tensor._op(out_data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __pow__(self, exponent):
        exponent = float(exponent)
        out_data = self.data ** exponent

        def backward(g, a=self, e=exponent):
            if a.requires_grad:
                a._accumulate(g * e * a.data ** (e - 1.0))

        return Tensor._op(out_data, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._coerce(other, self)
        a_d, b_d = self.data, other.data
        if a_d.shape[-1] != (b_d.shape[-2] if b_d.ndim > 1 else b_d.shape[0]):
            raise ValueError(
                f"matmul inner dimensions disagree: {a_d.shape} x {b_d.shape}")
        out_data = np.matmul(a_d, b_d)

        def backward(g, a=self, b=other):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._op(out_data, (self, other), backward)

    # ------------------------------------------------------------ reductions
    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, ax=axis, kd=keepdims):
            if not a.requires_grad:
                return
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._op(out_data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[i] for i in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ----------------------------------------------------------- elementwise
    def exp(self):
        out_data = np.exp(self.data)

        def backward(g, a=self, y=out_data):
            if a.requires_grad:
                a._accumulate(g * y)

        return Tensor._op(out_data, (self,), backward)

    def log(self):
        out_data = np.log(self.data)

        def backward(g, a=self):
            if a.requires_grad:
                a._accumulate(g / a.data)

        return Tensor._op(out_data, (self,), backward)

    def relu(self):
        out_data = np.maximum(self.data, 0.0)

        def backward(g, a=self):
            if a.requires_grad:
                # subgradient at 0 is defined as 0
                a._accumulate(g * (a.data > 0.0))

        return Tensor._op(out_data, (self,), backward)

    def gelu(self):
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out_data = x * cdf

        def backward(g, a=self):
            if a.requires_grad:
                # cdf is recomputed rather than stored: the hidden MLP
                # activations are the largest arrays in the graph
                x = a.data
                cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
                pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
                a._accumulate(g * (cdf + x * pdf))

        return Tensor._op(out_data, (self,), backward)

    def softmax(self, axis=-1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g, a=self, y=out_data, ax=axis):
            if a.requires_grad:
                a._accumulate(y * (g - (g * y).sum(axis=ax, keepdims=True)))

        return Tensor._op(out_data, (self,), backward)

    def log_softmax(self, axis=-1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse

        def backward(g, a=self, y=out_data, ax=axis):
            if a.requires_grad:
                a._accumulate(g - np.exp(y) * g.sum(axis=ax, keepdims=True))

        return Tensor._op(out_data, (self,), backward)

    # --------------------------------------------------------------- shaping
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def backward(g, a=self):
            if a.requires_grad:
                a._accumulate(g.reshape(a.shape))

        return Tensor._op(out_data, (self,), backward)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out_data = self.data.transpose(axes)
        inverse = tuple(np.argsort(axes))

        def backward(g, a=self, inv=inverse):
            if a.requires_grad:
                a._accumulate(g.transpose(inv))

        return Tensor._op(out_data, (self,), backward)

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward(g, a=self, k=key):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[k] = g
                a._accumulate(full)

        return Tensor._op(np.ascontiguousarray(out_data), (self,), backward)

    # -------------------------------------------------------------- backward
    def _accumulate(self, g):
        if self._pass_grad is None:
            self._pass_grad = np.array(g, dtype=self.dtype, copy=True)
        else:
            self._pass_grad += g

    def backward(self, free_graph=False):
        """Backpropagate from a scalar; populates .grad on requires_grad leaves.

        Repeated calls (on the same or rebuilt graphs) accumulate into .grad.
        Each node's local backward runs exactly once per pass, in reverse
        topological order. With ``free_graph=True`` each node's tape record is
        released as soon as it has been processed, so intermediate activations
        become collectable during the pass; the graph cannot be replayed.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor outside the tape")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        for node in topo:
            node._pass_grad = None
        self._pass_grad = np.ones_like(self.data)
        for i in range(len(topo) - 1, -1, -1):
            node = topo[i]
            g = node._pass_grad
            node._pass_grad = None
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
            else:
                node._backward(g)
                if free_graph:
                    node._backward = None
                    node._parents = ()
                    topo[i] = None


def concat(tensors, axis=0):
    """Concatenate tensors along an axis, differentiably."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, parts=tensors, ax=axis, offs=offsets):
        slicer = [slice(None)] * g.ndim
        for t, start, stop in zip(parts, offs[:-1], offs[1:]):
            if t.requires_grad:
                slicer[ax] = slice(int(start), int(stop))
                t._accumulate(g[tuple(slicer)])

    return Tensor._op(out_data, tuple(tensors), backward)


def conv2d(x, w, b):
    """3x3 convolution, stride 1, padding 1 (spatial extent preserved).

    x: (B, Cin, H, W); w: (Cout, Cin, 3, 3); b: (Cout,). Implemented as nine
    shifted GEMMs on the padded input, so no im2col buffer is materialized.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {x.shape} and {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {w.shape[2:]}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    B, Cin, H, W = x.shape
    Cout = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))

    out = np.empty((B, H, W, Cout), dtype=x.dtype)
    out[...] = b.data
    for ki in range(3):
        for kj in range(3):
            patch = xp[:, :, ki:ki + H, kj:kj + W]  # (B,Cin,H,W)
            # (B,H,W,Cin) @ (Cin,Cout)
            out += np.tensordot(patch, w.data[:, :, ki, kj], axes=([1], [1]))
    out_data = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g, x=x, w=w, b=b, xp=xp, B=B, Cin=Cin, H=H, W=W):
        gh = g.transpose(0, 2, 3, 1)  # (B,H,W,Cout)
        if b.requires_grad:
            b._accumulate(gh.sum(axis=(0, 1, 2)))
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for ki in range(3):
                for kj in range(3):
                    patch = xp[:, :, ki:ki + H, kj:kj + W]
                    gw[:, :, ki, kj] = np.tensordot(
                        gh, patch, axes=([0, 1, 2], [0, 2, 3]))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(3):
                for kj in range(3):
                    contrib = np.tensordot(gh, w.data[:, :, ki, kj],
                                           axes=([3], [0]))  # (B,H,W,Cin)
                    gxp[:, :, ki:ki + H, kj:kj + W] += contrib.transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, 1:-1, 1:-1])

    return Tensor._op(out_data, (x, w, b), backward)


def layer_norm(x, w, b, eps=1e-6):
    """Normalize over the last axis: (x - mean) / sqrt(var + eps) * w + b.

    Fused into a single tape node: only the normalized values and the inverse
    standard deviations are retained for backward.
    """
    d = x.data
    mean = d.mean(axis=-1, keepdims=True)
    xc = d - mean
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * w.data + b.data

    def backward(g, x=x, w=w, b=b, xhat=xhat, inv=inv):
        if b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if w.requires_grad:
            w._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gh = g * w.data
            gx = (gh - gh.mean(axis=-1, keepdims=True)
                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True)) * inv
            x._accumulate(gx)

    return Tensor._op(out_data, (x, w, b), backward)


def batch_norm(x, w, b, eps=1e-5):
    """Per-channel normalization of (B, C, H, W) by batch statistics.

    Returns (out, batch_mean, batch_var) where the statistics are plain
    (C,) arrays (biased variance). Fused single tape node, as layer_norm.
    """
    d = x.data
    axes = (0, 2, 3)
    mean = d.mean(axis=axes, keepdims=True)
    xc = d - mean
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    wc = w.data.reshape(1, -1, 1, 1)
    out_data = xhat * wc + b.data.reshape(1, -1, 1, 1)

    def backward(g, x=x, w=w, b=b, xhat=xhat, inv=inv, wc=wc):
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            w._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = g * wc
            gx = (gh - gh.mean(axis=(0, 2, 3), keepdims=True)
                  - xhat * (gh * xhat).mean(axis=(0, 2, 3), keepdims=True)) * inv
            x._accumulate(gx)

    out = Tensor._op(out_data, (x, w, b), backward)
    return out, mean.reshape(-1), var.reshape(-1)
