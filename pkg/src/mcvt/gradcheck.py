"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["grad_check", "grad_check_sampled"]


def grad_check(f, x, h=1e-5, indices=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar Tensor; ``x`` should be float64 for the
    stated tolerances to be meaningful. Error per component is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    ``indices`` restricts the check to a subset of flat component indices.
    """
    if not x.requires_grad:
        x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = x.grad.reshape(-1).copy()
    x.zero_grad()

    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    max_err = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x).data)
        flat[i] = orig - h
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1e-8, abs(analytic[i]) + abs(numeric))
        if err > max_err:
            max_err = err
    return max_err


def grad_check_sampled(f, x, rng, h=1e-5, max_components=32, select="random"):
    """grad_check on a subset of components (for large tensors).

    ``select="largest"`` checks the components with the largest analytic
    gradient magnitude; components with near-zero gradients are dominated by
    finite-difference round-off and carry no signal about backprop
    correctness.
    """
    n = x.size
    if n <= max_components:
        return grad_check(f, x, h=h)
    if select == "largest":
        if not x.requires_grad:
            x.requires_grad = True
        x.zero_grad()
        f(x).backward()
        analytic = np.abs(x.grad.reshape(-1))
        x.zero_grad()
        idx = np.argsort(analytic)[-max_components:]
    else:
        idx = rng.choice(n, size=max_components, replace=False)
    return grad_check(f, x, h=h, indices=sorted(int(i) for i in idx))
