"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(
    f: Callable[[], float], x: Tensor, step: float = 1e-4, kink_rtol: float = 1e-3, min_step: float = 1e-8
) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x.data`` in place.

    When the forward and backward one-sided slopes disagree by more than
    ``kink_rtol`` the stencil straddles a kink (e.g. a leaky-ReLU input
    crossing zero); the step is then shrunk tenfold, down to ``min_step``.
    """
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    f0 = f()
    for i in range(flat.size):
        orig = flat[i]
        h = step
        while True:
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) <= kink_rtol * max(abs(fwd), abs(bwd), 1e-12) or h / 10 < min_step:
                break
            h /= 10
        gf[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a|_inf, |n|_inf).

    Normalising by the largest gradient entry of the tensor keeps entries that
    are zero up to rounding from dominating the ratio.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(
    loss_fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-4
) -> Dict[int, float]:
    """Compare backprop against finite differences for each input.

    ``loss_fn`` must rebuild the graph from the current input values and
    return a scalar tensor. Returns the relative error per input index.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        return float(loss_fn().data)

    return {i: relative_error(a, numeric_grad(value, t, step)) for i, (t, a) in enumerate(zip(inputs, analytic))}
