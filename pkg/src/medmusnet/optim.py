"""SGD (Nesterov momentum) and Adam with L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerConfig:
    kind: str = "sgd_nesterov"  # or "adam"
    lr: float = 0.01
    momentum: float = 0.99
    weight_decay: float = 3e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


def optimizer_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: Dict[int, dict],
    config: OptimizerConfig,
    lr: Optional[float] = None,
) -> List[np.ndarray]:
    """Return updated copies of ``params``; ``state`` is updated in place.

    Weight decay enters as an L2 term added to the gradient.
    """
    lr = config.lr if lr is None else lr
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        g = g + config.weight_decay * p if config.weight_decay else g
        st = state.setdefault(i, {})
        if config.kind == "sgd_nesterov":
            if config.momentum:
                buf = st.get("momentum")
                buf = g.copy() if buf is None else config.momentum * buf + g
                st["momentum"] = buf
                step = g + config.momentum * buf
            else:
                step = g
            out.append(p - lr * step)
        elif config.kind == "sgd":
            if config.momentum:
                buf = st.get("momentum")
                buf = g.copy() if buf is None else config.momentum * buf + g
                st["momentum"] = buf
                step = buf
            else:
                step = g
            out.append(p - lr * step)
        elif config.kind == "adam":
            b1, b2 = config.betas
            t = st.get("t", 0) + 1
            m = b1 * st.get("m", np.zeros_like(p)) + (1 - b1) * g
            v = b2 * st.get("v", np.zeros_like(p)) + (1 - b2) * g * g
            st.update(t=t, m=m, v=v)
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            out.append(p - lr * mhat / (np.sqrt(vhat) + config.eps))
        else:
            raise ValueError(f"unknown optimizer {config.kind!r}")
    return out


class Optimizer:
    """Stateful wrapper updating ``Tensor`` parameters in place."""

    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.state: Dict[int, dict] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: Optional[float] = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = optimizer_step([p.data for p in self.params], grads, self.state, self.config, lr)
        for p, v in zip(self.params, new):
            p.data = v.astype(p.data.dtype, copy=False)
