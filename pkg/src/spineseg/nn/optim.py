from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9

    def __post_init__(self):
        if self.kind not in ("adam", "sgd-momentum"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


@dataclass
class OptimizerState:
    t: int = 0
    slots: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, hyper: OptimizerConfig, state: OptimizerState) -> OptimizerState:
    """Update ``params`` in place, visiting them in dict order."""
    if hyper.lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {hyper.lr}")
    if params.keys() != grads.keys():
        raise ValueError("gradients do not match parameters")
    state.t += 1
    if hyper.kind == "sgd-momentum":
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
            v = state.slots.get(name)
            if v is None:
                v = state.slots[name] = np.zeros_like(p)
            v *= hyper.momentum
            v -= hyper.lr * g
            p += v
        return state

    b1, b2 = hyper.beta1, hyper.beta2
    # bias correction folded into the step size
    step = float(hyper.lr * np.sqrt(1 - b2 ** state.t) / (1 - b1 ** state.t))
    eps_hat = float(hyper.eps * np.sqrt(1 - b2 ** state.t))
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        if name not in state.slots:
            state.slots[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state.slots[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= step * m / (np.sqrt(v) + eps_hat)
    return state
