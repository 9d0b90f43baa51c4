"""Bias-corrected Adam over a ParameterSet."""
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from disenhcn.errors import ShapeError, TrainingError
from disenhcn.model import ParameterSet

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = BETA1
    beta2: float = BETA2
    eps: float = EPS

    @classmethod
    def zeros_like(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t) for name, t in params.items()},
            v={name: np.zeros_like(t) for name, t in params.items()},
        )

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: x.copy() for k, x in self.m.items()},
            v={k: x.copy() for k, x in self.v.items()},
            step=self.step,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
        )


def adam_step(params: ParameterSet, grads: Dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Update ``params`` and ``state`` in place.

    A parameter missing from ``grads`` is treated as having a zero gradient.
    """
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0].tolist()
            raise TrainingError(f"non-finite gradient for {name} at {bad}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
