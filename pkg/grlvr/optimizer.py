"""Adam with bias correction, written functionally so a refused step changes nothing."""
from dataclasses import dataclass

import numpy as np

from .config import AdamConfig
from .errors import InputError, NumericError
from .model import LayerGradients, PolicyParams


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: PolicyParams) -> "AdamState":
        return cls({n: np.zeros_like(w) for n, w in params.weights.items()},
                   {n: np.zeros_like(w) for n, w in params.weights.items()})

    def copy(self) -> "AdamState":
        return AdamState({n: a.copy() for n, a in self.m.items()},
                         {n: a.copy() for n, a in self.v.items()}, self.step)


def adam_step(params: PolicyParams, grads: LayerGradients, state: AdamState,
              hyper: AdamConfig) -> tuple[PolicyParams, AdamState]:
    """One descent step on ``grads``; returns new params and state, inputs untouched."""
    for name, w in params.weights.items():
        g = grads.weights.get(name)
        if g is None or g.shape != w.shape or state.m[name].shape != w.shape:
            raise InputError(f"gradient/state for {name} does not match parameter shape {w.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient refused by optimizer", layer=name)

    step = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    new_weights, new_m, new_v = {}, {}, {}
    for name, w in params.weights.items():
        g = grads.weights[name]
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
        new_weights[name] = w - hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_m[name], new_v[name] = m, v
    return params.with_weights(new_weights), AdamState(new_m, new_v, step)
