"""Dynamic gradient gating: Z-score anomaly detection on lm_head gradient-energy increments."""
import logging
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .config import GateConfig
from .errors import InputError
from .model import LayerGradients

logger = logging.getLogger(__name__)


class GateReason(str, Enum):
    PASS = "pass"
    WINDOW_WARMUP = "window_warmup"
    FIRST_REUSE_STEP = "first_reuse_step"
    ANOMALY = "anomaly"


@dataclass(frozen=True)
class GateState:
    increments: tuple[float, ...] = ()
    last_energy: float | None = None
    steps_observed: int = 0

    def statistics(self) -> tuple[float, float]:
        """Mean and population std of the window; the current increment is never in it."""
        window = np.asarray(self.increments, dtype=np.float64)
        return float(window.mean()), float(window.std())


@dataclass(frozen=True)
class GateDecision:
    z_score: float | None
    fired: bool
    reason: GateReason
    g_t: float = 0.0
    delta_g: float | None = None

    def __post_init__(self):
        if self.fired and self.reason is not GateReason.ANOMALY:
            raise InputError("a fired decision must carry reason 'anomaly'")

    def as_event(self) -> dict:
        return {
            "g_t": self.g_t,
            "delta_g": self.delta_g,
            "z": self.z_score,
            "fired": self.fired,
            "reason": self.reason.value,
        }


def observe(state: GateState, cfg: GateConfig, g_t: float, reuse_index_k: int) -> tuple[GateDecision, GateState]:
    if not math.isfinite(g_t) or g_t < 0:
        raise InputError(f"gradient energy must be finite and non-negative, got {g_t}")
    max_reuse = cfg.max_reuse or reuse_index_k
    if not 1 <= reuse_index_k <= max_reuse:
        raise InputError(f"reuse index {reuse_index_k} outside [1, {max_reuse}]")

    if state.last_energy is None:
        return (GateDecision(None, False, GateReason.WINDOW_WARMUP, g_t=g_t),
                replace(state, last_energy=g_t))

    delta = g_t - state.last_energy
    z_score = None
    if state.steps_observed >= cfg.window:
        mu, sigma = state.statistics()
        z_score = (delta - mu) / (sigma + cfg.epsilon)

    if z_score is None:
        reason = GateReason.WINDOW_WARMUP
    elif reuse_index_k == 1:
        reason = GateReason.FIRST_REUSE_STEP
    elif z_score > cfg.tau:
        logger.info("Gate fired: z=%.4g above tau=%.4g at reuse step %d", z_score, cfg.tau, reuse_index_k)
        # the spike must not contaminate the window or the previous energy
        return GateDecision(z_score, True, GateReason.ANOMALY, g_t=g_t, delta_g=delta), state
    else:
        reason = GateReason.PASS

    updated = GateState(increments=(state.increments + (delta,))[-cfg.window:],
                        last_energy=g_t,
                        steps_observed=state.steps_observed + 1)
    return GateDecision(z_score, False, reason, g_t=g_t, delta_g=delta), updated


def apply_decision(decision: GateDecision, grads: LayerGradients) -> LayerGradients:
    if decision.fired:
        return grads.zeros_like()
    return grads
