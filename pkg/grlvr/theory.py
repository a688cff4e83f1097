"""Architectural constants of the gradient-asymmetry bounds and their runtime checks.

Tokens are addressed as sites ``(trace_index, position, action)``: ``position`` is
the row of the trace whose logits produced the sampled token ``action``.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Literal, NamedTuple

import numpy as np

from .errors import DegenerateConstantError, InputError
from .grlvr_idtfs import LayerIdentifiers, block_weight_name
from .grpo import (
    RolloutBatch,
    active_positions,
    lm_head_gradient_from_records,
    token_records,
)
from .model import (
    LM_HEAD,
    ForwardTrace,
    LayerGradients,
    PolicyParams,
    intermediate_layer_names,
    is_intermediate,
    logit_jacobians,
)

logger = logging.getLogger(__name__)

POWER_ITERATIONS = 1000
POWER_TOLERANCE = 1e-10
BOUND_SLACK = 1e-9
ADVANTAGE_FLOOR = 1e-12
CONFIDENCE_CEILING = 1.0 - 1e-12

Percentile = Literal["median", "p95", "max"]


class Site(NamedTuple):
    trace_index: int
    position: int
    action: int


@dataclass(frozen=True)
class ArchConstants:
    alpha_min: float
    beta_rms: float
    rho_v: float
    rho_ffn: float
    beta_max: float
    C: float = 0.0
    c_struct: float = 0.0
    percentile: Percentile = "max"
    b_gate: float = 0.0
    rho_up: float = 0.0

    def with_jacobian_bound(self, C: float, percentile: Percentile = "max") -> "ArchConstants":
        return replace(self, C=C, c_struct=4.0 * self.beta_max * C / self.alpha_min, percentile=percentile)

    def as_dict(self) -> dict:
        return {
            "alpha_min": self.alpha_min, "beta_rms": self.beta_rms, "rho_v": self.rho_v,
            "rho_ffn": self.rho_ffn, "b_gate": self.b_gate, "rho_up": self.rho_up,
            "beta_max": self.beta_max, "C": self.C, "c_struct": self.c_struct, "percentile": self.percentile,
        }


@dataclass(frozen=True)
class DivergenceReport:
    chi2_hat: float
    r2_mean: float
    c_max: float
    lm_grad_energy: float
    bound_satisfied: bool

    @property
    def bound(self) -> float:
        return self.c_max * (1.0 + self.chi2_hat)


class AsymmetryCheck(NamedTuple):
    lhs: float
    rhs: float
    holds: bool
    layer: str


def spectral_norm(matrix: np.ndarray) -> float:
    """Largest singular value by power iteration on M^T M from the first basis vector."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if not np.any(matrix):
        return 0.0
    v = np.zeros(matrix.shape[1])
    v[0] = 1.0
    rng = None
    sigma = 0.0
    for _ in range(POWER_ITERATIONS):
        w = matrix.T @ (matrix @ v)
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            # start vector in the null space
            rng = rng or np.random.default_rng(0)
            v = rng.normal(size=v.size)
            v /= np.linalg.norm(v)
            continue
        v = w / norm
        estimate = math.sqrt(norm)
        if abs(estimate - sigma) <= POWER_TOLERANCE * estimate:
            return estimate
        sigma = estimate
    return float(np.linalg.norm(matrix @ v))


def measure_alpha_min(params: PolicyParams) -> float:
    w = params[LayerIdentifiers.FINAL_RMSNORM]
    if np.any(w == 0.0):
        raise DegenerateConstantError("final RMSNorm scale has a zero entry; alpha_min is 0")
    return 0.5 * float(np.min(w ** 2))


def measure_beta_max(params: PolicyParams, traces: list[ForwardTrace]) -> ArchConstants:
    if not traces:
        raise InputError("beta_max needs at least one trace")
    n_layers = params.config.n_layers
    beta_rms = max(float(np.max(params[block_weight_name(b, layer)] ** 2))
                   for b in range(n_layers)
                   for layer in (LayerIdentifiers.RMSNORM_ATTN, LayerIdentifiers.RMSNORM_FFN))
    rho_v = max(spectral_norm(params[block_weight_name(b, LayerIdentifiers.W_V)]) for b in range(n_layers))
    rho_up = max(spectral_norm(params[block_weight_name(b, LayerIdentifiers.W_UP)]) for b in range(n_layers))
    b_gate = 0.0
    for b in range(n_layers):
        name = block_weight_name(b, LayerIdentifiers.W_GATE)
        for trace in traces:
            b_gate = max(b_gate, float(np.max(np.abs(trace.inputs[name] @ params[name].T))))
    # activation Lipschitz constant is 1 for SiLU and ReLU
    rho_ffn = b_gate * rho_up
    beta_max = max(beta_rms, rho_v ** 2 * beta_rms, rho_ffn ** 2 * beta_rms)
    return ArchConstants(alpha_min=measure_alpha_min(params), beta_rms=beta_rms, rho_v=rho_v,
                         rho_ffn=rho_ffn, beta_max=beta_max, b_gate=b_gate, rho_up=rho_up)


def default_sites(traces: list[ForwardTrace]) -> list[Site]:
    """Every position whose next token is inside its trace."""
    return [Site(i, p, int(trace.tokens[p + 1])) for i, trace in enumerate(traces) for p in range(trace.length - 1)]


def batch_sites(batch: RolloutBatch, limit: int | None = None) -> list[Site]:
    sites = []
    for index, trajectory in enumerate(batch.trajectories()):
        for position, action in zip(active_positions(trajectory), trajectory.response):
            sites.append(Site(index, position, int(action)))
    return sites[:limit] if limit is not None else sites


def _check_layers(layers) -> list[str]:
    layers = list(layers)
    for name in layers:
        if name == LM_HEAD or not is_intermediate(name):
            raise InputError(f"'{name}' is not an intermediate linear layer")
    return layers


def jacobian_energies(params: PolicyParams, traces: list[ForwardTrace], layers=None,
                      sites: list[Site] | None = None) -> list[float]:
    """Per-site max over layers of both logit-sensitivity clauses."""
    if not traces:
        raise InputError("Jacobian energy needs at least one trace")
    layers = _check_layers(layers if layers is not None else intermediate_layer_names(params.config))
    sites = default_sites(traces) if sites is None else sites
    energies = []
    for site in sites:
        trace = traces[site.trace_index]
        jacobians = logit_jacobians(params, trace, site.position)
        policy = trace.policy[site.position]
        worst = 0.0
        for name in layers:
            row_energy = np.sum(jacobians[name] ** 2, axis=1)
            expected = float(policy @ row_energy)
            worst = max(worst, expected, float(row_energy[site.action]))
        energies.append(worst)
    return energies


def measure_jacobian_energy(params: PolicyParams, traces: list[ForwardTrace], layers=None,
                            sites: list[Site] | None = None) -> float:
    energies = jacobian_energies(params, traces, layers, sites)
    return max(energies) if energies else 0.0


def asymmetry_bound(c_struct: float, confidence: float) -> float:
    return c_struct / (1.0 - confidence) ** 2


def check_asymmetry(trace: ForwardTrace, grads: LayerGradients, constants: ArchConstants, token: int,
                    action: int, advantage: float, layers=None) -> AsymmetryCheck:
    """Intermediate-to-lm_head gradient energy ratio of one token against c_struct/(1-pi(a))^2.

    ``grads`` must come from a reverse pass seeded with that token's error signal.
    """
    confidence = float(trace.policy[token, action])
    if abs(advantage) <= ADVANTAGE_FLOOR:
        raise InputError("asymmetry bound needs a nonzero advantage")
    if confidence >= CONFIDENCE_CEILING:
        raise InputError("asymmetry bound needs pi(a) < 1")
    lm_energy = float(np.sum(grads.token_gradient(LM_HEAD, trace, token) ** 2))
    if lm_energy == 0.0:
        raise InputError("lm_head gradient of the token is zero")
    layers = layers if layers is not None else [n for n in grads.outputs if n != LM_HEAD]
    lhs, worst_layer = -1.0, ""
    for name in layers:
        ratio = float(np.sum(grads.token_gradient(name, trace, token) ** 2)) / lm_energy
        if ratio > lhs:
            lhs, worst_layer = ratio, name
    rhs = asymmetry_bound(constants.c_struct, confidence)
    return AsymmetryCheck(lhs, rhs, lhs <= rhs * (1.0 + BOUND_SLACK), worst_layer)


def chi2_hat(ratios) -> float:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        raise InputError("chi2 estimate needs at least one ratio")
    if np.any(ratios <= 0):
        raise InputError("importance ratios must be positive")
    return float(np.mean(ratios ** 2 - 1.0))


def c_max(batch: RolloutBatch, traces: list[ForwardTrace]) -> float:
    trajectories = batch.trajectories()
    if len(traces) != len(trajectories):
        raise InputError(f"{len(traces)} traces for {len(trajectories)} trajectories")
    worst, n_tokens = 0.0, 0
    for trajectory, trace, advantage in zip(trajectories, traces, batch.trajectory_advantages()):
        for position, action in zip(active_positions(trajectory), trajectory.response):
            residual = -trace.policy[position].copy()
            residual[action] += 1.0
            h = trace.lm_head_input[position]
            worst = max(worst, advantage ** 2 * float(residual @ residual) * float(h @ h))
            n_tokens += 1
    if n_tokens == 0:
        raise InputError("empty active set")
    return worst


def check_divergence_bound(batch: RolloutBatch, traces: list[ForwardTrace], eps_clip: float = 0.2) -> DivergenceReport:
    records = token_records(batch, traces, eps_clip)
    ratios = [r.ratio for rows in records for r in rows if r.active]
    chi2 = chi2_hat(ratios)
    r2_mean = float(np.mean(np.square(ratios)))
    energy = float(np.sum(lm_head_gradient_from_records(traces, records) ** 2))
    bound = c_max(batch, traces)
    return DivergenceReport(chi2_hat=chi2, r2_mean=r2_mean, c_max=bound, lm_grad_energy=energy,
                            bound_satisfied=energy <= bound * (1.0 + chi2) * (1.0 + BOUND_SLACK))


def percentile_report(samples) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise InputError("percentiles of an empty sample")
    return float(np.percentile(samples, 50)), float(np.percentile(samples, 95))


def constant_table(params: PolicyParams, traces: list[ForwardTrace], sites: list[Site] | None = None,
                   layers=None) -> dict[str, ArchConstants]:
    """ArchConstants per aggregate of the per-token Jacobian bound: median, p95 and max."""
    base = measure_beta_max(params, traces)
    energies = jacobian_energies(params, traces, layers, sites)
    if not energies:
        raise InputError("no tokens to measure")
    median, p95 = percentile_report(energies)
    return {
        "median": base.with_jacobian_bound(median, "median"),
        "p95": base.with_jacobian_bound(p95, "p95"),
        "max": base.with_jacobian_bound(max(energies), "max"),
    }


@dataclass(frozen=True)
class ActivationProfile:
    """Per-token activation energies, each divided by d_model.

    ``input_energy`` is the largest intermediate-layer input at the token and
    ``output_energy`` the lm_head input; tokens whose final RMSNorm input is below
    ``rms_eps`` are dropped.
    """
    input_energy: np.ndarray
    output_energy: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.input_energy / self.output_energy

    def summary(self) -> dict[str, dict[str, float]]:
        table = {}
        for name, samples in (("input_energy", self.input_energy), ("output_energy", self.output_energy),
                              ("ratio", self.ratio)):
            median, p95 = percentile_report(samples)
            table[name] = {"median": median, "p95": p95, "max": float(np.max(samples))}
        return table


def activation_profile(params: PolicyParams, traces: list[ForwardTrace],
                       sites: list[Site] | None = None) -> ActivationProfile:
    sites = default_sites(traces) if sites is None else sites
    d_model = params.config.d_model
    layers = intermediate_layer_names(params.config)
    inputs, outputs = [], []
    for site in sites:
        trace = traces[site.trace_index]
        if trace.final_mean_square()[site.position] < params.config.rms_eps:
            continue
        h = trace.lm_head_input[site.position]
        inputs.append(max(float(trace.inputs[name][site.position] @ trace.inputs[name][site.position])
                          for name in layers) / d_model)
        outputs.append(float(h @ h) / d_model)
    if not inputs:
        raise InputError("no tokens to profile")
    return ActivationProfile(np.asarray(inputs), np.asarray(outputs))
