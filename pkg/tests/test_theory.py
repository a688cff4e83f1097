from types import SimpleNamespace

import numpy as np
import pytest

from grlvr.env import TaskInstance, Trajectory
from grlvr.errors import DegenerateConstantError, InputError
from grlvr.grlvr_idtfs import LayerIdentifiers, TokenIdentifiers, block_weight_name
from grlvr.grpo import RolloutBatch, TokenRecord, error_signal, lm_head_gradient_from_records, token_records
from grlvr.model import PolicyParams, backward, forward, intermediate_layer_names, logit_jacobian
from grlvr.theory import (
    ArchConstants,
    activation_profile,
    asymmetry_bound,
    batch_sites,
    c_max,
    check_asymmetry,
    check_divergence_bound,
    chi2_hat,
    constant_table,
    default_sites,
    jacobian_energies,
    measure_alpha_min,
    measure_beta_max,
    measure_jacobian_energy,
    percentile_report,
    spectral_norm,
)


def _with(params: PolicyParams, **updates) -> PolicyParams:
    weights = {n: w.copy() for n, w in params.weights.items()}
    for name, value in updates.items():
        weights[name] = value
    return PolicyParams(params.config, weights)


def test_alpha_min_unit_scales(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    assert measure_alpha_min(params) == 0.5


def test_alpha_min_uses_smallest_scale(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    scale = np.full(8, 3.0)
    scale[4] = -2.0
    assert measure_alpha_min(_with(params, **{LayerIdentifiers.FINAL_RMSNORM: scale})) == 2.0
    assert measure_alpha_min(_with(params, **{LayerIdentifiers.FINAL_RMSNORM: 0.1 * scale})) == pytest.approx(0.02)


def test_alpha_min_zero_entry_is_degenerate(tiny_model_config):
    params = PolicyParams.init(tiny_model_config, np.random.default_rng(0))
    scale = np.ones(8)
    scale[0] = 0.0
    with pytest.raises(DegenerateConstantError):
        measure_alpha_min(_with(params, **{LayerIdentifiers.FINAL_RMSNORM: scale}))


def _zero_operators(params: PolicyParams) -> PolicyParams:
    return _with(params, **{
        block_weight_name(0, LayerIdentifiers.W_V): np.zeros((8, 8)),
        block_weight_name(0, LayerIdentifiers.W_UP): np.zeros((16, 8)),
    })


def test_beta_max_with_zero_operators_is_beta_rms(tiny_model_config):
    params = _zero_operators(PolicyParams.init(tiny_model_config, np.random.default_rng(0)))
    constants = measure_beta_max(params, [forward(params, [1, 2, 3])])
    assert constants.rho_v == 0.0 and constants.rho_ffn == 0.0
    assert constants.beta_rms == 1.0 and constants.beta_max == 1.0


def test_beta_rms_takes_largest_squared_entry(tiny_model_config):
    params = _zero_operators(PolicyParams.init(tiny_model_config, np.random.default_rng(0)))
    scale = np.ones(8)
    scale[2] = -3.0
    params = _with(params, **{block_weight_name(0, LayerIdentifiers.RMSNORM_FFN): scale})
    assert measure_beta_max(params, [forward(params, [1, 2])]).beta_max == 9.0


def test_beta_max_dominated_by_value_projection(tiny_model_config):
    params = _zero_operators(PolicyParams.init(tiny_model_config, np.random.default_rng(0)))
    params = _with(params, **{block_weight_name(0, LayerIdentifiers.W_V): 2.0 * np.eye(8)})
    constants = measure_beta_max(params, [forward(params, [4, 5])])
    assert constants.rho_v == pytest.approx(2.0, rel=1e-12)
    assert constants.beta_max == pytest.approx(4.0, rel=1e-12)


def test_beta_max_needs_traces(tiny_model_config):
    with pytest.raises(InputError):
        measure_beta_max(PolicyParams.init(tiny_model_config, np.random.default_rng(0)), [])


def test_spectral_norm_values():
    assert spectral_norm(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-12)
    assert spectral_norm(np.zeros((3, 2))) == 0.0
    # first basis vector lies in the null space
    assert spectral_norm(np.array([[0.0, 2.0], [0.0, 0.0]])) == pytest.approx(2.0, rel=1e-9)
    matrix = np.random.default_rng(3).normal(size=(6, 4))
    assert spectral_norm(matrix) == pytest.approx(np.linalg.norm(matrix, 2), rel=1e-6)


def test_chi2_hat_values():
    assert chi2_hat([1.0, 1.0, 1.0]) == 0.0
    assert chi2_hat([2.0, 0.5]) == pytest.approx(1.125)
    with pytest.raises(InputError):
        chi2_hat([])
    with pytest.raises(InputError):
        chi2_hat([1.0, -0.5])


def test_percentile_report_linear_interpolation():
    median, p95 = percentile_report(np.arange(1, 101))
    assert median == pytest.approx(50.5)
    assert p95 == pytest.approx(95.05)


def test_asymmetry_bound_value():
    assert asymmetry_bound(0.01, 0.5) == pytest.approx(0.04)
    assert asymmetry_bound(0.0, 0.9) == 0.0


def test_arch_constants_c_struct():
    constants = ArchConstants(alpha_min=0.5, beta_rms=1.0, rho_v=1.0, rho_ffn=0.5, beta_max=2.0)
    bounded = constants.with_jacobian_bound(3.0, "p95")
    assert bounded.c_struct == pytest.approx(4.0 * 2.0 * 3.0 / 0.5)
    assert bounded.percentile == "p95" and constants.C == 0.0


def _single_token_case(advantage=1.0, ratio=1.0):
    instance = TaskInstance((1, TokenIdentifiers.DELIMITER), (0,))
    trajectory = Trajectory(instance, [0], [0.0], 1)
    batch = SimpleNamespace(trajectories=lambda: [trajectory], trajectory_advantages=lambda: [advantage])
    policy = np.array([[0.25, 0.25, 0.25, 0.25], [0.0, 1.0, 0.0, 0.0]])
    trace = SimpleNamespace(logits=np.zeros((2, 4)), policy=policy, lm_head_input=np.array([[5.0, 5.0], [1.0, 1.0]]))
    record = TokenRecord(0, 0.0, float(np.log(ratio)), ratio, advantage, position=1)
    return batch, trace, record


def test_c_max_single_token():
    batch, trace, _ = _single_token_case()
    assert c_max(batch, [trace]) == pytest.approx(4.0)


def test_single_token_divergence_bound_is_tight():
    batch, trace, record = _single_token_case(advantage=-0.7, ratio=1.1)
    energy = float(np.sum(lm_head_gradient_from_records([trace], [[record]]) ** 2))
    bound = c_max(batch, [trace]) * (1.0 + chi2_hat([1.1]))
    assert energy == pytest.approx(bound, rel=1e-12)


def test_divergence_bound_holds_on_rollouts(small_batch):
    params, batch, traces = small_batch
    report = check_divergence_bound(batch, traces)
    assert report.bound_satisfied
    assert report.chi2_hat == pytest.approx(0.0, abs=1e-10)
    assert report.lm_grad_energy <= report.bound * (1 + 1e-9)


def test_jacobian_energies_match_per_layer_jacobians(random_params):
    trace = forward(random_params, [1, 4, 2, 7])
    site = default_sites([trace])[1]
    expected = 0.0
    for name in intermediate_layer_names(random_params.config):
        rows = np.sum(logit_jacobian(random_params, trace, name, site.position) ** 2, axis=1)
        expected = max(expected, float(trace.policy[site.position] @ rows), float(rows[site.action]))
    (actual,) = jacobian_energies(random_params, [trace], sites=[site])
    assert actual == pytest.approx(expected, rel=1e-12)
    assert measure_jacobian_energy(random_params, [trace]) >= actual


def test_jacobian_energies_reject_lm_head(random_params):
    trace = forward(random_params, [1, 4])
    with pytest.raises(InputError):
        jacobian_energies(random_params, [trace], layers=[LayerIdentifiers.LM_HEAD])


def test_default_sites_cover_in_trace_positions():
    trace = SimpleNamespace(tokens=np.array([3, 1, 4]), length=3)
    assert [tuple(s) for s in default_sites([trace])] == [(0, 0, 1), (0, 1, 4)]


def test_constant_table_percentiles_are_ordered(small_batch):
    params, batch, traces = small_batch
    table = constant_table(params, traces, sites=batch_sites(batch, limit=8))
    assert set(table) == {"median", "p95", "max"}
    assert table["median"].C <= table["p95"].C <= table["max"].C
    assert table["median"].c_struct <= table["max"].c_struct
    assert all(t.alpha_min == 0.5 for t in table.values())


def test_asymmetry_holds_on_every_eligible_token(small_batch):
    params, batch, traces = small_batch
    rng = np.random.default_rng(6)
    batch = RolloutBatch(batch.groups, batch.group_size,
                         advantages=[list(rng.normal(size=len(g))) for g in batch.groups])
    sites = batch_sites(batch)
    constants = constant_table(params, traces, sites=sites)["max"]
    records = token_records(batch, traces, 0.2)
    advantages = batch.trajectory_advantages()
    checked = 0
    for site in sites:
        trace = traces[site.trace_index]
        record = next(r for r in records[site.trace_index] if r.position == site.position)
        advantage = advantages[site.trace_index]
        if abs(advantage) <= 1e-12 or trace.final_mean_square()[site.position] < params.config.rms_eps:
            continue
        seeds = np.zeros_like(trace.logits)
        seeds[site.position] = error_signal(record.ratio, advantage, trace.policy[site.position], site.action)
        check = check_asymmetry(trace, backward(params, trace, seeds), constants, site.position,
                                site.action, advantage)
        assert check.holds, (site, check)
        checked += 1
    assert checked > 0


def test_check_asymmetry_preconditions(random_params):
    trace = forward(random_params, [1, 4])
    constants = ArchConstants(alpha_min=0.5, beta_rms=1.0, rho_v=1.0, rho_ffn=1.0, beta_max=1.0)
    seeds = np.zeros_like(trace.logits)
    seeds[0] = error_signal(1.0, 1.0, trace.policy[0], 4)
    grads = backward(random_params, trace, seeds)
    with pytest.raises(InputError):
        check_asymmetry(trace, grads, constants, 0, 4, 0.0)


def test_activation_profile_sits_inside_measured_bounds(small_batch):
    params, batch, traces = small_batch
    sites = batch_sites(batch)
    profile = activation_profile(params, traces, sites)
    constants = measure_beta_max(params, traces)
    assert profile.input_energy.size == len(sites)
    # unit final scales give ||h||^2 / d = ms / (ms + eps)
    np.testing.assert_array_less(profile.output_energy, 1.0)
    assert np.all(profile.output_energy >= constants.alpha_min)
    assert np.all(profile.input_energy <= constants.beta_max * (1 + 1e-9))
    summary = profile.summary()
    assert summary["ratio"]["median"] <= summary["ratio"]["p95"] <= summary["ratio"]["max"]
    assert summary["ratio"]["max"] <= constants.beta_max / constants.alpha_min * (1 + 1e-9)


def test_activation_profile_needs_tokens(random_params):
    with pytest.raises(InputError):
        activation_profile(random_params, [forward(random_params, [1, 4])], sites=[])
