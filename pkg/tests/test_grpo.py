import math
from types import SimpleNamespace

import numpy as np
import pytest

from grlvr.env import TaskInstance, Trajectory
from grlvr.errors import InputError, NumericError
from grlvr.grpo import (
    RolloutBatch,
    TokenRecord,
    batch_gradients,
    error_signal,
    group_advantages,
    grpo_loss,
    importance_ratio,
    lm_head_batch_gradient,
    lm_head_gradient_from_records,
    logit_gradients,
    surrogate_value,
    token_records,
)
from grlvr.model import LM_HEAD, log_softmax


def test_group_advantages_single_winner():
    advantages = group_advantages([1, 0, 0, 0])
    np.testing.assert_allclose(advantages, [1.732046, -0.577349, -0.577349, -0.577349], atol=1e-6)


def test_group_advantages_balanced_group():
    np.testing.assert_allclose(group_advantages([1, 1, 0, 0]), [1, 1, -1, -1], atol=2e-6)


def test_group_advantages_zero_variance_is_exactly_zero():
    assert group_advantages([1, 1, 1]) == [0.0, 0.0, 0.0]
    assert group_advantages([0, 0]) == [0.0, 0.0]


def test_group_advantages_needs_two_rewards():
    with pytest.raises(InputError):
        group_advantages([1])


def test_importance_ratio_values():
    assert importance_ratio(-0.3, -0.3) == 1.0
    assert importance_ratio(math.log(2.0), 0.0) == pytest.approx(2.0, rel=1e-15)
    assert importance_ratio(-math.log(10.0), 0.0) == pytest.approx(0.1, rel=1e-15)
    with pytest.raises(NumericError):
        importance_ratio(float("nan"), 0.0)


def _record(ratio, advantage, eps_clip=0.2):
    clipped_ratio = min(max(ratio, 1 - eps_clip), 1 + eps_clip)
    return TokenRecord(token_id=0, logprob_old=0.0, logprob_new=math.log(ratio), ratio=ratio,
                       advantage=advantage, clipped=clipped_ratio * advantage < ratio * advantage)


def test_surrogate_negative_advantage_inflated_ratio_stays_unclipped():
    record = _record(2.0, -1.0)
    assert not record.clipped
    assert surrogate_value([[record]], 0.2) == pytest.approx(-2.0)


def test_surrogate_positive_advantage_inflated_ratio_is_clipped():
    record = _record(2.0, 1.0)
    assert record.clipped
    assert surrogate_value([[record]], 0.2) == pytest.approx(1.2)


def test_surrogate_rejects_empty_active_set():
    with pytest.raises(InputError, match="empty active set"):
        surrogate_value([[]], 0.2)


def test_error_signal_values():
    np.testing.assert_allclose(error_signal(2.0, 1.5, [0.5, 0.3, 0.2], 0), [1.5, -0.9, -0.6], atol=1e-15)
    assert not np.any(error_signal(3.0, 0.0, [0.5, 0.5], 1))
    assert not np.any(error_signal(3.0, 2.0, [0.0, 1.0, 0.0], 1))


def test_ratio_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=6)
    action, advantage, logprob_old = 2, -0.7, -1.9

    def objective(z):
        return math.exp(log_softmax(z)[action] - logprob_old) * advantage

    ratio = math.exp(log_softmax(logits)[action] - logprob_old)
    analytic = error_signal(ratio, advantage, np.exp(log_softmax(logits)), action)
    step = 1e-6
    numeric = np.array([(objective(logits + step * e) - objective(logits - step * e)) / (2 * step)
                        for e in np.eye(6)])
    np.testing.assert_allclose(analytic, numeric, atol=1e-5)


def test_first_reuse_step_is_on_policy(small_batch):
    params, batch, traces = small_batch
    loss, clipped = grpo_loss(batch, traces, 0.2)
    records = token_records(batch, traces, 0.2)
    ratios = [r.ratio for rows in records for r in rows]
    np.testing.assert_allclose(ratios, 1.0, rtol=0, atol=1e-12)
    assert not any(flag for rows in clipped for flag in rows)
    per_token = [a for t, a in zip(batch.trajectories(), batch.trajectory_advantages()) for _ in t.response]
    assert loss == pytest.approx(np.mean(per_token), abs=1e-12)


def test_lm_head_batch_gradient_matches_backward(small_batch):
    params, batch, traces = small_batch
    rng = np.random.default_rng(4)
    batch = RolloutBatch(batch.groups, batch.group_size,
                         advantages=[list(rng.normal(size=len(g))) for g in batch.groups])
    records = token_records(batch, traces, 0.2)
    grads = batch_gradients(params, traces, logit_gradients(traces, records))
    expected = grads.weights[LM_HEAD]
    actual = lm_head_batch_gradient(batch, traces, 0.2)
    assert np.linalg.norm(actual - expected) <= 1e-10 * max(np.linalg.norm(expected), 1e-300)


def test_lm_head_batch_gradient_zero_advantages(small_batch):
    params, batch, traces = small_batch
    flat = RolloutBatch(batch.groups, batch.group_size,
                        advantages=[[0.0] * len(g) for g in batch.groups])
    assert not np.any(lm_head_batch_gradient(flat, traces, 0.2))


def test_lm_head_gradient_sum_of_outer_products():
    policy = np.array([[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1]])
    h = np.array([[1.0, -2.0], [0.5, 0.5], [3.0, 1.0]])
    trace = SimpleNamespace(logits=np.zeros((3, 4)), policy=policy, lm_head_input=h)
    rows = [TokenRecord(token_id=a, logprob_old=0.0, logprob_new=0.0, ratio=r, advantage=adv, position=p)
            for p, (a, r, adv) in enumerate([(3, 1.0, 0.5), (0, 1.5, -1.0), (1, 0.8, 2.0)])]
    expected = sum(np.outer(r.ratio * r.advantage * (np.eye(4)[r.token_id] - policy[p]), h[p])
                   for p, r in enumerate(rows)) / 3
    np.testing.assert_allclose(lm_head_gradient_from_records([trace], [rows]), expected, rtol=0, atol=1e-12)


def test_clipped_tokens_count_in_T_but_add_nothing():
    policy = np.array([[0.5, 0.5], [0.5, 0.5]])
    h = np.array([[1.0, 0.0], [0.0, 1.0]])
    trace = SimpleNamespace(logits=np.zeros((2, 2)), policy=policy, lm_head_input=h)
    kept = TokenRecord(0, 0.0, 0.0, 1.0, 1.0, position=0)
    dropped = TokenRecord(1, 0.0, 0.0, 2.0, 1.0, clipped=True, position=1)
    gradient = lm_head_gradient_from_records([trace], [[kept, dropped]])
    np.testing.assert_allclose(gradient, np.outer([0.5, -0.5], [1.0, 0.0]) / 2, atol=1e-15)


def test_kl_penalty_logit_gradient():
    policy = np.array([[0.2, 0.8]])
    trace = SimpleNamespace(logits=np.zeros((1, 2)), policy=policy, lm_head_input=np.ones((1, 2)))
    record = TokenRecord(0, 0.0, 0.0, 2.0, 1.0, clipped=True, position=0)
    (dz,) = logit_gradients([trace], [[record]], kl_coef=0.1)
    np.testing.assert_allclose(dz[0], -0.1 * np.array([0.8, -0.8]), atol=1e-15)


def test_rollout_batch_validates_groups():
    a = TaskInstance((1, 2, 10), (3,))
    b = TaskInstance((2, 2, 10), (0,))
    with pytest.raises(InputError):
        RolloutBatch([[Trajectory(a, [3], [0.0], 1), Trajectory(b, [3], [0.0], 0)]], 2)
    with pytest.raises(InputError):
        RolloutBatch([[Trajectory(a, [3], [0.0], 1)]], 2)
    with pytest.raises(InputError):
        RolloutBatch([[Trajectory(a, [3], [0.0], 2), Trajectory(a, [3], [0.0], 0)]], 2)
