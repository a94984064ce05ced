import math

import numpy as np
import pytest

from maspolab.gating import ConfigError, GateMethod, GateParams
from maspolab.oracle import finite_diff_grad
from maspolab.policy import PolicyParams, log_prob, row_entropy
from maspolab.tasks import TaskSpec, make_task
from maspolab.trainer import (
    ContractError,
    TrainConfig,
    TrainerState,
    adam_update,
    build_batch,
    collect_groups,
    minibatch_gradient,
    run_training,
    train_step,
)
from maspolab.checks import frozen_surrogate


def state_for(task, config, logits=None):
    state = TrainerState.initial(task, config)
    if logits is not None:
        state.policy.logits[...] = logits
    return state


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"group_size": 1}, {"minibatches_per_step": 0}, {"learning_rate": 0.0}, {"method": "ppo"},
         {"adv_reweight_alpha": 2.0}, {"entropy_coeff": -1.0}, {"groups_per_step": 1.5}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.minibatches_per_step, c.adam_beta1, c.adam_beta2, c.adam_eps) == (16, 0.9, 0.95, 1e-8)
        assert c.entropy_coeff == 0 and c.adv_reweight_alpha == 0


class TestCollect:
    def test_all_correct_group_is_degenerate(self):
        task = TaskSpec("copy", 4, 3, 1, [[1, 2, 3]])
        config = TrainConfig(groups_per_step=1)
        state = state_for(task, config)
        for t, tok in enumerate([1, 2, 3]):
            state.policy.logits[0, t, :, tok] = 60.0
        batch = collect_groups(state, task, config)
        assert batch.group_degenerate.tolist() == [True]
        assert np.all(batch.advantages == 0)

    def test_balanced_group_broadcast(self):
        task = TaskSpec("copy", 4, 2, 1, [[0, 0]])
        config = TrainConfig(groups_per_step=1, group_size=8)
        state = state_for(task, config)
        group = [[0, 0]] * 4 + [[1, 0], [0, 1], [2, 2], [3, 1]]
        batch = build_batch(state, task, [0], [np.array(group)])
        assert batch.advantages.tolist() == [1.0] * 4 + [-1.0] * 4
        tb = batch.tokens_flat()
        assert tb.advantage.tolist() == [1.0] * 8 + [-1.0] * 8

    def test_round_robin_queries(self):
        task = make_task("modsum", 3, 2, 5)
        config = TrainConfig(groups_per_step=3, group_size=2)
        state = state_for(task, config)
        assert collect_groups(state, task, config).group_queries.tolist() == [0, 1, 2]
        state.step_count = 1
        assert collect_groups(state, task, config).group_queries.tolist() == [3, 4, 0]

    def test_deterministic(self):
        task = make_task("copy", 4, 3, 4)
        config = TrainConfig(seed=7)
        a = collect_groups(state_for(task, config), task, config)
        b = collect_groups(state_for(task, config), task, config)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.logp_old, b.logp_old)


class TestAdam:
    def test_zero(self):
        m, v = np.zeros(3), np.zeros(3)
        assert np.all(adam_update(m, v, np.zeros(3), 1, lr=0.1) == 0)

    def test_first_step_is_sign(self):
        m, v = np.zeros(3), np.zeros(3)
        g = np.array([2.0, -0.5, 1e-3])
        delta = adam_update(m, v, g, 1, lr=0.1)
        # m_hat = g, v_hat = g**2 exactly at step 1
        np.testing.assert_allclose(delta, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)

    def test_constant_stream_fixed_point(self):
        m, v = np.zeros(1), np.zeros(1)
        g = np.array([0.3])
        for t in range(1, 500):
            delta = adam_update(m, v, g, t, lr=0.01, beta1=0.9, beta2=0.95, eps=1e-8)
        assert abs(delta[0]) == pytest.approx(0.01 * 0.3 / (0.3 + 1e-8), rel=1e-10)


class TestTrainStep:
    def test_zero_advantages_leave_policy_unchanged(self):
        task = make_task("modsum", 4, 2, 2)
        config = TrainConfig(groups_per_step=2)
        state = state_for(task, config, logits=np.random.default_rng(0).normal(size=(2, 2, 5, 4)))
        batch = collect_groups(state, task, config)
        batch.advantages[:] = 0.0
        before = state.policy.logits.copy()
        train_step(state, batch, config)
        assert np.array_equal(before, state.policy.logits)

    def test_first_minibatch_on_policy(self):
        task = make_task("copy", 4, 3, 4)
        config = TrainConfig()
        state = state_for(task, config, logits=np.random.default_rng(1).normal(size=(4, 3, 5, 4)))
        batch = collect_groups(state, task, config)
        mb = minibatch_gradient(state.policy.logits, batch.tokens_flat(), config)
        assert np.max(np.abs(mb.ratio - 1)) <= 1e-12

    def test_positive_rollout_gains_probability(self):
        task = TaskSpec("copy", 4, 3, 1, [[1, 2, 3]])
        config = TrainConfig(groups_per_step=1, group_size=2, minibatches_per_step=1, learning_rate=0.05)
        state = state_for(task, config)
        win, lose = [1, 2, 3], [0, 0, 0]
        batch = build_batch(state, task, [0], [np.array([win, lose])])
        assert batch.rewards.tolist() == [1, -1]
        before = log_prob(state.policy, 0, win)[0]
        train_step(state, batch, config)
        assert log_prob(state.policy, 0, win)[0] > before

    def test_stale_batch_rejected(self):
        task = make_task("copy", 4, 3, 4)
        config = TrainConfig()
        state = state_for(task, config)
        batch = collect_groups(state, task, config)
        train_step(state, batch, config)
        with pytest.raises(ContractError):
            train_step(state, batch, config)

    def test_sampling_policy_frozen_across_minibatches(self):
        task = make_task("copy", 4, 3, 4)
        config = TrainConfig(learning_rate=0.1)
        state = state_for(task, config)
        batch = collect_groups(state, task, config)
        snapshot = batch.logp_old.copy()
        _, rec = train_step(state, batch, config)
        assert np.array_equal(snapshot, batch.logp_old)
        assert rec.max_abs_log_ratio > 0  # later mini-batches saw an updated policy

    def test_entropy_ascent(self):
        task = make_task("modsum", 4, 3, 2)
        config = TrainConfig(groups_per_step=2, entropy_coeff=0.1, learning_rate=0.01)
        state = state_for(task, config, logits=np.random.default_rng(3).normal(0, 2, (2, 3, 5, 4)))
        batch = collect_groups(state, task, config)
        batch.advantages[:] = 0.0
        tb = batch.tokens_flat()
        rows = lambda: state.policy.logits[tb.query, tb.pos, tb.prev]  # noqa: E731
        before = row_entropy(rows()).mean()
        train_step(state, batch, config)
        assert row_entropy(rows()).mean() > before

    def test_grpo_clipped_tokens_contribute_nothing(self):
        task = TaskSpec("copy", 3, 1, 1, [[0]])
        config = TrainConfig(method="grpo", groups_per_step=1, group_size=2)
        state = state_for(task, config)
        batch = build_batch(state, task, [0], [np.array([[0], [1]])])
        tb = batch.tokens_flat()
        logits = state.policy.logits.copy()
        logits[0, 0, 3, 0] += 2.0  # winner's ratio far above 1 + eps
        mb = minibatch_gradient(logits, tb.subset(np.array([0])), config)
        assert mb.clipped.tolist() == [True]
        assert np.all(mb.grad == 0)


@pytest.mark.parametrize("method", list(GateMethod))
def test_minibatch_gradient_matches_finite_differences(method):
    task = make_task("modsum", 3, 2, 2, seed=1)
    config = TrainConfig(method=method, gate=GateParams(sigma_base=0.3, eps_high=0.265), groups_per_step=2,
                         group_size=4, learning_rate=0.2, entropy_coeff=0.02, adv_reweight_alpha=0.1, seed=5)
    state = state_for(task, config, logits=np.random.default_rng(2).normal(size=(2, 2, 4, 3)))
    batch = collect_groups(state, task, config)
    logits = state.policy.logits + np.random.default_rng(4).normal(0, 0.5, state.policy.logits.shape)
    tb = batch.tokens_flat()
    mb = minibatch_gradient(logits, tb, config)
    f = frozen_surrogate(tb, mb.weight, mb.adv_scale, config.entropy_coeff)
    for h in (1e-5, 1e-6):
        fd = finite_diff_grad(f, PolicyParams(logits), h)
        assert np.linalg.norm(mb.grad - fd) / np.linalg.norm(mb.grad) < 1e-6


def test_training_stream_deterministic():
    task = make_task("modsum", 4, 3, 4)
    config = TrainConfig(total_steps=15, seed=3)
    a = [r for _, r in run_training(task, config)]
    b = [r for _, r in run_training(task, config)]
    assert a == b


def test_metrics_reward_consistency():
    task = make_task("copy", 4, 3, 4)
    for _, rec in run_training(task, TrainConfig(total_steps=20), oracle_every=5):
        assert abs(rec.mean_reward - (2 * rec.success_rate - 1)) <= 1e-9
        assert 0 <= rec.degenerate_group_fraction <= 1
        assert 0 < rec.mean_gate <= 1
        assert (rec.exact_expected_reward is None) == (rec.step % 5 != 0)
        assert not math.isnan(rec.grad_norm)
