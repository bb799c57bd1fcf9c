import dataclasses

import numpy as np
import pytest

from conftest import make_scenario
from evbalance.config import RunConfig, metrics_csv
from evbalance.errors import ValidationError
from evbalance.projection import project_box
from evbalance.trainer import (Batch, ReplayBuffer, Transition, init_trainer,
                               policy_regression_gradient, regression_targets,
                               select_actions, train, update_critic,
                               update_policies)


def tiny_config(**overrides):
    base = dict(scenario="", episodes=1, steps_per_episode=2, batch_size=600,
                seed=0, explore_sigma=0.1)
    base.update(overrides)
    return RunConfig(**base)


def tiny_scenario(**kw):
    defaults = dict(width=2, height=2, vehicles=8, rate=0.8, horizon=24,
                    spots=np.array([1, 0, 0, 1]))
    defaults.update(kw)
    return make_scenario(**defaults)


def random_feasible_states(ts, b, rng):
    n = ts.n_regions
    sp = np.broadcast_to(ts.grid.spots.astype(float), (b, n))
    st = np.floor(rng.uniform(0, 1, (b, n)) * (sp + 1)).clip(0, sp)
    states = np.zeros((b, n, 6))
    states[..., 0] = rng.integers(0, 6, (b, n))
    states[..., 1] = rng.integers(0, 3, (b, n))
    states[..., 2] = rng.integers(0, 5, (b, n))
    states[..., 3] = st
    states[..., 4] = sp - st
    states[..., 5] = sp
    return states


def synthetic_batch(ts, b, rng):
    n = ts.n_regions
    states = random_feasible_states(ts, b, rng)
    next_states = random_feasible_states(ts, b, rng)
    t = rng.integers(0, ts.scenario.demand.horizon - 1, b)
    act_a = project_box(rng.uniform(-0.5, 0.5, (b, n, 3)), ts.box)
    act_r = ts.action_space.project(rng.normal(size=(b, n, ts.action_space.action_dim)))
    obs_a = ts.obs_spec.adversary_obs(states, t)
    obs_r = ts.obs_spec.region_obs(states, t, act_a)
    return Batch(states=states, t=t, obs_adversary=obs_a, obs_region=obs_r,
                 action_adversary=act_a, action_region=act_r,
                 reward=-rng.uniform(0, 3, b), next_states=next_states,
                 next_t=t + 1)


class TestReplayBuffer:
    def test_fifo_overwrite_and_sampling(self):
        buf = ReplayBuffer(capacity=3, n_regions=2, obs_dim=4, region_act_dim=6)
        for k in range(5):
            buf.add(Transition(
                states=np.full((2, 6), k), t=k, obs_adversary=np.zeros((2, 4)),
                obs_region=np.zeros((2, 4)), action_adversary=np.zeros((2, 3)),
                action_region=np.zeros((2, 6)), reward=float(k),
                next_states=np.zeros((2, 6)), next_t=k + 1))
        assert buf.size == 3
        assert sorted(buf.reward.tolist()) == [2.0, 3.0, 4.0]
        batch = buf.sample(8, np.random.default_rng(0))
        assert len(batch) == 8
        assert set(batch.reward.tolist()) <= {2.0, 3.0, 4.0}


class TestSelectActions:
    def test_baseline_region_obs_equal_true_obs(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(baseline=True), sc)
        rng = np.random.default_rng(0)
        states = random_feasible_states(ts, 1, rng)[0]
        act_a, act_r, obs_a, obs_r = select_actions(ts, states, 0, False, rng, rng)
        assert not act_a.any()
        assert np.allclose(obs_a, obs_r)

    def test_zero_weight_policy_gives_uniform_dispatch(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(), sc)
        ts.policy_region.theta[:] = 0.0
        ts.take_snapshots()
        rng = np.random.default_rng(0)
        states = random_feasible_states(ts, 1, rng)[0]
        _, act_r, _, _ = select_actions(ts, states, 0, False, rng, rng)
        for i, action in enumerate(ts.action_space.to_region_actions(act_r)):
            k = len(ts.grid.neighbors[i]) + 1
            assert np.allclose(action.p, 1.0 / k)
            assert np.allclose(action.q, 1.0 / k)

    def test_deterministic_without_exploration(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(), sc)
        rng = np.random.default_rng(0)
        states = random_feasible_states(ts, 1, rng)[0]
        a1 = select_actions(ts, states, 3, False, rng, rng)
        a2 = select_actions(ts, states, 3, False, rng, rng)
        assert np.array_equal(a1[0], a2[0])
        assert np.array_equal(a1[1], a2[1])

    def test_exploration_noise_stays_feasible(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(explore_sigma=0.8), sc)
        rng = np.random.default_rng(7)
        states = random_feasible_states(ts, 1, rng)[0]
        for _ in range(10):
            act_a, act_r, _, _ = select_actions(ts, states, 0, True, rng, rng)
            assert ts.action_space.feasible(act_r)
            assert np.all(act_a >= ts.box.lower - 1e-12)
            assert np.all(act_a <= ts.box.upper + 1e-12)

    def test_actions_read_snapshots_not_live_weights(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(), sc)
        rng = np.random.default_rng(0)
        states = random_feasible_states(ts, 1, rng)[0]
        before = select_actions(ts, states, 0, False, rng, rng)
        ts.policy_region.theta += 0.5   # live weights drift mid-episode
        ts.policy_adversary.theta += 0.5
        after = select_actions(ts, states, 0, False, rng, rng)
        assert np.array_equal(before[0], after[0])
        assert np.array_equal(before[1], after[1])


class TestRegressionTargets:
    def test_delta_zero_collapses_to_projected_snapshot(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(delta=1e-12), sc)
        # exact collapse at delta=0 is blocked by the (0,1] contract, so
        # verify the limit algebraically with delta forced to 0 in-place
        ts.config.delta = 0.0
        rng = np.random.default_rng(1)
        batch = synthetic_batch(ts, 5, rng)
        tgt_r, tgt_a = regression_targets(ts, batch)
        b, n = 5, ts.n_regions
        prj = ts.action_space.project(
            ts.snapshot_region.forward(
                batch.obs_region.reshape(b * n, -1)).reshape(b, n, -1))
        assert np.allclose(tgt_r, prj)

    def test_delta_one_returns_domain_vertices(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(delta=1.0), sc)
        rng = np.random.default_rng(2)
        batch = synthetic_batch(ts, 4, rng)
        tgt_r, tgt_a = regression_targets(ts, batch)
        m = ts.action_space.m
        blocks = tgt_r.reshape(4, ts.n_regions, 2, m)
        assert np.allclose(np.sort(blocks, axis=-1)[..., :-1], 0.0)
        assert np.allclose(blocks.max(axis=-1), 1.0)
        at_bounds = np.isclose(tgt_a, ts.box.lower) | np.isclose(tgt_a, ts.box.upper)
        assert at_bounds.all()

    def test_blend_arithmetic(self):
        # hat a = (1-delta) * proj + delta * vertex, checked coordinatewise
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(delta=0.5), sc)
        rng = np.random.default_rng(3)
        batch = synthetic_batch(ts, 3, rng)
        half = regression_targets(ts, batch)
        ts.config.delta = 0.0
        low = regression_targets(ts, batch)
        ts.config.delta = 1.0
        high = regression_targets(ts, batch)
        assert np.allclose(half[0], 0.5 * low[0] + 0.5 * high[0])
        assert np.allclose(half[1], 0.5 * low[1] + 0.5 * high[1])

    def test_targets_always_feasible(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(delta=0.3), sc)
        rng = np.random.default_rng(4)
        batch = synthetic_batch(ts, 6, rng)
        tgt_r, tgt_a = regression_targets(ts, batch)
        assert ts.action_space.feasible(tgt_r)
        assert np.all(tgt_a >= ts.box.lower - 1e-12)
        assert np.all(tgt_a <= ts.box.upper + 1e-12)


class TestPolicyUpdates:
    def test_zero_gradient_when_policy_matches_target(self):
        # 2x2 grid: every slot valid, so softmax output is already feasible;
        # with delta -> 0 and live == snapshot the regression loss is minimal
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(), sc)
        ts.config.delta = 0.0
        rng = np.random.default_rng(5)
        batch = synthetic_batch(ts, 4, rng)
        grad_r, loss_r = policy_regression_gradient(ts, batch, "region")
        grad_a, loss_a = policy_regression_gradient(ts, batch, "adversary")
        assert loss_r < 1e-22 and loss_a < 1e-22
        assert np.max(np.abs(grad_r)) < 1e-12
        assert np.max(np.abs(grad_a)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(delta=0.4), sc)
        rng = np.random.default_rng(6)
        batch = synthetic_batch(ts, 3, rng)
        tgt_r, _ = regression_targets(ts, batch)
        grad, _ = policy_regression_gradient(ts, batch, "region")
        b, n = 3, ts.n_regions
        obs = batch.obs_region.reshape(b * n, -1)

        def loss_at(theta):
            probe = dataclasses.replace(ts.policy_region, theta=theta)
            diff = probe.forward(obs) - tgt_r.reshape(b * n, -1)
            return float(np.sum(diff * diff) / (b * n))

        h = 1e-6
        check = rng.choice(ts.policy_region.theta.size, size=25, replace=False)
        for k in check:
            theta_p = ts.policy_region.theta.copy()
            theta_m = ts.policy_region.theta.copy()
            theta_p[k] += h
            theta_m[k] -= h
            fd = (loss_at(theta_p) - loss_at(theta_m)) / (2 * h)
            if abs(fd) > 1e-9:
                assert abs(grad[k] - fd) / abs(fd) < 1e-4

    def test_proposition1_direction_matches_policy_gradient(self):
        # unconstrained regression step == deterministic policy gradient
        sc = tiny_scenario()
        for which, phi in (("region", 1.0), ("adversary", -1.0)):
            cosines = []
            for trial in range(5):
                ts = init_trainer(tiny_config(seed=trial), sc)
                rng = np.random.default_rng(100 + trial)
                batch = synthetic_batch(ts, 4, rng)
                reg_grad, _ = policy_regression_gradient(
                    ts, batch, which, unconstrained=True, eta=0.01)
                direction = -reg_grad

                # independent per-sample oracle for phi * sum grad_a q grad_th mu
                net = ts.policy_region if which == "region" else ts.policy_adversary
                obs = batch.obs_region if which == "region" else batch.obs_adversary
                off_a, off_r = ts.state_offsets()
                n = ts.n_regions
                direct = np.zeros_like(net.theta)
                for bi in range(len(batch)):
                    a_r = ts.snapshot_region.forward(batch.obs_region[bi])
                    a_a = ts.snapshot_adversary.forward(batch.obs_adversary[bi])
                    feat = ts.obs_spec.state_features(batch.states[bi][None],
                                                      batch.t[bi][None])[0]
                    x = np.concatenate([feat, a_a.ravel(), a_r.ravel()])
                    _, dx = ts.snapshot_critic.backward(x, np.ones(1))
                    if which == "region":
                        g = dx[off_r:].reshape(n, -1)
                    else:
                        g = dx[off_a:off_r].reshape(n, 3)
                    for i in range(n):
                        dtheta, _ = net.backward(obs[bi, i], phi * g[i])
                        direct += dtheta
                cos = direction @ direct / (
                    np.linalg.norm(direction) * np.linalg.norm(direct))
                cosines.append(cos)
            assert min(cosines) >= 0.999

    def test_baseline_skips_adversary_update(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(baseline=True), sc)
        rng = np.random.default_rng(8)
        batch = synthetic_batch(ts, 4, rng)
        batch.action_adversary[:] = 0.0
        before = ts.policy_adversary.theta.copy()
        update_policies(ts, batch)
        assert np.array_equal(ts.policy_adversary.theta, before)
        assert not np.array_equal(
            ts.policy_region.theta,
            ts.snapshot_region.theta)


class TestCriticUpdate:
    def test_td_target_arithmetic(self):
        # q' == 2 everywhere, r == 1, gamma = 0.99 -> y = 2.98;
        # live q == 0 so the loss is 2.98^2
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(gamma=0.99), sc)
        ts.critic.theta[:] = 0.0
        ts.target_critic.theta[:] = 0.0
        ts.target_critic.theta[-1] = 2.0   # output bias
        rng = np.random.default_rng(9)
        batch = synthetic_batch(ts, 5, rng)
        batch.reward[:] = 1.0
        loss = update_critic(ts, batch)
        assert loss == pytest.approx(2.98 ** 2, rel=1e-12)

    def test_gamma_zero_target_is_reward(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(gamma=1e-9), sc)
        ts.config.gamma = 0.0
        ts.critic.theta[:] = 0.0
        ts.target_critic.theta[:] = 0.0
        rng = np.random.default_rng(10)
        batch = synthetic_batch(ts, 4, rng)
        batch.reward[:] = -1.5
        loss = update_critic(ts, batch)
        assert loss == pytest.approx(1.5 ** 2, rel=1e-12)

    def test_zero_gradient_at_perfect_fit(self):
        sc = tiny_scenario()
        ts = init_trainer(tiny_config(), sc)
        ts.config.gamma = 0.5
        ts.critic.theta[:] = 0.0
        ts.target_critic.theta[:] = 0.0
        rng = np.random.default_rng(11)
        batch = synthetic_batch(ts, 4, rng)
        batch.reward[:] = 0.0
        before = ts.critic.theta.copy()
        loss = update_critic(ts, batch)
        assert loss == 0.0
        assert np.array_equal(ts.critic.theta, before)


class TestTrainLoop:
    def test_bookkeeping_tiny_run(self, tmp_path):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=1, steps_per_episode=2)
        ts = train(cfg, sc)
        assert ts.buffer.size == 2
        assert ts.target_updates == 2
        assert ts.grad_updates == 0   # warmup: batch 600 never filled

    def test_no_parameter_change_during_warmup(self):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=2, steps_per_episode=3)
        ts = train(cfg, sc)
        fresh = init_trainer(cfg, sc)
        assert np.array_equal(ts.policy_region.theta, fresh.policy_region.theta)
        assert np.array_equal(ts.critic.theta, fresh.critic.theta)

    def test_updates_start_once_buffer_holds_batch(self):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=2, steps_per_episode=4, batch_size=6)
        ts = train(cfg, sc)
        assert ts.grad_updates == 3   # steps 6, 7, 8 of 8
        fresh = init_trainer(cfg, sc)
        assert not np.array_equal(ts.policy_region.theta, fresh.policy_region.theta)

    def test_deterministic_metrics(self):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=3, steps_per_episode=6, batch_size=8, seed=5)
        a = train(cfg, sc)
        b = train(cfg, sc)
        assert metrics_csv(a.metrics) == metrics_csv(b.metrics)

    def test_zero_sum_returns(self):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=4, steps_per_episode=5, batch_size=8)
        ts = train(cfg, sc)
        for m in ts.metrics:
            assert m.adversary_return == -m.region_return

    def test_baseline_equals_robust_with_zero_box(self):
        sc = tiny_scenario()
        shared = dict(episodes=3, steps_per_episode=5, batch_size=8, seed=9)
        base = train(tiny_config(baseline=True, **shared), sc)
        zeroed = train(tiny_config(
            baseline=False,
            adversary_bounds=((0.0, 0.0), (0.0, 0.0), (0.0, 0.0)), **shared), sc)
        assert metrics_csv(base.metrics) == metrics_csv(zeroed.metrics)
        assert np.array_equal(base.policy_region.theta, zeroed.policy_region.theta)

    def test_executed_actions_always_feasible(self):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=2, steps_per_episode=6, batch_size=8,
                          explore_sigma=0.5)
        ts = train(cfg, sc)
        stored = ts.buffer.action_region[:ts.buffer.size]
        assert ts.action_space.feasible(stored, tol=1e-6)
        adv = ts.buffer.action_adversary[:ts.buffer.size]
        assert np.all(adv >= ts.box.lower - 1e-6)
        assert np.all(adv <= ts.box.upper + 1e-6)

    def test_config_validation(self):
        sc = tiny_scenario()
        with pytest.raises(ValidationError):
            train(tiny_config(gamma=1.5), sc)
        with pytest.raises(ValidationError):
            train(tiny_config(steps_per_episode=0), sc)
        with pytest.raises(ValidationError):
            train(tiny_config(steps_per_episode=500), sc)  # past horizon

    def test_checkpoints_written(self, tmp_path):
        sc = tiny_scenario()
        cfg = tiny_config(episodes=2, steps_per_episode=2, checkpoint_every=1)
        train(cfg, sc, out_dir=str(tmp_path))
        assert (tmp_path / "checkpoint_00001.npz").exists()
        assert (tmp_path / "checkpoint_final.npz").exists()
        assert (tmp_path / "metrics.csv").exists()
