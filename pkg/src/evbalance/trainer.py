"""Centralized-training decentralized-execution loop with policy regression.

One shared dispatch policy serves all region agents and one shared
perturbation policy serves all adversaries; a single centralized critic
scores the joint (state, adversary action, region action) tuple, and the
adversaries' value is its negation (the game is zero-sum).  Policies are
trained by regression toward feasibility-preserving targets: project the
snapshot policy's action onto its domain, then blend a step of size
``delta`` toward the constraint-set vertex that maximizes the critic's
action-gradient (sign-flipped for adversaries).  Regression targets and
action selection always read the episode-start snapshot parameters, never
the live ones; bootstrapped critic targets read the slowly-blended target
networks.

With ``baseline=True`` the adversary is pinned to zero everywhere (actions,
observations, updates), which reproduces the non-robust variant of the same
algorithm.  Training is deterministic given the config seed: environment,
exploration and replay sampling each draw from their own spawned stream.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .city import (RegionGrid, Scenario, build_grid, initial_fleet_state,
                   step_environment)
from .config import RunConfig, metrics_csv, scenario_fingerprint
from .errors import TrainingDiverged, ValidationError
from .game import (ObservationSpec, RegionActionSpace, adversary_box,
                   compute_fairness)
from .nets import AdamState, Mlp, adam_step, save_mlps, soft_update
from .projection import Box, project_box


@dataclass
class Transition:
    """One stored step: joint true states, observations, executed joint
    actions, shared reward, successor states."""

    states: np.ndarray
    t: int
    obs_adversary: np.ndarray
    obs_region: np.ndarray
    action_adversary: np.ndarray
    action_region: np.ndarray
    reward: float
    next_states: np.ndarray
    next_t: int


class ReplayBuffer:
    """Bounded FIFO transition store with uniform sampling.

    Alongside the raw transition fields it caches quantities the update
    paths would otherwise recompute every step from the same inputs: the
    critic's state-feature rows and the true next-state observations.  The
    caches are deterministic functions of the transition, computed through
    the owning trainer's observation spec when not supplied.
    """

    def __init__(self, capacity, n_regions, obs_dim, region_act_dim, obs_spec=None):
        self.capacity = int(capacity)
        self.obs_spec = obs_spec
        shape = lambda *tail: np.zeros((self.capacity, *tail))
        self.states = shape(n_regions, 6)
        self.t = np.zeros(self.capacity, dtype=int)
        self.obs_adversary = shape(n_regions, obs_dim)
        self.obs_region = shape(n_regions, obs_dim)
        self.action_adversary = shape(n_regions, 3)
        self.action_region = shape(n_regions, region_act_dim)
        self.reward = np.zeros(self.capacity)
        self.next_states = shape(n_regions, 6)
        self.next_t = np.zeros(self.capacity, dtype=int)
        self.state_feat = shape(6 * n_regions + 1)
        self.next_state_feat = shape(6 * n_regions + 1)
        self.next_obs_adversary = shape(n_regions, obs_dim)
        self.size = 0
        self._cursor = 0

    def add(self, tr: Transition, state_feat=None, next_state_feat=None,
            next_obs_adversary=None):
        k = self._cursor
        self.states[k] = tr.states
        self.t[k] = tr.t
        self.obs_adversary[k] = tr.obs_adversary
        self.obs_region[k] = tr.obs_region
        self.action_adversary[k] = tr.action_adversary
        self.action_region[k] = tr.action_region
        self.reward[k] = tr.reward
        self.next_states[k] = tr.next_states
        self.next_t[k] = tr.next_t
        spec = self.obs_spec
        self.state_feat[k] = (
            state_feat if state_feat is not None
            else spec.state_features(tr.states, tr.t))
        self.next_state_feat[k] = (
            next_state_feat if next_state_feat is not None
            else spec.state_features(tr.next_states, tr.next_t))
        self.next_obs_adversary[k] = (
            next_obs_adversary if next_obs_adversary is not None
            else spec.adversary_obs(tr.next_states, tr.next_t))
        self._cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size, rng):
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(
            states=self.states[idx], t=self.t[idx],
            obs_adversary=self.obs_adversary[idx],
            obs_region=self.obs_region[idx],
            action_adversary=self.action_adversary[idx],
            action_region=self.action_region[idx],
            reward=self.reward[idx],
            next_states=self.next_states[idx], next_t=self.next_t[idx],
            state_feat=self.state_feat[idx],
            next_state_feat=self.next_state_feat[idx],
            next_obs_adversary=self.next_obs_adversary[idx],
        )


@dataclass
class Batch:
    states: np.ndarray
    t: np.ndarray
    obs_adversary: np.ndarray
    obs_region: np.ndarray
    action_adversary: np.ndarray
    action_region: np.ndarray
    reward: np.ndarray
    next_states: np.ndarray
    next_t: np.ndarray
    state_feat: np.ndarray = None
    next_state_feat: np.ndarray = None
    next_obs_adversary: np.ndarray = None

    def __len__(self):
        return self.reward.shape[0]


@dataclass
class EpisodeMetrics:
    episode: int
    mean_reward: float
    mean_u_c: float
    mean_u_s: float
    critic_loss: float
    region_return: float
    adversary_return: float


@dataclass
class TrainerState:
    """Networks, targets, per-episode snapshots and loop bookkeeping."""

    config: RunConfig
    grid: RegionGrid
    scenario: Scenario
    obs_spec: ObservationSpec
    action_space: RegionActionSpace
    box: Box
    policy_region: Mlp
    policy_adversary: Mlp
    critic: Mlp
    target_region: Mlp
    target_adversary: Mlp
    target_critic: Mlp
    snapshot_region: Mlp = None
    snapshot_adversary: Mlp = None
    snapshot_critic: Mlp = None
    adam_region: AdamState = None
    adam_adversary: AdamState = None
    adam_critic: AdamState = None
    buffer: ReplayBuffer = None
    episode: int = 0
    grad_updates: int = 0
    target_updates: int = 0
    metrics: list = field(default_factory=list)

    @property
    def n_regions(self):
        return self.grid.n_regions

    def state_offsets(self):
        """Column layout of the critic input: state | a_a | a_r."""
        n = self.n_regions
        n_state = 6 * n + 1
        return n_state, n_state + 3 * n

    def take_snapshots(self):
        self.snapshot_region = self.policy_region.clone()
        self.snapshot_adversary = self.policy_adversary.clone()
        self.snapshot_critic = self.critic.clone()


def _validate_config(cfg: RunConfig, scenario: Scenario):
    if not 0.0 < cfg.gamma < 1.0:
        raise ValidationError("gamma must lie in (0, 1)")
    if not 0.0 < cfg.delta <= 1.0:
        raise ValidationError("delta must lie in (0, 1]")
    if not 0.0 < cfg.tau <= 1.0:
        raise ValidationError("tau must lie in (0, 1]")
    if cfg.steps_per_episode < 1:
        raise ValidationError("steps_per_episode must be >= 1")
    if cfg.steps_per_episode > scenario.demand.horizon:
        raise ValidationError(
            "steps_per_episode exceeds the scenario horizon"
        )
    if cfg.batch_size < 1 or cfg.replay_capacity < cfg.batch_size:
        raise ValidationError("replay capacity must hold at least one batch")
    if cfg.episodes < 1:
        raise ValidationError("episodes must be >= 1")


def init_trainer(cfg: RunConfig, scenario: Scenario) -> TrainerState:
    _validate_config(cfg, scenario)
    grid = build_grid(scenario)
    obs_spec = ObservationSpec.for_scenario(grid, scenario)
    space = RegionActionSpace(grid)
    box = adversary_box(cfg.adversary_bounds)
    n = grid.n_regions
    obs_dim = obs_spec.obs_dim
    act_dim = space.action_dim
    critic_in = (6 * n + 1) + 3 * n + act_dim * n

    seed_root = np.random.SeedSequence(cfg.seed)
    s_reg, s_adv, s_cri = seed_root.spawn(3)
    policy_region = Mlp.create(obs_dim, act_dim, "softmax", seed=s_reg,
                               blocks=(space.m, space.m))
    policy_adversary = Mlp.create(obs_dim, 3, "bounded", seed=s_adv,
                                  lower=box.lower, upper=box.upper)
    critic = Mlp.create(critic_in, 1, "linear", seed=s_cri)

    ts = TrainerState(
        config=cfg, grid=grid, scenario=scenario, obs_spec=obs_spec,
        action_space=space, box=box,
        policy_region=policy_region, policy_adversary=policy_adversary,
        critic=critic,
        target_region=policy_region.clone(),
        target_adversary=policy_adversary.clone(),
        target_critic=critic.clone(),
        adam_region=AdamState.create(policy_region.theta.size, cfg.learning_rate),
        adam_adversary=AdamState.create(policy_adversary.theta.size, cfg.learning_rate),
        adam_critic=AdamState.create(critic.theta.size, cfg.learning_rate),
        # a run can never store more than episodes * steps transitions, so
        # never preallocate beyond that
        buffer=ReplayBuffer(
            min(cfg.replay_capacity, cfg.episodes * cfg.steps_per_episode),
            n, obs_dim, act_dim, obs_spec=obs_spec),
    )
    ts.take_snapshots()
    return ts


def select_actions(ts: TrainerState, states, t, explore, rng_adversary,
                   rng_region, obs_adversary=None):
    """Joint actions from the episode-snapshot policies.

    Adversaries read true observations; region agents read observations
    whose own block the adversary actions have perturbed.  Exploration adds
    Gaussian noise before projecting back onto the constraint domains, so
    every action handed to the simulator is feasible.  Baseline mode pins
    adversary actions to zero.
    """
    cfg = ts.config
    n = ts.n_regions
    obs_a = (obs_adversary if obs_adversary is not None
             else ts.obs_spec.adversary_obs(states, t))
    if cfg.baseline:
        act_a = np.zeros((n, 3))
        obs_r = obs_a
    else:
        act_a = ts.snapshot_adversary.forward(obs_a)
        if explore:
            act_a = act_a + cfg.explore_sigma * rng_adversary.standard_normal(act_a.shape)
        act_a = project_box(act_a, ts.box)
        obs_r = ts.obs_spec.region_obs_from_true(obs_a, states, act_a,
                                                 cfg.es_uses_perturbed_st)
    act_r = ts.snapshot_region.forward(obs_r)
    if explore:
        act_r = act_r + cfg.explore_sigma * rng_region.standard_normal(act_r.shape)
    act_r = ts.action_space.project(act_r)
    return act_a, act_r, obs_a, obs_r


def _critic_input(ts, state_feat, act_a, act_r):
    b = state_feat.shape[0]
    return np.concatenate(
        [state_feat, act_a.reshape(b, -1), act_r.reshape(b, -1)], axis=-1
    )


def _state_feat(ts, batch):
    if batch.state_feat is not None:
        return batch.state_feat
    return ts.obs_spec.state_features(batch.states, batch.t)


def _next_state_feat(ts, batch):
    if batch.next_state_feat is not None:
        return batch.next_state_feat
    return ts.obs_spec.state_features(batch.next_states, batch.next_t)


def _next_obs_adversary(ts, batch):
    if batch.next_obs_adversary is not None:
        return batch.next_obs_adversary
    return ts.obs_spec.adversary_obs(batch.next_states, batch.next_t)


def regression_targets(ts: TrainerState, batch: Batch, unconstrained=False, eta=0.01):
    """Policy-regression targets for both populations.

    Feasible mode blends the projected snapshot action with the domain
    vertex maximizing the critic's action-gradient (negated for the
    adversary); the blend is a convex combination of feasible points and so
    is feasible itself.  Unconstrained mode drops every projection and steps
    straight along the action-gradient with step ``eta``, which is the form
    whose parameter gradient coincides with the deterministic policy
    gradient.
    """
    cfg = ts.config
    b, n = len(batch), ts.n_regions
    obs_dim = ts.obs_spec.obs_dim
    raw_r = ts.snapshot_region.forward(
        batch.obs_region.reshape(b * n, obs_dim)
    ).reshape(b, n, -1)
    if cfg.baseline:
        raw_a = np.zeros((b, n, 3))
    else:
        raw_a = ts.snapshot_adversary.forward(
            batch.obs_adversary.reshape(b * n, obs_dim)
        ).reshape(b, n, 3)
    if unconstrained:
        prj_r, prj_a = raw_r, raw_a
    else:
        prj_r = ts.action_space.project(raw_r)
        prj_a = raw_a if cfg.baseline else project_box(raw_a, ts.box)

    x = _critic_input(ts, _state_feat(ts, batch), prj_a, prj_r)
    _, dx = ts.snapshot_critic.backward(x, np.ones((b, 1)))
    off_a, off_r = ts.state_offsets()
    grad_a = dx[:, off_a:off_r].reshape(b, n, 3)
    grad_r = dx[:, off_r:].reshape(b, n, -1)

    if unconstrained:
        target_r = raw_r + eta * grad_r            # phi = +1
        target_a = raw_a + eta * (-grad_a)         # phi = -1
        return target_r, target_a

    vertex_r = ts.action_space.argmax_vertex(grad_r)
    target_r = (1.0 - cfg.delta) * prj_r + cfg.delta * vertex_r
    vertex_a = np.where(-grad_a > 0.0, ts.box.upper, ts.box.lower)
    target_a = (1.0 - cfg.delta) * prj_a + cfg.delta * vertex_a
    return target_r, target_a


def _apply_regression_step(ts, which, obs, target):
    """One Adam step pulling a live policy toward its regression targets."""
    net, opt = ((ts.policy_region, ts.adam_region) if which == "region"
                else (ts.policy_adversary, ts.adam_adversary))
    rows = target.shape[0] * target.shape[1]
    flat_obs = obs.reshape(rows, -1)
    out, cache = net.forward(flat_obs, want_cache=True)
    diff = out - target.reshape(rows, -1)
    loss = float(np.sum(diff * diff) / rows)
    if not math.isfinite(loss):
        raise TrainingDiverged(f"{which} policy loss became {loss}")
    grad, _ = net.backward(flat_obs, (2.0 / rows) * diff, cache=cache)
    net.theta, opt = adam_step(net.theta, grad, opt)
    if which == "region":
        ts.adam_region = opt
    else:
        ts.adam_adversary = opt
    return loss


def policy_regression_gradient(ts: TrainerState, batch: Batch, which,
                               unconstrained=False, eta=0.01):
    """Gradient of the regression loss wrt the live parameters of one policy.

    The loss is the squared distance between the live policy's outputs and
    the regression targets, averaged over the minibatch and the regions.
    """
    target_r, target_a = regression_targets(ts, batch, unconstrained, eta)
    b, n = len(batch), ts.n_regions
    obs_dim = ts.obs_spec.obs_dim
    if which == "region":
        net, obs, target = ts.policy_region, batch.obs_region, target_r
    elif which == "adversary":
        net, obs, target = ts.policy_adversary, batch.obs_adversary, target_a
    else:
        raise ValidationError(f"unknown policy {which!r}")
    flat_obs = obs.reshape(b * n, obs_dim)
    out = net.forward(flat_obs)
    diff = out - target.reshape(b * n, -1)
    loss = float(np.sum(diff * diff) / (b * n))
    grad, _ = net.backward(flat_obs, 2.0 * diff / (b * n))
    return grad, loss


def update_policies(ts: TrainerState, batch: Batch):
    """One regression Adam step on each policy (adversary skipped in
    baseline mode).  Targets read episode snapshots, never live weights."""
    target_r, target_a = regression_targets(ts, batch)
    _apply_regression_step(ts, "region", batch.obs_region, target_r)
    if not ts.config.baseline:
        _apply_regression_step(ts, "adversary", batch.obs_adversary, target_a)
    return ts


def update_critic(ts: TrainerState, batch: Batch):
    """One TD step: y = r + gamma * q'(s', target-policy actions at s').

    The target is a constant (no gradient flows through target networks);
    target actions are projected so the critic only ever sees feasible
    action inputs.
    """
    cfg = ts.config
    b, n = len(batch), ts.n_regions
    obs_dim = ts.obs_spec.obs_dim
    next_obs_a = _next_obs_adversary(ts, batch)
    if cfg.baseline:
        next_a = np.zeros((b, n, 3))
        next_obs_r = next_obs_a
    else:
        next_a = project_box(
            ts.target_adversary.forward(next_obs_a.reshape(b * n, obs_dim)),
            ts.box,
        ).reshape(b, n, 3)
        next_obs_r = ts.obs_spec.region_obs_from_true(
            next_obs_a, batch.next_states, next_a, cfg.es_uses_perturbed_st)
    next_r = ts.action_space.project(
        ts.target_region.forward(next_obs_r.reshape(b * n, obs_dim)).reshape(b, n, -1)
    )
    x_next = _critic_input(ts, _next_state_feat(ts, batch), next_a, next_r)
    y = batch.reward[:, None] + cfg.gamma * ts.target_critic.forward(x_next)

    x = _critic_input(ts, _state_feat(ts, batch),
                      batch.action_adversary, batch.action_region)
    q, cache = ts.critic.forward(x, want_cache=True)
    diff = q - y
    loss = float(np.mean(diff * diff))
    if not math.isfinite(loss):
        raise TrainingDiverged(f"critic loss became {loss}")
    grad, _ = ts.critic.backward(x, 2.0 * diff / b, cache=cache)
    ts.critic.theta, ts.adam_critic = adam_step(ts.critic.theta, grad, ts.adam_critic)
    return loss


def _soft_update_targets(ts: TrainerState):
    tau = ts.config.tau
    ts.target_region.theta = soft_update(ts.target_region.theta,
                                         ts.policy_region.theta, tau)
    ts.target_adversary.theta = soft_update(ts.target_adversary.theta,
                                            ts.policy_adversary.theta, tau)
    ts.target_critic.theta = soft_update(ts.target_critic.theta,
                                         ts.critic.theta, tau)
    ts.target_updates += 1


def save_checkpoint(ts: TrainerState, path):
    meta = {
        "episode": ts.episode,
        "scenario_fingerprint": scenario_fingerprint(ts.scenario),
        "obs_dim": ts.obs_spec.obs_dim,
        "grid": [ts.grid.width, ts.grid.height],
        "baseline": ts.config.baseline,
        "seed": ts.config.seed,
    }
    save_mlps(path, {
        "policy_region": ts.policy_region,
        "policy_adversary": ts.policy_adversary,
        "critic": ts.critic,
    }, meta)
    return path


def train(cfg: RunConfig, scenario: Scenario, out_dir=None, progress=None):
    """Run the full training loop; returns the final TrainerState.

    Per episode: refresh parameter snapshots, reset the simulator, then for
    each step select actions from the snapshots, execute the region joint
    action, store the transition, and (once the buffer holds a full batch)
    run one policy and one critic update; target networks blend every step.
    Writes metrics and periodic checkpoints under ``out_dir`` when given.
    """
    ts = init_trainer(cfg, scenario)
    root = np.random.SeedSequence(cfg.seed)
    root.spawn(3)  # skip the three net-init streams consumed by init_trainer
    env_seq, explore_adv_seq, explore_reg_seq, buffer_seq = root.spawn(4)
    rng_adv = np.random.default_rng(explore_adv_seq)
    rng_reg = np.random.default_rng(explore_reg_seq)
    rng_buffer = np.random.default_rng(buffer_seq)

    steps = cfg.steps_per_episode
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    for episode in range(1, cfg.episodes + 1):
        ts.episode = episode
        ts.take_snapshots()
        ep_seeds = env_seq.spawn(1)[0].spawn(steps + 1)
        state = initial_fleet_state(ts.grid, scenario, ep_seeds[0])
        states = state.local_state_matrix()
        obs_a = ts.obs_spec.adversary_obs(states, state.t)
        feat = ts.obs_spec.state_features(states, state.t)
        rewards = np.zeros(steps)
        ucs = np.zeros(steps)
        uss = np.zeros(steps)
        critic_losses = []
        for k in range(steps):
            act_a, act_r, obs_a, obs_r = select_actions(
                ts, states, state.t, True, rng_adv, rng_reg,
                obs_adversary=obs_a)
            region_actions = ts.action_space.to_region_actions(act_r)
            state2, _ = step_environment(state, region_actions, ts.grid,
                                         scenario, ep_seeds[k + 1])
            next_states = state2.local_state_matrix()
            next_obs_a = ts.obs_spec.adversary_obs(next_states, state2.t)
            next_feat = ts.obs_spec.state_features(next_states, state2.t)
            u_c, u_s = compute_fairness(next_states)
            reward = u_c + cfg.beta * u_s
            rewards[k], ucs[k], uss[k] = reward, u_c, u_s
            ts.buffer.add(
                Transition(states, state.t, obs_a, obs_r, act_a, act_r,
                           reward, next_states, state2.t),
                state_feat=feat, next_state_feat=next_feat,
                next_obs_adversary=next_obs_a)
            if ts.buffer.size >= cfg.batch_size:
                batch = ts.buffer.sample(cfg.batch_size, rng_buffer)
                update_policies(ts, batch)
                critic_losses.append(update_critic(ts, batch))
                ts.grad_updates += 1
            _soft_update_targets(ts)
            state, states, obs_a, feat = state2, next_states, next_obs_a, next_feat
        ts.metrics.append(EpisodeMetrics(
            episode=episode,
            mean_reward=float(rewards.mean()),
            mean_u_c=float(ucs.mean()),
            mean_u_s=float(uss.mean()),
            critic_loss=float(np.mean(critic_losses)) if critic_losses else float("nan"),
            region_return=float(rewards.sum()),
            adversary_return=float(-rewards.sum()),
        ))
        if progress is not None:
            progress(ts.metrics[-1])
        if out_dir and cfg.checkpoint_every and episode % cfg.checkpoint_every == 0:
            save_checkpoint(ts, os.path.join(out_dir, f"checkpoint_{episode:05d}.npz"))
    if out_dir:
        save_checkpoint(ts, os.path.join(out_dir, "checkpoint_final.npz"))
        with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8",
                  newline="") as handle:
            handle.write(metrics_csv(ts.metrics))
    return ts
