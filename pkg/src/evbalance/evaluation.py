"""Frozen-policy evaluation under observation noise, and report comparison.

Evaluation answers the robustness question: with the adversary switched off
and standard-normal noise (scaled by ``noise_sigma``) injected into every
local-state field of the region agents' observations, how well does a
trained dispatch policy keep the city balanced?  The simulator itself never
sees the noise; only the policy's inputs are corrupted.  Each seed drives
one full episode, metrics are averaged across seeds, and two reports over
the same scenario and seed list can be compared metric-by-metric with
relative "increasing rate" percentages.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .city import Scenario, build_grid, initial_fleet_state, step_environment
from .config import scenario_fingerprint
from .errors import ValidationError
from .game import ObservationSpec, RegionActionSpace, compute_fairness
from .nets import load_mlps


@dataclass(frozen=True)
class SeedMetrics:
    seed: int
    mean_reward: float
    mean_u_c: float
    mean_u_s: float


@dataclass(frozen=True)
class EvalReport:
    """Per-seed and seed-averaged metrics for one frozen policy."""

    label: str
    scenario: str
    noise_sigma: float
    seeds: tuple
    per_seed: tuple
    avg_reward: float
    avg_u_c: float
    avg_u_s: float

    def to_json(self):
        data = asdict(self)
        data["per_seed"] = [asdict(m) for m in self.per_seed]
        return json.dumps(data, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        data["seeds"] = tuple(data["seeds"])
        data["per_seed"] = tuple(SeedMetrics(**m) for m in data["per_seed"])
        return cls(**data)

    @classmethod
    def from_runs(cls, label, scenario_fp, noise_sigma, runs):
        return cls(
            label=label,
            scenario=scenario_fp,
            noise_sigma=float(noise_sigma),
            seeds=tuple(m.seed for m in runs),
            per_seed=tuple(runs),
            avg_reward=float(np.mean([m.mean_reward for m in runs])),
            avg_u_c=float(np.mean([m.mean_u_c for m in runs])),
            avg_u_s=float(np.mean([m.mean_u_s for m in runs])),
        )


def rollout_seeds(seed, steps):
    """Seed streams for one evaluation episode: env init, per-step env
    seeds, and the observation-noise stream."""
    root = np.random.SeedSequence(seed)
    env_seq, noise_seq = root.spawn(2)
    return env_seq.spawn(steps + 1), np.random.default_rng(noise_seq)


def rollout(policy_fn, grid, scenario: Scenario, seed, noise_sigma=0.0,
            beta=1.0, steps=None, obs_spec=None, action_space=None):
    """One adversary-free episode of a frozen policy.

    ``policy_fn`` maps an (N, obs_dim) observation matrix to raw embedded
    region actions; outputs are projected onto the dispatch domain before
    execution.  Noise only touches the local-state slots of the
    observations, never the simulator state, so the true trajectory under a
    fixed action sequence is independent of ``noise_sigma``.
    """
    obs_spec = obs_spec or ObservationSpec.for_scenario(grid, scenario)
    action_space = action_space or RegionActionSpace(grid)
    steps = steps or scenario.demand.horizon
    env_seeds, noise_rng = rollout_seeds(seed, steps)
    state = initial_fleet_state(grid, scenario, env_seeds[0])
    zero_adv = np.zeros((grid.n_regions, 3))
    rewards = np.zeros(steps)
    ucs = np.zeros(steps)
    uss = np.zeros(steps)
    n_noisy = obs_spec.n_local_slots
    for k in range(steps):
        states = state.local_state_matrix()
        obs = obs_spec.region_obs(states, state.t, zero_adv)
        if noise_sigma:
            obs[:, :n_noisy] += noise_sigma * noise_rng.standard_normal(
                (grid.n_regions, n_noisy))
        act = action_space.project(policy_fn(obs))
        state, _ = step_environment(state, action_space.to_region_actions(act),
                                    grid, scenario, env_seeds[k + 1])
        u_c, u_s = compute_fairness(state.local_state_matrix())
        ucs[k], uss[k] = u_c, u_s
        rewards[k] = u_c + beta * u_s
    return SeedMetrics(seed=int(seed), mean_reward=float(rewards.mean()),
                       mean_u_c=float(ucs.mean()), mean_u_s=float(uss.mean()))


def evaluate(checkpoint, scenario: Scenario, noise_sigma=1.0,
             seeds=(1, 2, 3, 4, 5), beta=1.0, steps=None, label=None):
    """Evaluate a region-policy checkpoint over fixed seeds.

    ``checkpoint`` is a path to a saved .npz checkpoint or an Mlp.  The
    checkpoint must be shape-compatible with the scenario's grid.
    """
    grid = build_grid(scenario)
    obs_spec = ObservationSpec.for_scenario(grid, scenario)
    action_space = RegionActionSpace(grid)
    if hasattr(checkpoint, "forward"):
        policy = checkpoint
        label = label or "policy"
    else:
        nets, meta = load_mlps(checkpoint)
        if "policy_region" not in nets:
            raise ValidationError(f"{checkpoint} holds no region policy")
        policy = nets["policy_region"]
        label = label or str(checkpoint)
    if policy.in_dim != obs_spec.obs_dim or policy.out_dim != action_space.action_dim:
        raise ValidationError(
            f"checkpoint expects obs/action dims ({policy.in_dim}, {policy.out_dim}), "
            f"scenario grid needs ({obs_spec.obs_dim}, {action_space.action_dim})"
        )
    runs = [
        rollout(policy.forward, grid, scenario, seed, noise_sigma, beta,
                steps, obs_spec, action_space)
        for seed in seeds
    ]
    return EvalReport.from_runs(label, scenario_fingerprint(scenario),
                                noise_sigma, runs)


def increasing_rate(a, b):
    """Relative improvement of a over b in percent: (a - b) / |b| * 100."""
    if b == 0:
        return float("nan")
    return (a - b) / abs(b) * 100.0


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    a: float
    b: float
    rate: float


def compare(report_a: EvalReport, report_b: EvalReport):
    """Metric-by-metric comparison of two reports from identical setups.

    Less-negative fairness values count as improvements, which is exactly
    what the shared increasing-rate formula yields for values of equal sign.
    """
    if report_a.scenario != report_b.scenario:
        raise ValidationError("reports compare different scenarios")
    if tuple(report_a.seeds) != tuple(report_b.seeds):
        raise ValidationError("reports used different seed lists")
    return [
        ComparisonRow("average reward", report_a.avg_reward, report_b.avg_reward,
                      increasing_rate(report_a.avg_reward, report_b.avg_reward)),
        ComparisonRow("average u_s", report_a.avg_u_s, report_b.avg_u_s,
                      increasing_rate(report_a.avg_u_s, report_b.avg_u_s)),
        ComparisonRow("average u_c", report_a.avg_u_c, report_b.avg_u_c,
                      increasing_rate(report_a.avg_u_c, report_b.avg_u_c)),
    ]


def comparison_table(rows, name_a="A", name_b="B"):
    """Plain-text comparison table."""
    width = max(len(r.metric) for r in rows)
    lines = [f"{'Metric':<{width}}  {name_a:>12}  {name_b:>12}  Increasing Rate"]
    for r in rows:
        lines.append(
            f"{r.metric:<{width}}  {r.a:>12.2f}  {r.b:>12.2f}  {r.rate:+.2f}%"
        )
    return "\n".join(lines)


def comparison_csv(rows):
    out = ["metric,a,b,increasing_rate_pct"]
    for r in rows:
        out.append(f"{r.metric},{r.a!r},{r.b!r},{r.rate!r}")
    return "\n".join(out) + "\n"
