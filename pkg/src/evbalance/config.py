"""Scenario files, run configuration and metric export.

Scenario files are YAML with six sections -- ``grid``, ``stations``,
``fleet``, ``demand``, ``battery``, ``durations`` -- documented in the
README.  Parsing is strict: unknown sections or keys are rejected, and every
semantic constraint (OD rows summing to one, positive durations, ...) is
checked with an error naming the offending field.  ``serialize_scenario``
emits a canonical expanded form: scalar shorthands become full per-region
arrays, keys are sorted, so serialize(parse(f)) is a fixed point of
parse/serialize.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .city import DemandScenario, Scenario
from .errors import ScenarioError

_SCENARIO_KEYS = {
    "grid": {"width", "height"},
    "stations": {"spots"},
    "fleet": {"vehicles", "initial_battery"},
    "demand": {"rate", "od"},
    "battery": {"idle_drain", "trip_drain", "low_threshold", "relocation_drains"},
    "durations": {"horizon", "trip", "charge"},
}


def _check_keys(data, path="scenario"):
    if not isinstance(data, dict):
        raise ScenarioError(f"{path} must be a mapping of sections")
    unknown = set(data) - set(_SCENARIO_KEYS)
    if unknown:
        raise ScenarioError(f"unknown section {sorted(unknown)[0]!r} in {path}")
    missing = set(_SCENARIO_KEYS) - set(data)
    if missing:
        raise ScenarioError(f"missing section {sorted(missing)[0]!r} in {path}")
    for section, keys in _SCENARIO_KEYS.items():
        if not isinstance(data[section], dict):
            raise ScenarioError(f"section {section!r} must be a mapping")
        bad = set(data[section]) - keys
        if bad:
            raise ScenarioError(f"unknown key {section}.{sorted(bad)[0]}")


def _need(section, key, data, kind=None):
    if key not in data[section]:
        raise ScenarioError(f"missing key {section}.{key}")
    value = data[section][key]
    if kind is not None and not isinstance(value, kind):
        raise ScenarioError(f"{section}.{key} has the wrong type")
    return value


def _per_region(value, n, label):
    """Expand a scalar or list to a length-n array."""
    if isinstance(value, (int, float)):
        return np.full(n, float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n,):
        raise ScenarioError(f"{label} must be a scalar or a list of {n} values")
    return arr


def _square(value, n, label):
    if isinstance(value, (int, float)):
        return np.full((n, n), float(value))
    arr = np.asarray(value, dtype=float)
    if arr.shape != (n, n):
        raise ScenarioError(f"{label} must be a scalar or an {n}x{n} matrix")
    return arr


def scenario_from_dict(data) -> Scenario:
    _check_keys(data)
    width = _need("grid", "width", data, int)
    height = _need("grid", "height", data, int)
    if width < 1 or height < 1:
        raise ScenarioError("grid.width and grid.height must be >= 1")
    n = width * height

    spots = _per_region(_need("stations", "spots", data), n, "stations.spots")
    if np.any(spots != np.round(spots)) or np.any(spots < 0):
        raise ScenarioError("stations.spots must be nonnegative integers")

    vehicles = _need("fleet", "vehicles", data, int)
    initial_battery = float(_need("fleet", "initial_battery", data, (int, float)))

    rate = _per_region(_need("demand", "rate", data), n, "demand.rate")
    od_raw = _need("demand", "od", data)
    if od_raw == "uniform":
        od = np.full((n, n), 1.0 / n)
    else:
        od = _square(od_raw, n, "demand.od")

    trip_raw = _need("durations", "trip", data)
    trip = _square(trip_raw, n, "durations.trip")
    if np.any(trip != np.round(trip)):
        raise ScenarioError("durations.trip entries must be integers")

    try:
        demand = DemandScenario(
            horizon=int(_need("durations", "horizon", data, int)),
            demand_rate=rate,
            od_matrix=od,
            trip_duration=trip.astype(int),
            charge_duration=int(_need("durations", "charge", data, int)),
            idle_drain=float(_need("battery", "idle_drain", data, (int, float))),
            trip_drain=float(_need("battery", "trip_drain", data, (int, float))),
            low_battery_threshold=float(
                _need("battery", "low_threshold", data, (int, float))
            ),
            relocation_drains=bool(
                _need("battery", "relocation_drains", data, bool)
            ),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc
    return Scenario(
        width=width,
        height=height,
        stations=spots.astype(int),
        fleet_size=int(vehicles),
        initial_battery=initial_battery,
        demand=demand,
    )


def parse_scenario(path) -> Scenario:
    """Load and fully validate a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario parse error in {path}: {exc}") from exc
    return scenario_from_dict(data)


def scenario_to_dict(scenario: Scenario):
    d = scenario.demand
    return {
        "grid": {"width": scenario.width, "height": scenario.height},
        "stations": {"spots": [int(s) for s in scenario.stations]},
        "fleet": {
            "vehicles": int(scenario.fleet_size),
            "initial_battery": float(scenario.initial_battery),
        },
        "demand": {
            "rate": [float(r) for r in d.demand_rate],
            "od": [[float(x) for x in row] for row in d.od_matrix],
        },
        "battery": {
            "idle_drain": float(d.idle_drain),
            "trip_drain": float(d.trip_drain),
            "low_threshold": float(d.low_battery_threshold),
            "relocation_drains": bool(d.relocation_drains),
        },
        "durations": {
            "horizon": int(d.horizon),
            "trip": [[int(x) for x in row] for row in d.trip_duration],
            "charge": int(d.charge_duration),
        },
    }


def serialize_scenario(scenario: Scenario) -> str:
    """Canonical expanded YAML form (sorted keys, full matrices)."""
    return yaml.safe_dump(scenario_to_dict(scenario), sort_keys=True,
                          default_flow_style=None)


def scenario_fingerprint(scenario: Scenario) -> str:
    """Stable content hash; reports carry it so compare() can refuse
    cross-scenario comparisons."""
    return hashlib.sha256(serialize_scenario(scenario).encode()).hexdigest()[:16]


# --- run configuration ----------------------------------------------------------

_RUN_KEYS = {
    "scenario", "episodes", "steps_per_episode", "gamma", "batch_size",
    "learning_rate", "tau", "delta", "beta", "explore_sigma",
    "adversary_bounds", "replay_capacity", "baseline", "seed",
    "checkpoint_every", "noise_sigma", "eval_seeds", "out_dir",
    "es_uses_perturbed_st",
}


@dataclass
class RunConfig:
    """Everything a train/evaluate invocation needs, with every default in
    one place.  The effective (merged) config is echoed into each run's
    output directory for provenance."""

    scenario: str
    episodes: int = 300
    steps_per_episode: int = 48
    gamma: float = 0.99
    batch_size: int = 600
    learning_rate: float = 0.001
    tau: float = 0.01
    delta: float = 0.1
    beta: float = 1.0
    explore_sigma: float = 0.1
    adversary_bounds: tuple = ((-0.3, 0.3), (-0.2, 0.2), (-0.2, 0.2))
    replay_capacity: int = 50_000
    baseline: bool = False
    seed: int = 0
    checkpoint_every: int = 50
    noise_sigma: float = 1.0
    eval_seeds: tuple = (1, 2, 3, 4, 5)
    out_dir: str = "runs"
    es_uses_perturbed_st: bool = False


def parse_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ScenarioError(f"cannot read run config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScenarioError(f"run config parse error in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ScenarioError("run config must be a mapping")
    unknown = set(data) - _RUN_KEYS
    if unknown:
        raise ScenarioError(f"unknown run-config key {sorted(unknown)[0]!r}")
    if "scenario" not in data:
        raise ScenarioError("run config must name a scenario file")
    if "adversary_bounds" in data:
        bounds = data["adversary_bounds"]
        try:
            data["adversary_bounds"] = tuple(
                (float(lo), float(hi)) for lo, hi in bounds
            )
        except (TypeError, ValueError) as exc:
            raise ScenarioError("adversary_bounds must be three (lo, hi) pairs") from exc
    if "eval_seeds" in data:
        data["eval_seeds"] = tuple(int(s) for s in data["eval_seeds"])
    cfg = RunConfig(**data)
    scenario_path = resolve_scenario_path(cfg.scenario, base=os.path.dirname(path))
    if not os.path.exists(scenario_path):
        raise ScenarioError(f"scenario file not found: {scenario_path}")
    cfg.scenario = scenario_path
    return cfg


def resolve_scenario_path(path, base=""):
    if os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base or ".", path))


def effective_config_yaml(cfg: RunConfig) -> str:
    data = dataclasses.asdict(cfg)
    data["adversary_bounds"] = [list(pair) for pair in cfg.adversary_bounds]
    data["eval_seeds"] = list(cfg.eval_seeds)
    return yaml.safe_dump(data, sort_keys=True)


def write_effective_config(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.yaml")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(effective_config_yaml(cfg))
    return path


# --- metric export --------------------------------------------------------------

METRICS_HEADER = "episode,mean_reward,mean_u_c,mean_u_s,critic_loss"


def metrics_csv(log) -> str:
    """Render episode metrics as CSV, full float precision."""
    if not log:
        raise ScenarioError("metrics log is empty; nothing to export")
    buf = io.StringIO()
    buf.write(METRICS_HEADER + "\n")
    for m in log:
        buf.write(
            f"{m.episode},{m.mean_reward!r},{m.mean_u_c!r},{m.mean_u_s!r},{m.critic_loss!r}\n"
        )
    return buf.getvalue()


def export_metrics(log, path):
    """Write the per-episode metrics CSV; identical logs give identical bytes."""
    text = metrics_csv(log)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(text)
    return path


def export_steplog(rows, path):
    """Write per-step simulator logs (one row per step)."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        for row in rows:
            handle.write(",".join(str(x) for x in row) + "\n")
    return path
