"""Grid-city fleet simulator.

The city is a ``width x height`` grid of regions with 4-neighborhood
adjacency.  A fleet of electric vehicles cycles through four statuses:

    vacant -> occupied   (picked up a ride)
    occupied -> vacant   (dropped off)
    vacant -> low-battery (battery fell below the threshold)
    low-battery -> still (entered a charging spot)
    still -> vacant      (finished charging)

One call to :func:`step_environment` advances the world by one time
interval.  It executes the joint dispatch action (a pair of probability
vectors per region, resolved to integer vehicle moves by largest-remainder
rounding), drains batteries, advances trip and charge timers, runs the local
trip/charge assignment, expires stale requests and spawns demand for the next
interval.  All randomness flows from the explicit per-step seed, so the
transition is a deterministic function of (state, action, seed).

Simulation instances share nothing; separate instances may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ConstraintViolation, ValidationError


class Status(str, Enum):
    VACANT = "vacant"
    OCCUPIED = "occupied"
    LOW_BATTERY = "low-battery"
    STILL = "still"


#: The only legal status transitions.
LEGAL_EDGES = frozenset({
    (Status.VACANT, Status.OCCUPIED),
    (Status.OCCUPIED, Status.VACANT),
    (Status.VACANT, Status.LOW_BATTERY),
    (Status.LOW_BATTERY, Status.STILL),
    (Status.STILL, Status.VACANT),
})


@dataclass
class Vehicle:
    id: int
    status: Status
    region: int
    battery: float
    timer: int = 0
    destination: int = None

    def copy(self):
        return replace(self)


@dataclass(frozen=True)
class DemandScenario:
    """Synthetic demand and vehicle-physics parameters for one scenario.

    ``demand_rate`` is the expected number of new ride requests per region
    per interval; arrivals are Poisson.  ``od_matrix`` rows are probability
    distributions over destination regions.  ``trip_duration`` is in whole
    intervals.  ``idle_drain`` applies to vacant and low-battery vehicles
    each interval, ``trip_drain`` to occupied vehicles each interval of the
    trip.  ``relocation_drains`` controls whether vehicles relocated by the
    dispatch action also pay the idle drain that interval.
    """

    horizon: int
    demand_rate: np.ndarray
    od_matrix: np.ndarray
    trip_duration: np.ndarray
    charge_duration: int
    idle_drain: float
    trip_drain: float
    low_battery_threshold: float
    relocation_drains: bool = True

    def __post_init__(self):
        n = self.demand_rate.shape[0]
        if self.horizon < 1:
            raise ValidationError("durations.horizon must be >= 1")
        if np.any(self.demand_rate < 0.0):
            raise ValidationError("demand.rate entries must be nonnegative")
        if self.od_matrix.shape != (n, n):
            raise ValidationError("demand.od must be a square matrix over regions")
        rowsum = self.od_matrix.sum(axis=1)
        bad = np.nonzero(np.abs(rowsum - 1.0) > 1e-9)[0]
        if bad.size:
            raise ValidationError(
                f"demand.od row {bad[0]} sums to {rowsum[bad[0]]:.12g}, expected 1"
            )
        if np.any(self.od_matrix < 0.0):
            raise ValidationError("demand.od entries must be nonnegative")
        if self.trip_duration.shape != (n, n) or np.any(self.trip_duration < 1):
            raise ValidationError("durations.trip entries must be >= 1")
        if self.charge_duration < 1:
            raise ValidationError("durations.charge must be >= 1")
        if not 0.0 < self.low_battery_threshold < 1.0:
            raise ValidationError("battery.low_threshold must lie in (0, 1)")
        if self.idle_drain < 0.0 or self.trip_drain < 0.0:
            raise ValidationError("battery drains must be nonnegative")


@dataclass(frozen=True)
class Scenario:
    """A fully specified simulation setup (grid + fleet + demand)."""

    width: int
    height: int
    stations: np.ndarray
    fleet_size: int
    initial_battery: float
    demand: DemandScenario

    @property
    def n_regions(self):
        return self.width * self.height


@dataclass(frozen=True)
class RegionGrid:
    """The city partition: adjacency, charging spots and synthetic geometry.

    ``neighbors[i]`` lists adjacent regions in ascending index order; the
    canonical direction listing for dispatch actions is those neighbors
    followed by the region itself (self last).  ``pos`` holds one synthetic
    location row per region: center longitude/latitude, the four cell
    boundaries, and the normalized region index.
    """

    width: int
    height: int
    spots: np.ndarray
    neighbors: tuple
    pos: np.ndarray

    @property
    def n_regions(self):
        return self.width * self.height

    def region_index(self, row, col):
        return row * self.width + col

    def directions(self, i):
        """Canonical dispatch targets for region ``i``: neighbors then self."""
        return np.concatenate([self.neighbors[i], [i]])

    @property
    def n_dirs(self):
        return np.array([len(nb) + 1 for nb in self.neighbors])

    @property
    def max_dirs(self):
        return int(max(len(nb) for nb in self.neighbors)) + 1


def build_grid(scenario: Scenario) -> RegionGrid:
    """Build the 4-neighborhood region grid described by the scenario."""
    w, h = scenario.width, scenario.height
    if w < 1:
        raise ValidationError("grid.width must be >= 1")
    if h < 1:
        raise ValidationError("grid.height must be >= 1")
    if w * h < 2:
        raise ValidationError("grid.width x grid.height must be >= 2 regions")
    spots = np.asarray(scenario.stations, dtype=int)
    if spots.shape != (w * h,):
        raise ValidationError("stations.spots must list one count per region")
    if np.any(spots < 0):
        bad = int(np.nonzero(spots < 0)[0][0])
        raise ValidationError(f"stations.spots[{bad}] is negative")
    if spots.sum() < 1:
        raise ValidationError("stations.spots must total at least one spot")

    neighbors = []
    pos = np.zeros((w * h, 7))
    n = w * h
    for r in range(h):
        for c in range(w):
            i = r * w + c
            nb = []
            if r > 0:
                nb.append(i - w)
            if c > 0:
                nb.append(i - 1)
            if c < w - 1:
                nb.append(i + 1)
            if r < h - 1:
                nb.append(i + w)
            neighbors.append(np.array(sorted(nb), dtype=int))
            pos[i] = [
                (c + 0.5) / w, (r + 0.5) / h,      # center lon/lat
                c / w, (c + 1) / w,                # west/east boundary
                r / h, (r + 1) / h,                # south/north boundary
                i / max(1, n - 1),                 # region index, normalized
            ]
    return RegionGrid(w, h, spots, tuple(neighbors), pos)


@dataclass
class FleetState:
    """Vehicles, pending requests and cached per-region counts at time ``t``.

    The cached count arrays (``v``, ``l``, ``st``, ``es``) are refreshed after
    every operation and always equal a direct census of the vehicle list;
    ``d`` is the number of pending requests per region.  Queue entries carry
    the step index at which the request became visible, which drives expiry.
    """

    vehicles: list
    t: int
    queues: list
    sp: np.ndarray
    v: np.ndarray = None
    l: np.ndarray = None
    st: np.ndarray = None
    es: np.ndarray = None

    def __post_init__(self):
        if self.v is None:
            self.refresh_counts()

    @property
    def n_regions(self):
        return self.sp.shape[0]

    @property
    def d(self):
        return np.array([len(q) for q in self.queues])

    def census(self):
        """Recount (v, l, st, es) directly from the vehicle list."""
        n = self.n_regions
        v = np.zeros(n, dtype=int)
        lo = np.zeros(n, dtype=int)
        st = np.zeros(n, dtype=int)
        for veh in self.vehicles:
            if veh.status is Status.VACANT:
                v[veh.region] += 1
            elif veh.status is Status.LOW_BATTERY:
                lo[veh.region] += 1
            elif veh.status is Status.STILL:
                st[veh.region] += 1
        return v, lo, st, self.sp - st

    def refresh_counts(self):
        self.v, self.l, self.st, self.es = self.census()

    def copy(self):
        return FleetState(
            vehicles=[veh.copy() for veh in self.vehicles],
            t=self.t,
            queues=[list(q) for q in self.queues],
            sp=self.sp,
            v=self.v.copy(), l=self.l.copy(), st=self.st.copy(), es=self.es.copy(),
        )

    def local_state_matrix(self):
        """Per-region (V, L, d, ST, ES, SP) rows as a float matrix."""
        return np.column_stack([self.v, self.l, self.d, self.st, self.es, self.sp]).astype(float)


@dataclass(frozen=True)
class AssignResult:
    served: int
    unserved: int
    seated: int
    unseated: int


@dataclass
class StepLog:
    """What one environment step did, for CSV export and debugging."""

    t: int
    served: int
    unserved: int
    seated: int
    v: np.ndarray
    l: np.ndarray
    st: np.ndarray
    es: np.ndarray
    dv: np.ndarray
    dl: np.ndarray
    dst: np.ndarray
    des: np.ndarray


def _as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def initial_fleet_state(grid: RegionGrid, scenario: Scenario, seed) -> FleetState:
    """Fleet at t=0: vehicles placed round-robin, first-interval demand drawn."""
    if scenario.fleet_size < 1:
        raise ValidationError("fleet.vehicles must be >= 1")
    if not 0.0 <= scenario.initial_battery <= 1.0:
        raise ValidationError("fleet.initial_battery must lie in [0, 1]")
    if scenario.initial_battery < scenario.demand.low_battery_threshold:
        raise ValidationError(
            "fleet.initial_battery is below battery.low_threshold"
        )
    n = grid.n_regions
    vehicles = [
        Vehicle(id=k, status=Status.VACANT, region=k % n,
                battery=scenario.initial_battery)
        for k in range(scenario.fleet_size)
    ]
    state = FleetState(vehicles=vehicles, t=0, queues=[[] for _ in range(n)],
                       sp=grid.spots.copy())
    return spawn_demand(state, scenario.demand, seed)


def spawn_demand(state: FleetState, demand: DemandScenario, rng) -> FleetState:
    """Append Poisson ride-request arrivals for the current interval.

    Pure given the seed: the same (state, seed) pair always produces the
    same queues.  Zero-rate regions spawn nothing.
    """
    if state.t >= demand.horizon:
        raise ValidationError(f"t={state.t} is past horizon={demand.horizon}")
    gen = _as_generator(rng)
    out = state.copy()
    counts = gen.poisson(demand.demand_rate)
    for i, c in enumerate(counts):
        out.queues[i].extend([state.t] * int(c))
    out.refresh_counts()
    return out


def assign_local(state: FleetState, demand: DemandScenario, rng):
    """Local trip and charge assignment within each region.

    Vacant vehicles (lowest id first) pick up queued requests FIFO; each
    match becomes an occupied trip with a destination sampled from the OD
    row and a timer from the trip-duration table.  Low-battery vehicles
    (lowest id first) take local empty charging spots until none remain.
    Returns the updated state and the served/seated tally.
    """
    gen = _as_generator(rng)
    out = state.copy()
    served = seated = unserved = unseated = 0
    n = out.n_regions
    by_region_vacant = [[] for _ in range(n)]
    by_region_low = [[] for _ in range(n)]
    for veh in out.vehicles:
        if veh.status is Status.VACANT:
            by_region_vacant[veh.region].append(veh)
        elif veh.status is Status.LOW_BATTERY:
            by_region_low[veh.region].append(veh)
    for i in range(n):
        queue = out.queues[i]
        vacants = sorted(by_region_vacant[i], key=lambda veh: veh.id)
        k = min(len(queue), len(vacants))
        if k:
            dests = gen.choice(n, size=k, p=demand.od_matrix[i])
            for veh, dest in zip(vacants[:k], dests):
                veh.status = Status.OCCUPIED
                veh.destination = int(dest)
                veh.timer = int(demand.trip_duration[i, int(dest)])
            del queue[:k]
        served += k
        unserved += len(queue)

        spots_free = int(out.es[i])
        lows = sorted(by_region_low[i], key=lambda veh: veh.id)
        took = min(spots_free, len(lows))
        for veh in lows[:took]:
            veh.status = Status.STILL
            veh.timer = int(demand.charge_duration)
        seated += took
        unseated += len(lows) - took
    out.refresh_counts()
    return out, AssignResult(served, unserved, seated, unseated)


def largest_remainder_counts(total, fractions):
    """Integer split of ``total`` proportional to ``fractions``.

    Floors each share, then hands remaining units to the largest fractional
    parts (ties to the lowest index).  The result always sums to ``total``.
    """
    fractions = np.asarray(fractions, dtype=float)
    raw = total * fractions
    counts = np.floor(raw).astype(int)
    short = int(total - counts.sum())
    if short > 0:
        remainders = raw - counts
        # stable argsort on negated remainders gives ties to the lowest index
        order = np.argsort(-remainders, kind="stable")
        counts[order[:short]] += 1
    return counts


def _validate_action(i, name, vec, expected_len, tol=1e-6):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (expected_len,):
        raise ConstraintViolation(
            f"region {i} action {name} has length {vec.shape}, expected {expected_len}"
        )
    if np.min(vec) < -tol:
        raise ConstraintViolation(
            f"region {i} action {name} has a negative entry ({np.min(vec):.3g})"
        )
    if abs(vec.sum() - 1.0) > tol:
        raise ConstraintViolation(
            f"region {i} action {name} sums to {vec.sum():.9f}, expected 1"
        )
    return vec


def step_environment(state: FleetState, joint_action, grid: RegionGrid,
                     scenario: Scenario, rng_seed):
    """Advance the city by one interval under the joint dispatch action.

    ``joint_action`` is one ``(p, q)`` pair per region in the canonical
    direction order (neighbors ascending, self last): ``p`` splits the
    region's vacant vehicles across directions, ``q`` its low-battery
    vehicles.  Both must be probability vectors within 1e-6.

    The phases, in order: dispatch moves, battery depletion and threshold
    crossings, trip/charge timer advancement, local assignment, request
    expiry, demand spawn for the next interval.  Total vehicle count is
    conserved exactly.
    """
    demand = scenario.demand
    n = grid.n_regions
    if len(joint_action) != n:
        raise ConstraintViolation(
            f"joint action has {len(joint_action)} entries for {n} regions"
        )
    gen = np.random.default_rng(rng_seed)
    out = state.copy()
    prev_v, prev_l, prev_st, prev_es = out.v.copy(), out.l.copy(), out.st.copy(), out.es.copy()

    # Phase 1: dispatch vacant and low-battery vehicles.
    by_region_vacant = [[] for _ in range(n)]
    by_region_low = [[] for _ in range(n)]
    for veh in out.vehicles:
        if veh.status is Status.VACANT:
            by_region_vacant[veh.region].append(veh)
        elif veh.status is Status.LOW_BATTERY:
            by_region_low[veh.region].append(veh)
    moved = set()
    for i in range(n):
        p, q = joint_action[i]
        dirs = grid.directions(i)
        p = _validate_action(i, "p", p, len(dirs))
        q = _validate_action(i, "q", q, len(dirs))
        for name_vec, pool in ((p, by_region_vacant[i]), (q, by_region_low[i])):
            if not pool:
                continue
            pool = sorted(pool, key=lambda veh: veh.id)
            counts = largest_remainder_counts(len(pool), name_vec)
            cursor = 0
            for slot, c in enumerate(counts):
                target = int(dirs[slot])
                for veh in pool[cursor:cursor + c]:
                    if target != i:
                        veh.region = target
                        moved.add(veh.id)
                cursor += c

    # Phase 2: battery depletion; vacant vehicles may cross the threshold.
    for veh in out.vehicles:
        if veh.status is Status.OCCUPIED:
            veh.battery = max(0.0, veh.battery - demand.trip_drain)
        elif veh.status in (Status.VACANT, Status.LOW_BATTERY):
            if demand.relocation_drains or veh.id not in moved:
                veh.battery = max(0.0, veh.battery - demand.idle_drain)
    for veh in out.vehicles:
        if veh.status is Status.VACANT and veh.battery < demand.low_battery_threshold:
            veh.status = Status.LOW_BATTERY

    # Phase 3: trips arrive, chargers finish.
    for veh in out.vehicles:
        if veh.status is Status.OCCUPIED:
            veh.timer -= 1
            if veh.timer <= 0:
                veh.region = veh.destination
                veh.destination = None
                veh.status = Status.VACANT
                if veh.battery < demand.low_battery_threshold:
                    veh.status = Status.LOW_BATTERY
        elif veh.status is Status.STILL:
            veh.timer -= 1
            if veh.timer <= 0:
                veh.status = Status.VACANT
                veh.battery = 1.0
    out.refresh_counts()

    # Phase 4: local trip and charge assignment.
    out, assign = assign_local(out, demand, gen)

    # Phase 5: requests that already waited one extra interval expire.
    expired = 0
    for queue in out.queues:
        keep = [ts for ts in queue if ts > out.t - 1]
        expired += len(queue) - len(keep)
        queue[:] = keep

    # Phase 6: next interval begins; spawn its demand.
    out.t += 1
    if out.t < demand.horizon:
        out = spawn_demand(out, demand, gen)
    out.refresh_counts()

    log = StepLog(
        t=out.t, served=assign.served, unserved=expired, seated=assign.seated,
        v=out.v.copy(), l=out.l.copy(), st=out.st.copy(), es=out.es.copy(),
        dv=out.v - prev_v, dl=out.l - prev_l, dst=out.st - prev_st,
        des=out.es - prev_es,
    )
    return out, log


def steplog_rows(logs):
    """Flatten step logs to CSV rows: t, served, unserved, then V/L/ST/ES per region."""
    n = logs[0].v.shape[0] if logs else 0
    header = ["t", "served", "unserved"]
    for name in ("V", "L", "ST", "ES"):
        header.extend(f"{name}{i}" for i in range(n))
    rows = [header]
    for log in logs:
        row = [log.t, log.served, log.unserved]
        for arr in (log.v, log.l, log.st, log.es):
            row.extend(int(x) for x in arr)
        rows.append(row)
    return rows
