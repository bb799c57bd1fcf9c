import numpy as np
import pytest

from evbalance.city import DemandScenario, Scenario


def make_scenario(width=2, height=2, spots=None, vehicles=6, rate=0.5,
                  horizon=20, trip=2, charge=3, idle_drain=0.02,
                  trip_drain=0.05, threshold=0.25, od=None,
                  initial_battery=1.0, relocation_drains=True):
    """Programmatic scenario builder for tests."""
    n = width * height
    if spots is None:
        spots = np.ones(n, dtype=int)
    spots = np.asarray(spots, dtype=int)
    rate = np.full(n, float(rate)) if np.isscalar(rate) else np.asarray(rate, dtype=float)
    od = np.full((n, n), 1.0 / n) if od is None else np.asarray(od, dtype=float)
    trip = (np.full((n, n), int(trip)) if np.isscalar(trip)
            else np.asarray(trip, dtype=int))
    demand = DemandScenario(
        horizon=horizon, demand_rate=rate, od_matrix=od, trip_duration=trip,
        charge_duration=charge, idle_drain=idle_drain, trip_drain=trip_drain,
        low_battery_threshold=threshold, relocation_drains=relocation_drains,
    )
    return Scenario(width=width, height=height, stations=spots,
                    fleet_size=vehicles, initial_battery=initial_battery,
                    demand=demand)


@pytest.fixture
def small_scenario():
    return make_scenario()
