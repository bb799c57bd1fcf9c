"""The zero-sum game surface on top of the simulator.

This module defines what the two agent populations see and do: per-region
local states, the adversarial perturbation map that corrupts a region
agent's view of its own state, the fairness metrics and shared reward, the
flattened observation vectors, and the constraint domains of both action
spaces.  Everything here is a pure function of its inputs.

Local-state field order is fixed everywhere as

    (V, L, d, ST, ES, SP)

= vacant vehicles, low-battery vehicles, pending demand, charging vehicles,
empty spots, total spots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .city import RegionGrid, Scenario
from .errors import ValidationError
from .projection import Box, project_simplex


@dataclass(frozen=True)
class LocalState:
    """One region's state, real-valued because perturbation makes it so.

    True states satisfy ``es == sp - st`` and are all nonnegative; perturbed
    states carry no such guarantee and are flagged.
    """

    v: float
    l: float
    d: float
    st: float
    es: float
    sp: float
    t: int = 0
    pos: np.ndarray = None
    perturbed: bool = False

    def as_array(self):
        return np.array([self.v, self.l, self.d, self.st, self.es, self.sp])


@dataclass(frozen=True)
class AdversaryAction:
    """Perturbation knobs: demand, empty-spot and vacant-count volatility."""

    delta_d: float
    delta_c: float
    delta_v: float

    def as_array(self):
        return np.array([self.delta_d, self.delta_c, self.delta_v])


@dataclass(frozen=True)
class RegionAction:
    """A dispatch decision: two probability vectors over the region's
    directions (neighbors in ascending index order, self last)."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        q = np.asarray(self.q, dtype=float)
        for name, vec in (("p", p), ("q", q)):
            if vec.ndim != 1 or vec.shape[0] < 1:
                raise ValidationError(f"action {name} must be a nonempty vector")
            if np.min(vec) < -1e-6 or abs(vec.sum() - 1.0) > 1e-6:
                raise ValidationError(
                    f"action {name} is not a probability vector within 1e-6"
                )
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    def __iter__(self):
        yield self.p
        yield self.q


def perturb_matrix(states, actions, es_uses_perturbed_st=False):
    """Vectorized perturbation map on (..., N, 6) state rows.

    Columns transform as

        V~  = V + (SP - ES) * dc + V * dv
        d~  = d * (1 + dd)
        ST~ = ST - (SP - ES) * dc
        ES~ = (SP - ST) * [ST~ < SP]

    with L and SP untouched.  ``es_uses_perturbed_st`` switches the ES~
    value term to (SP - ST~), the plausible-typo reading; the indicator is
    unchanged either way.
    """
    s = np.asarray(states, dtype=float)
    a = np.asarray(actions, dtype=float)
    v, l, d = s[..., 0], s[..., 1], s[..., 2]
    st, es, sp = s[..., 3], s[..., 4], s[..., 5]
    dd, dc, dv = a[..., 0], a[..., 1], a[..., 2]
    occupied_spots = sp - es
    st_new = st - occupied_spots * dc
    es_base = (sp - st_new) if es_uses_perturbed_st else (sp - st)
    out = np.empty_like(s)
    out[..., 0] = v + occupied_spots * dc + v * dv
    out[..., 1] = l
    out[..., 2] = d * (1.0 + dd)
    out[..., 3] = st_new
    out[..., 4] = es_base * (st_new < sp)
    out[..., 5] = sp
    return out


def perturb_state(state: LocalState, action: AdversaryAction,
                  es_uses_perturbed_st=False) -> LocalState:
    """Apply the perturbation map to a single region's local state."""
    row = perturb_matrix(state.as_array(), action.as_array(),
                         es_uses_perturbed_st)
    return LocalState(*row, t=state.t, pos=state.pos, perturbed=True)


def compute_fairness(states, cap_ratio=None):
    """Charging-utilization and supply-demand fairness ``(u_c, u_s)``.

    Each is the negative total deviation of local ratios (ES/ST and d/V)
    from the corresponding global ratio, so both are <= 0 with equality only
    at perfect balance.  Degenerate denominators: regions with ST = 0 are
    left out of u_c entirely (value and global ratio); a region with V = 0
    but positive demand counts as sitting at a large capped ratio (default:
    the number of regions) so starving a region still costs fairness.
    """
    s = _as_state_matrix(states)
    n = s.shape[0]
    v, d, st, es = s[:, 0], s[:, 2], s[:, 3], s[:, 4]
    cap = float(n) if cap_ratio is None else float(cap_ratio)

    charging = st > 0
    if charging.any():
        g_c = es[charging].sum() / st[charging].sum()
        u_c = -float(np.abs(es[charging] / st[charging] - g_c).sum())
    else:
        u_c = 0.0

    total_v, total_d = v.sum(), d.sum()
    if total_v > 0:
        g_s = total_d / total_v
    else:
        g_s = cap if total_d > 0 else 0.0
    supplied = v > 0
    starved = (v <= 0) & (d > 0)
    u_s = -float(
        np.abs(d[supplied] / v[supplied] - g_s).sum()
        + abs(cap - g_s) * starved.sum()
    )
    return u_c, u_s


def compute_reward(states, beta=1.0):
    """Shared region-agent reward u_c + beta * u_s (adversaries get its
    negation).  Evaluated on true post-transition states."""
    if beta < 0.0:
        raise ValidationError("reward weight beta must be nonnegative")
    u_c, u_s = compute_fairness(states)
    return u_c + beta * u_s


def _as_state_matrix(states):
    if isinstance(states, np.ndarray):
        return np.asarray(states, dtype=float)
    return np.stack([s.as_array() if isinstance(s, LocalState) else np.asarray(s, dtype=float)
                     for s in states])


# --- observations --------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSpec:
    """Fixed flattening of states into per-region observation vectors.

    Layout (documented field order):

        [ own local state (6) |
          neighbor local states, ascending region index, zero-padded to the
          grid's maximum degree (6 each) |
          t / horizon (1) |
          pos: lon, lat, west, east, south, north, index (7) ]

    Local-state fields are normalized before flattening: counts (V, L, d) by
    the fleet size, spot fields (ST, ES, SP) by the largest per-region spot
    count.  The same normalization feeds the critic's state features.
    """

    grid: RegionGrid
    horizon: int
    count_scale: float
    spot_scale: float
    neighbor_idx: np.ndarray = field(repr=False, default=None)
    neighbor_mask: np.ndarray = field(repr=False, default=None)

    @classmethod
    def for_scenario(cls, grid: RegionGrid, scenario: Scenario):
        return cls.build(grid, scenario.demand.horizon,
                         count_scale=float(scenario.fleet_size),
                         spot_scale=float(max(1, int(grid.spots.max()))))

    @classmethod
    def build(cls, grid: RegionGrid, horizon, count_scale, spot_scale):
        n = grid.n_regions
        maxdeg = grid.max_dirs - 1
        idx = np.zeros((n, maxdeg), dtype=int)
        mask = np.zeros((n, maxdeg), dtype=bool)
        for i, nb in enumerate(grid.neighbors):
            idx[i, :len(nb)] = nb
            mask[i, :len(nb)] = True
        return cls(grid, int(horizon), float(count_scale), float(spot_scale),
                   neighbor_idx=idx, neighbor_mask=mask)

    @property
    def max_degree(self):
        return self.neighbor_idx.shape[1]

    @property
    def n_local_slots(self):
        """Slots holding local-state fields (the ones evaluation noise hits)."""
        return 6 * (1 + self.max_degree)

    @property
    def obs_dim(self):
        return self.n_local_slots + 1 + self.grid.pos.shape[1]

    @property
    def local_scales(self):
        c, p = self.count_scale, self.spot_scale
        return np.array([c, c, c, p, p, p])

    def normalize(self, states):
        return np.asarray(states, dtype=float) / self.local_scales

    def flatten(self, own_norm, all_norm, t):
        """Assemble observation rows from normalized local-state matrices.

        ``own_norm`` supplies each region's own block (possibly perturbed),
        ``all_norm`` the true states neighbors are read from.  Accepts
        (N, 6) or batched (B, N, 6) inputs.
        """
        own = np.asarray(own_norm, dtype=float)
        alln = np.asarray(all_norm, dtype=float)
        neigh = alln[..., self.neighbor_idx, :] * self.neighbor_mask[..., None]
        lead = own.shape[:-1]
        t_norm = np.empty((*lead, 1))
        if np.ndim(t):
            t_norm[..., 0] = np.asarray(t, dtype=float)[..., None] / self.horizon
        else:
            t_norm[..., 0] = float(t) / self.horizon
        parts = [
            own,
            neigh.reshape(*lead, self.max_degree * 6),
            t_norm,
            np.broadcast_to(self.grid.pos, (*lead, self.grid.pos.shape[1])),
        ]
        return np.concatenate(parts, axis=-1)

    def adversary_obs(self, states, t):
        """True-state observations o_a (adversaries see the real world)."""
        norm = self.normalize(states)
        return self.flatten(norm, norm, t)

    def region_obs(self, states, t, adversary_actions, es_uses_perturbed_st=False):
        """Region-agent observations o_r: own block perturbed, neighbors true."""
        norm = self.normalize(states)
        own = self.normalize(perturb_matrix(states, adversary_actions,
                                            es_uses_perturbed_st))
        return self.flatten(own, norm, t)

    def region_obs_from_true(self, true_obs, states, adversary_actions,
                             es_uses_perturbed_st=False):
        """Turn already-flattened true observations into region observations.

        Perturbation only ever touches a region's own block, so the
        neighbor/time/pos slots of a true observation can be reused as-is.
        """
        out = np.array(true_obs, copy=True)
        out[..., :6] = self.normalize(perturb_matrix(states, adversary_actions,
                                                     es_uses_perturbed_st))
        return out

    def state_features(self, states, t):
        """Joint-state feature vector for the centralized critic."""
        norm = self.normalize(states)
        lead = norm.shape[:-2]
        flat = norm.reshape(*lead, -1)
        t_col = np.asarray(t, dtype=float).reshape(*lead, 1) / self.horizon
        return np.concatenate([flat, t_col], axis=-1)


# --- action domains ------------------------------------------------------------


def adversary_box(bounds) -> Box:
    """Box domain for (delta_d, delta_c, delta_v) from three (lo, hi) pairs."""
    bounds = np.asarray(bounds, dtype=float)
    if bounds.shape != (3, 2):
        raise ValidationError("adversary bounds must be three (lo, hi) pairs")
    return Box(lower=bounds[:, 0], upper=bounds[:, 1])


class RegionActionSpace:
    """The joint dispatch domain with fixed-width per-region embedding.

    Regions have between 2 and 5 dispatch directions depending on their
    degree, but shared networks need fixed-size outputs.  Actions are
    embedded as two blocks of ``max_dirs`` slots per region: slot k < deg(i)
    is the k-th neighbor (ascending index), the last slot is "stay"; the
    remaining slots are invalid and pinned to zero.  Projection zeroes the
    invalid slots and applies the exact simplex projection on the valid
    ones, which is the Euclidean projection onto the embedded domain.
    """

    def __init__(self, grid: RegionGrid):
        self.grid = grid
        self.m = grid.max_dirs
        n = grid.n_regions
        self.valid = np.zeros((n, self.m), dtype=bool)
        for i, nb in enumerate(grid.neighbors):
            self.valid[i, :len(nb)] = True
            self.valid[i, self.m - 1] = True
        # group regions by direction count for vectorized masked projection
        self._classes = []
        degrees = np.array([len(nb) for nb in grid.neighbors])
        for deg in sorted(set(degrees)):
            regions = np.nonzero(degrees == deg)[0]
            slots = np.array(list(range(deg)) + [self.m - 1])
            self._classes.append((regions, slots))

    @property
    def action_dim(self):
        """Per-region embedded action width (p block + q block)."""
        return 2 * self.m

    def project(self, actions):
        """Project raw (..., N, 2m) outputs onto the embedded domain."""
        a = np.asarray(actions, dtype=float)
        lead = a.shape[:-2]
        a4 = a.reshape(-1, a.shape[-2], 2, self.m)
        out = np.zeros_like(a4)
        for regions, slots in self._classes:
            sub = np.stack([a4[:, regions, :, s] for s in slots], axis=-1)
            sub = project_simplex(sub)
            for j, s in enumerate(slots):
                out[:, regions, :, s] = sub[..., j]
        return out.reshape(*lead, a.shape[-2], 2 * self.m)

    def argmax_vertex(self, g):
        """Best vertex of the embedded domain for linear objective rows."""
        g = np.asarray(g, dtype=float)
        lead = g.shape[:-2]
        g4 = g.reshape(-1, g.shape[-2], 2, self.m)
        masked = np.where(self.valid[None, :, None, :], g4, -np.inf)
        best = np.argmax(masked, axis=-1)
        out = np.eye(self.m)[best]
        return out.reshape(*lead, g.shape[-2], 2 * self.m)

    def feasible(self, actions, tol=1e-6):
        """Whether embedded actions satisfy the domain within tolerance."""
        a = np.asarray(actions, dtype=float).reshape(-1, self.grid.n_regions, 2, self.m)
        if np.min(a) < -tol:
            return False
        if np.max(np.abs(a.sum(axis=-1) - 1.0)) > tol:
            return False
        invalid_mass = np.where(self.valid[None, :, None, :], 0.0, np.abs(a))
        return bool(np.max(invalid_mass, initial=0.0) <= tol)

    def to_region_actions(self, embedded):
        """Compact one embedded (N, 2m) action into per-region RegionActions."""
        a = np.asarray(embedded, dtype=float).reshape(self.grid.n_regions, 2, self.m)
        actions = []
        for i, nb in enumerate(self.grid.neighbors):
            slots = list(range(len(nb))) + [self.m - 1]
            actions.append(RegionAction(p=a[i, 0, slots], q=a[i, 1, slots]))
        return actions

    def embed(self, region_actions):
        """Inverse of :meth:`to_region_actions`."""
        n = self.grid.n_regions
        out = np.zeros((n, 2, self.m))
        for i, action in enumerate(region_actions):
            p, q = action
            deg = len(self.grid.neighbors[i])
            out[i, 0, :deg], out[i, 0, self.m - 1] = p[:deg], p[deg]
            out[i, 1, :deg], out[i, 1, self.m - 1] = q[:deg], q[deg]
        return out.reshape(n, 2 * self.m)
