"""Euclidean projection onto the convex action domains.

The dispatch action of a region lives on a product of probability simplices,
the perturbation action of an adversary in a box.  Both admit closed-form
projections (sort-and-threshold for the simplex, clamping for the box) which
are used as fast paths and as oracles.  Arbitrary intersections of half-spaces
are handled by Dykstra's alternating projection, whose iterates converge to
the exact Euclidean projection because every half-space is closed and convex.

All functions are stateless and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError


def project_halfspace(a, c, e):
    """Project ``a`` onto the half-space ``{x : c.x <= e}``.

    Interior points are returned unchanged; exterior points land on the
    boundary hyperplane:  a - ((c.a - e) / |c|^2) c.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    nrm2 = float(c @ c)
    if nrm2 == 0.0:
        raise ValidationError("half-space normal vector must be nonzero")
    slack = float(c @ a) - float(e)
    if slack <= 0.0:
        return a.copy()
    return a - (slack / nrm2) * c


def project_simplex(a):
    """Exact Euclidean projection onto the probability simplex.

    Sort-and-threshold closed form; operates along the last axis so batches
    of points can be projected in one call.  Output is nonnegative and sums
    to 1 along the last axis.
    """
    a = np.asarray(a, dtype=float)
    if a.shape[-1] < 1:
        raise ValidationError("simplex projection needs at least one coordinate")
    u = np.sort(a, axis=-1)[..., ::-1]
    css = np.cumsum(u, axis=-1) - 1.0
    ks = np.arange(1, a.shape[-1] + 1, dtype=float)
    # rho = number of indices with u_k > (cumsum_k - 1) / k; always >= 1
    rho = np.count_nonzero(u * ks > css, axis=-1)
    theta = np.take_along_axis(css, rho[..., None] - 1, axis=-1) / rho[..., None]
    return np.maximum(a - theta, 0.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{x : lower <= x <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float))
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lower.shape != upper.shape:
            raise ValidationError("box bounds must have matching shapes")
        if np.any(lower > upper):
            raise ValidationError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @property
    def dim(self):
        return self.lower.shape[0]

    def as_hpolytope(self):
        n = self.dim
        eye = np.eye(n)
        normals = np.vstack([eye, -eye])
        offsets = np.concatenate([self.upper, -self.lower])
        return HPolytope(normals, offsets, witness=0.5 * (self.lower + self.upper))


def project_box(a, box: Box):
    """Elementwise clamp of ``a`` into the box (exact projection)."""
    a = np.asarray(a, dtype=float)
    return np.clip(a, box.lower, box.upper)


@dataclass(frozen=True)
class SimplexProduct:
    """Product of probability simplices, one block per entry of ``blocks``.

    The region dispatch domain is the special case of two equal-length
    blocks (vacant dispatch, low-battery dispatch).
    """

    blocks: tuple

    def __post_init__(self):
        blocks = tuple(int(b) for b in self.blocks)
        if len(blocks) == 0 or any(b < 1 for b in blocks):
            raise ValidationError("simplex blocks must be positive lengths")
        object.__setattr__(self, "blocks", blocks)

    @property
    def dim(self):
        return sum(self.blocks)

    def split(self, a):
        a = np.asarray(a, dtype=float)
        out = []
        k = 0
        for b in self.blocks:
            out.append(a[..., k:k + b])
            k += b
        return out

    def project(self, a):
        return np.concatenate(
            [project_simplex(part) for part in self.split(a)], axis=-1
        )

    def as_hpolytope(self):
        # Each block contributes nonnegativity rows plus the equality sum = 1
        # written as a pair of opposing inequalities.
        n = self.dim
        rows = []
        offs = []
        k = 0
        for b in self.blocks:
            for j in range(b):
                r = np.zeros(n)
                r[k + j] = -1.0
                rows.append(r)
                offs.append(0.0)
            ones = np.zeros(n)
            ones[k:k + b] = 1.0
            rows.append(ones)
            offs.append(1.0)
            rows.append(-ones)
            offs.append(-1.0)
            k += b
        witness = np.concatenate([np.full(b, 1.0 / b) for b in self.blocks])
        return HPolytope(np.array(rows), np.array(offs), witness=witness)


@dataclass(frozen=True)
class HPolytope:
    """Intersection of half-spaces ``{x : normals[j].x <= offsets[j]}``.

    A feasible ``witness`` point is required; it proves the intersection is
    nonempty, which is what guarantees Dykstra's iterates converge.
    """

    normals: np.ndarray
    offsets: np.ndarray
    witness: np.ndarray

    def __post_init__(self):
        normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        witness = np.atleast_1d(np.asarray(self.witness, dtype=float))
        if normals.shape[0] != offsets.shape[0]:
            raise ValidationError("one offset per half-space row is required")
        if normals.shape[0] < 1:
            raise ValidationError("at least one half-space row is required")
        if witness.shape[0] != normals.shape[1]:
            raise ValidationError("witness dimension does not match rows")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0.0):
            raise ValidationError("half-space normal vectors must be nonzero")
        if np.max(normals @ witness - offsets) > 1e-9:
            raise ValidationError("witness point violates the half-spaces")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "witness", witness)

    @property
    def dim(self):
        return self.normals.shape[1]

    def residual(self, a):
        """Largest constraint violation of ``a`` (0 when feasible)."""
        a = np.asarray(a, dtype=float)
        return float(np.max(np.maximum(self.normals @ a - self.offsets, 0.0)))


def dykstra_project(a, poly: HPolytope, tol=1e-8, max_iter=10_000):
    """Dykstra's alternating projection onto an intersection of half-spaces.

    Cycles through the rows applying the correction-term recursion

        a_j = P_j(a_{j-1} - I_j),   I_j <- a_j - (a_{j-1} - I_j),

    starting from the input point with all corrections zero.  Stops once a
    full cycle moves neither the iterate nor any correction term by more
    than ``tol`` in any coordinate; the iterate alone can sit still for a
    cycle while the corrections are still drifting, so both must settle.
    Raises :class:`ConvergenceError` (carrying the last iterate and its
    constraint residual) if ``max_iter`` cycles pass first.
    """
    if tol <= 0.0:
        raise ValidationError("tolerance must be positive")
    x = np.asarray(a, dtype=float).copy()
    if x.shape[0] != poly.dim:
        raise ValidationError("point dimension does not match the polytope")
    u = poly.normals.shape[0]
    corrections = np.zeros((u, poly.dim))
    nrm2 = np.einsum("ij,ij->i", poly.normals, poly.normals)
    for _ in range(max_iter):
        x_prev = x.copy()
        corr_prev = corrections.copy()
        for j in range(u):
            y = x - corrections[j]
            slack = poly.normals[j] @ y - poly.offsets[j]
            if slack > 0.0:
                x = y - (slack / nrm2[j]) * poly.normals[j]
            else:
                x = y
            corrections[j] = x - y
        if (np.max(np.abs(x - x_prev)) < tol
                and np.max(np.abs(corrections - corr_prev)) < tol):
            return x
    raise ConvergenceError(
        f"Dykstra projection did not reach tol={tol} in {max_iter} cycles",
        last_iterate=x,
        residual=poly.residual(x),
    )


def lp_vertex_argmax(g, domain):
    """Vertex of ``domain`` maximizing the linear objective ``g . x``.

    Over a simplex block the maximum sits on the one-hot vertex of the
    largest coefficient (ties resolve to the lowest index); over a box each
    coordinate independently picks the upper bound for a strictly positive
    coefficient and the lower bound otherwise.
    """
    g = np.asarray(g, dtype=float)
    if not np.all(np.isfinite(g)):
        raise ValidationError("objective coefficients must be finite")
    if isinstance(domain, Box):
        if g.shape[-1] != domain.dim:
            raise ValidationError("objective dimension does not match the box")
        return np.where(g > 0.0, domain.upper, domain.lower)
    if isinstance(domain, SimplexProduct):
        if g.shape[-1] != domain.dim:
            raise ValidationError("objective dimension does not match the blocks")
        parts = []
        for part in domain.split(g):
            best = np.argmax(part, axis=-1)
            parts.append(np.eye(part.shape[-1])[best])
        return np.concatenate(parts, axis=-1)
    raise ValidationError(f"unsupported domain type {type(domain).__name__}")
