import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evbalance.errors import ConvergenceError, ValidationError
from evbalance.projection import (Box, HPolytope, SimplexProduct,
                                  dykstra_project, lp_vertex_argmax,
                                  project_box, project_halfspace,
                                  project_simplex)


def brute_force_simplex_projection(a, grid_steps=2001):
    """Independent oracle for 2-d simplex projection: scan the segment
    (t, 1-t) for the closest point."""
    ts = np.linspace(0.0, 1.0, grid_steps)
    points = np.stack([ts, 1.0 - ts], axis=1)
    dists = np.linalg.norm(points - np.asarray(a), axis=1)
    return points[np.argmin(dists)]


class TestHalfspace:
    def test_interior_point_unchanged(self):
        out = project_halfspace([0.0, 0.0], [1.0, 1.0], 1.0)
        assert np.allclose(out, [0.0, 0.0])

    def test_exterior_point_hand_case(self):
        # residual 1 split by |c|^2 = 2: (2,0) -> (1.5, -0.5)
        out = project_halfspace([2.0, 0.0], [1.0, 1.0], 1.0)
        assert np.allclose(out, [1.5, -0.5])
        assert np.isclose(np.dot([1.0, 1.0], out), 1.0)

    def test_boundary_fixed_point(self):
        out = project_halfspace([0.25, 0.75], [1.0, 1.0], 1.0)
        assert np.allclose(out, [0.25, 0.75])

    def test_zero_normal_rejected(self):
        with pytest.raises(ValidationError):
            project_halfspace([1.0], [0.0], 1.0)


class TestSimplex:
    def test_fixed_point(self):
        a = np.array([0.2, 0.5, 0.3])
        assert np.allclose(project_simplex(a), a)

    def test_uniform_shift_hand_case(self):
        assert np.allclose(project_simplex([0.8, 0.8]), [0.5, 0.5])

    def test_far_negative_symmetric(self):
        assert np.allclose(project_simplex([-5.0, -5.0]), [0.5, 0.5])

    def test_threshold_hand_case(self):
        assert np.allclose(project_simplex([1.5, -0.3, 0.1]), [1.0, 0.0, 0.0])

    def test_matches_brute_force_oracle_2d(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = rng.uniform(-3, 3, size=2)
            fast = project_simplex(a)
            slow = brute_force_simplex_projection(a)
            assert np.linalg.norm(fast - slow) < 1e-3

    def test_batched_rows(self):
        rng = np.random.default_rng(3)
        batch = rng.normal(size=(40, 5))
        out = project_simplex(batch)
        assert np.allclose(out.sum(axis=1), 1.0)
        assert np.all(out >= 0.0)
        for row_in, row_out in zip(batch, out):
            assert np.allclose(project_simplex(row_in), row_out)

    @settings(deadline=None, max_examples=80)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_output_always_feasible_and_idempotent(self, values):
        out = project_simplex(np.array(values))
        assert np.all(out >= 0.0)
        assert abs(out.sum() - 1.0) < 1e-9
        assert np.allclose(project_simplex(out), out, atol=1e-12)


class TestBox:
    def test_inside_unchanged(self):
        box = Box(lower=[-0.3, -0.2], upper=[0.3, 0.2])
        assert np.allclose(project_box([0.1, -0.1], box), [0.1, -0.1])

    def test_clamp(self):
        box = Box(lower=[-0.3], upper=[0.3])
        assert np.allclose(project_box([0.9], box), [0.3])

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValidationError):
            Box(lower=[1.0], upper=[0.0])


class TestHPolytope:
    def test_witness_must_be_feasible(self):
        with pytest.raises(ValidationError):
            HPolytope(normals=[[1.0, 0.0]], offsets=[0.0], witness=[1.0, 0.0])

    def test_zero_normal_rejected(self):
        with pytest.raises(ValidationError):
            HPolytope(normals=[[0.0, 0.0]], offsets=[1.0], witness=[0.0, 0.0])

    def test_residual(self):
        poly = Box(lower=[0.0], upper=[1.0]).as_hpolytope()
        assert poly.residual(np.array([0.5])) == 0.0
        assert np.isclose(poly.residual(np.array([1.5])), 0.5)


class TestDykstra:
    def test_interior_fixed_point(self):
        poly = SimplexProduct((3,)).as_hpolytope()
        a = np.array([0.2, 0.3, 0.5])
        assert np.allclose(dykstra_project(a, poly, tol=1e-10), a, atol=1e-8)

    def test_simplex_hand_cases(self):
        poly2 = SimplexProduct((2,)).as_hpolytope()
        out = dykstra_project(np.array([0.8, 0.8]), poly2, tol=1e-10)
        assert np.allclose(out, [0.5, 0.5], atol=1e-6)
        poly3 = SimplexProduct((3,)).as_hpolytope()
        out = dykstra_project(np.array([1.5, -0.3, 0.1]), poly3, tol=1e-10)
        assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-6)

    def test_agrees_with_simplex_oracle(self):
        rng = np.random.default_rng(11)
        for dim in (2, 3, 4, 5, 6):
            poly = SimplexProduct((dim,)).as_hpolytope()
            for _ in range(20):
                a = rng.uniform(-2, 2, size=dim)
                assert np.linalg.norm(
                    dykstra_project(a, poly, tol=1e-10) - project_simplex(a)
                ) < 1e-6

    def test_agrees_with_box_oracle(self):
        rng = np.random.default_rng(13)
        box = Box(lower=[-0.3, -0.2, -0.2], upper=[0.3, 0.2, 0.2])
        poly = box.as_hpolytope()
        for _ in range(20):
            a = rng.uniform(-1, 1, size=3)
            assert np.linalg.norm(
                dykstra_project(a, poly, tol=1e-10) - project_box(a, box)
            ) < 1e-8

    def test_non_expansive(self):
        rng = np.random.default_rng(17)
        poly = SimplexProduct((4,)).as_hpolytope()
        for _ in range(20):
            a, b = rng.uniform(-2, 2, size=(2, 4))
            pa = dykstra_project(a, poly, tol=1e-10)
            pb = dykstra_project(b, poly, tol=1e-10)
            assert np.linalg.norm(pa - pb) <= np.linalg.norm(a - b) + 2e-10

    def test_nonconvergence_error_carries_state(self):
        poly = SimplexProduct((6,)).as_hpolytope()
        with pytest.raises(ConvergenceError) as err:
            dykstra_project(np.full(6, 40.0), poly, tol=1e-14, max_iter=1)
        assert err.value.last_iterate is not None
        assert err.value.residual is not None

    def test_bad_tolerance_rejected(self):
        poly = SimplexProduct((2,)).as_hpolytope()
        with pytest.raises(ValidationError):
            dykstra_project(np.zeros(2), poly, tol=0.0)


class TestVertexArgmax:
    def test_simplex_picks_best_coefficient(self):
        out = lp_vertex_argmax([0.2, -0.1, 0.7], SimplexProduct((3,)))
        assert np.allclose(out, [0.0, 0.0, 1.0])

    def test_box_sign_rule(self):
        out = lp_vertex_argmax([0.3, -0.2], Box(lower=[-1.0, -1.0], upper=[1.0, 1.0]))
        assert np.allclose(out, [1.0, -1.0])

    def test_tie_rules(self):
        out = lp_vertex_argmax(np.zeros(3), SimplexProduct((3,)))
        assert np.allclose(out, [1.0, 0.0, 0.0])
        out = lp_vertex_argmax(np.zeros(2), Box(lower=[-1.0, 0.0], upper=[1.0, 2.0]))
        assert np.allclose(out, [-1.0, 0.0])

    def test_product_blocks_independent(self):
        out = lp_vertex_argmax([0.0, 1.0, 3.0, -1.0, -2.0],
                               SimplexProduct((3, 2)))
        assert np.allclose(out, [0.0, 0.0, 1.0, 1.0, 0.0])

    def test_attains_max_over_enumerated_vertices(self):
        rng = np.random.default_rng(23)
        domain = SimplexProduct((3, 2))
        for _ in range(30):
            g = rng.normal(size=5)
            best = lp_vertex_argmax(g, domain)
            # enumerate all 3 x 2 one-hot combinations
            values = []
            for i in range(3):
                for j in range(2):
                    v = np.zeros(5)
                    v[i] = 1.0
                    v[3 + j] = 1.0
                    values.append(g @ v)
            assert g @ best >= max(values) - 1e-12

    def test_nonfinite_rejected(self):
        with pytest.raises(ValidationError):
            lp_vertex_argmax([np.inf, 0.0], SimplexProduct((2,)))
