import math

import numpy as np
import pytest

from resilient_swarm.control import (
    CbfWeights,
    ConstraintRow,
    InfeasibleConstraintError,
    InputBox,
    LocalView,
    broadcast_degree_cbf,
    cbf_qp_controller,
    collision_cbf,
    composed_cbf,
    constraint_row,
    degree_cbf,
    local_phi,
    qp_control,
    solve_box_qp,
)
from resilient_swarm.graph import AdjacencyParams, GraphSnapshot, adjacency_weight, build_graph

from oracles import central_difference, kkt_box_qp, random_geometric_positions

P11 = AdjacencyParams(q1=2.05, q2=1.0, radius=3.0, n=11)
W1 = CbfWeights(w_r=1.0, w_c=1.0, gamma=1.0)


def make_view(self_id, positions, c_table, f_prime, params, weights, delta_d=0.3, radius=None):
    """Local view of one robot within a global configuration (sampled self level)."""
    radius = params.radius if radius is None else radius
    pos = np.asarray(positions, dtype=float)
    nbr_ids = [
        j
        for j in range(len(pos))
        if j != self_id and float(np.linalg.norm(pos[j] - pos[self_id])) <= radius
    ]
    return LocalView(
        self_id=self_id,
        self_position=pos[self_id],
        neighbor_positions=tuple((j, pos[j]) for j in nbr_ids),
        neighbor_connectivity=tuple((j, float(c_table[j])) for j in nbr_ids),
        self_connectivity=float(c_table[self_id]),
        f_prime=f_prime,
        delta_d=delta_d,
        params=params,
        weights=weights,
    )


def random_config(rng, n=None, f_prime=None):
    n = n or int(rng.integers(4, 10))
    params = AdjacencyParams.for_swarm(n, 3.0)
    positions = random_geometric_positions(
        rng, n, radius_disc=1.3, min_spacing=0.35, boundary_margin=1e-3, radius=3.0
    )
    f_prime = f_prime if f_prime is not None else int(rng.integers(1, n))
    c_table = rng.uniform(f_prime - 2.0, f_prime + 4.0, size=n)
    weights = CbfWeights(w_r=rng.uniform(0.5, 4.0), w_c=rng.uniform(1.0, 25.0), gamma=rng.uniform(0.1, 2.0))
    return positions, c_table, f_prime, params, weights


class TestWeightsAndBox:
    def test_weights_must_be_positive(self):
        with pytest.raises(ValueError):
            CbfWeights(w_r=0.0)
        with pytest.raises(ValueError):
            CbfWeights(gamma=-1.0)

    def test_box_must_contain_zero(self):
        with pytest.raises(ValueError):
            InputBox(lower=(0.5, -1.0), upper=(1.0, 1.0))
        box = InputBox.symmetric(1.5, 2)
        assert box.contains([0.0, 0.0])
        assert np.array_equal(box.clip([9.0, -9.0]), [1.5, -1.5])

    def test_asymmetric_box_allowed_if_zero_inside(self):
        box = InputBox(lower=(-1.5, -1.5), upper=(15.0, 1.5))
        assert box.contains([10.0, 0.0])


class TestLocalViewValidation:
    def test_mismatched_ids_rejected(self):
        with pytest.raises(ValueError):
            LocalView(
                self_id=0,
                self_position=np.zeros(2),
                neighbor_positions=((1, np.ones(2)),),
                neighbor_connectivity=((2, 5.0),),
                self_connectivity=5.0,
                f_prime=1,
                delta_d=0.3,
                params=P11,
                weights=W1,
            )

    def test_self_cannot_be_neighbor(self):
        with pytest.raises(ValueError):
            LocalView(
                self_id=0,
                self_position=np.zeros(2),
                neighbor_positions=((0, np.ones(2)),),
                neighbor_connectivity=((0, 5.0),),
                self_connectivity=5.0,
                f_prime=1,
                delta_d=0.3,
                params=P11,
                weights=W1,
            )


class TestBarrierValues:
    def test_degree_cbf_isolated(self):
        view = make_view(0, np.array([[0.0, 0.0], [50.0, 0.0]]), [0.0, 0.0], 7, P11, W1)
        assert degree_cbf(view) == -7.0

    def test_degree_cbf_eight_close_neighbors(self):
        pos = np.vstack([np.zeros(2), [[1e-7 * (j + 1), 0.0] for j in range(8)]])
        view = make_view(0, pos, np.zeros(9), 7, AdjacencyParams(q1=2.05, q2=1.0, radius=3.0, n=9), W1)
        assert degree_cbf(view) == pytest.approx(8 * 1.025 - 7, abs=1e-9)

    def test_degree_cbf_boundary_neighbors(self):
        angles = np.linspace(0.0, 2 * math.pi, 7, endpoint=False)
        pos = np.vstack([np.zeros(2), 3.0 * np.column_stack([np.cos(angles), np.sin(angles)])])
        params = AdjacencyParams.for_swarm(8, 3.0)
        view = make_view(0, pos, np.zeros(8), 7, params, W1)
        assert degree_cbf(view) == pytest.approx(-7.0, abs=1e-12)

    def test_broadcast_degree_cbf(self):
        assert broadcast_degree_cbf(7.0, 7) == 0.0
        assert broadcast_degree_cbf(9.5, 7) == 2.5

    def test_broadcast_matches_true_value_for_truthful_level(self):
        rng = np.random.default_rng(6)
        positions, _, f_prime, params, weights = random_config(rng, n=6)
        g = build_graph(positions, params.radius)
        i = 2
        truthful = math.fsum(adjacency_weight(positions[i], positions[j], params) for j in g.neighbors[i])
        c = np.zeros(6)
        c[i] = truthful
        view = make_view(i, positions, c, f_prime, params, weights)
        assert broadcast_degree_cbf(truthful, f_prime) == pytest.approx(degree_cbf(view), abs=1e-12)

    def test_collision_cbf(self):
        assert collision_cbf([0.0, 0.0], [0.3, 0.0], 0.3) == pytest.approx(0.0)
        assert collision_cbf([0.0, 0.0], [1.0, 0.0], 0.3) == pytest.approx(0.91)
        assert collision_cbf([0.0, 0.0], [0.0, 0.0], 0.3) == pytest.approx(-0.09)


class TestComposedBarrier:
    def test_approaches_one_with_huge_margins(self):
        g = GraphSnapshot.from_edges(3, [])
        pos = np.array([[0.0, 0.0], [100.0, 0.0], [0.0, 100.0]])
        params = AdjacencyParams.for_swarm(3, 3.0)
        value = composed_cbf(pos, g, params, W1, 1, 0.3, connectivity=[500.0, 500.0, 500.0])
        assert value == pytest.approx(1.0, abs=1e-12)

    def test_single_zero_margin_forces_nonpositive(self):
        g = GraphSnapshot.from_edges(2, [])
        pos = np.array([[0.0, 0.0], [100.0, 0.0]])
        params = AdjacencyParams.for_swarm(2, 3.0)
        value = composed_cbf(pos, g, params, W1, 1, 0.3, connectivity=[1.0, 999.0])
        assert value <= 0.0

    def test_two_node_closed_form(self):
        g = GraphSnapshot.from_edges(2, [])
        pos = np.array([[0.0, 0.0], [10.0, 0.0]])
        params = AdjacencyParams.for_swarm(2, 3.0)
        w_r = 2.0
        c = 1.0 + math.log(4.0) / w_r
        value = composed_cbf(pos, g, params, CbfWeights(w_r=w_r), 1, 0.3, connectivity=[c, c])
        assert value == pytest.approx(0.5, abs=1e-12)

    def test_true_margins_used_without_connectivity(self):
        rng = np.random.default_rng(17)
        positions, _, f_prime, params, weights = random_config(rng, n=5)
        g = build_graph(positions, params.radius)
        levels = [
            math.fsum(adjacency_weight(positions[i], positions[j], params) for j in g.neighbors[i])
            for i in range(5)
        ]
        via_truth = composed_cbf(positions, g, params, weights, f_prime, 0.3)
        via_levels = composed_cbf(positions, g, params, weights, f_prime, 0.3, connectivity=levels)
        assert via_truth == pytest.approx(via_levels, abs=1e-12)


class TestLocalPhi:
    def test_single_zero_broadcast_margin_dominates(self):
        # one neighbor reporting exactly the threshold already uses 1/(F'+1) >= 1/n
        pos = np.array([[0.0, 0.0], [1.0, 0.0]])
        view = make_view(0, pos, np.array([10.0, 7.0]), 7, P11, W1)
        assert local_phi(view) < 0.0

    def test_limit_is_one_over_n(self):
        # huge broadcast margins and far-apart members drive the barrier to 1/n
        view = LocalView(
            self_id=0,
            self_position=np.zeros(2),
            neighbor_positions=((1, np.array([60.0, 0.0])), (2, np.array([0.0, 60.0]))),
            neighbor_connectivity=((1, 1e6), (2, 1e6)),
            self_connectivity=1e6,
            f_prime=7,
            delta_d=0.3,
            params=P11,
            weights=W1,
        )
        assert local_phi(view) == pytest.approx(1.0 / 11.0, abs=1e-9)

    def test_frozen_arithmetic_example(self):
        # eight closed-neighborhood margins of exactly e^-3 each and no collision terms
        angles = np.linspace(0.0, 2 * math.pi, 7, endpoint=False)
        pos = np.vstack([np.zeros(2), 60.0 * np.column_stack([np.cos(angles), np.sin(angles)])])
        c = np.full(8, 10.0)  # h_hat = 3 for every member
        view = LocalView(
            self_id=0,
            self_position=pos[0],
            neighbor_positions=tuple((j, pos[j]) for j in range(1, 8)),
            neighbor_connectivity=tuple((j, 10.0) for j in range(1, 8)),
            self_connectivity=10.0,
            f_prime=7,
            delta_d=0.3,
            params=P11,
            weights=W1,
        )
        assert local_phi(view) == pytest.approx(1.0 / 11.0 - math.exp(-3.0), abs=1e-9)


class TestConstraintRow:
    def test_boundary_neighbors_leave_only_collision_terms(self):
        # neighbors at exactly the radius: zero weight-gradient, so only
        # collision terms survive in the constraint normal
        pos = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [-3.0, 0.0]])
        params = AdjacencyParams.for_swarm(4, 3.0)
        view = make_view(0, pos, np.full(4, 3.0), 2, params, W1)
        assert view.neighbor_ids == (1, 2, 3)
        row = constraint_row(view)
        collision_only = np.zeros(2)
        for j in range(1, 4):
            e_col = math.exp(-W1.w_c * collision_cbf(pos[0], pos[j], 0.3))
            collision_only += W1.w_c * e_col * 2.0 * (pos[0] - pos[j])
        assert np.allclose(row.normal, collision_only, atol=1e-15)

    def test_two_robot_antisymmetry(self):
        pos = np.array([[0.4, -0.2], [1.1, 0.6]])
        params = AdjacencyParams.for_swarm(2, 3.0)
        c = np.array([5.0, 5.0])
        row0 = constraint_row(make_view(0, pos, c, 1, params, W1))
        row1 = constraint_row(make_view(1, pos, c, 1, params, W1))
        assert np.allclose(row0.normal, -row1.normal, atol=1e-12)

    def test_rhs_is_scaled_barrier(self):
        rng = np.random.default_rng(19)
        positions, c_table, f_prime, params, weights = random_config(rng)
        view = make_view(0, positions, c_table, f_prime, params, weights)
        row = constraint_row(view)
        assert row.rhs == pytest.approx(-weights.gamma * local_phi(view), abs=1e-12)

    def test_matches_finite_differences(self):
        # gradient of the frozen-weight potential: broadcast factors and the
        # neighbor set are held fixed while this robot's position moves
        rng = np.random.default_rng(23)
        for _ in range(30):
            positions, c_table, f_prime, params, weights = random_config(rng)
            i = int(rng.integers(0, len(positions)))
            view = make_view(i, positions, c_table, f_prime, params, weights)
            nbr_ids = view.neighbor_ids
            if not nbr_ids:
                continue
            e_hat = {j: math.exp(-weights.w_r * (c_table[j] - f_prime)) for j in nbr_ids}
            e_self = math.exp(-weights.w_r * (c_table[i] - f_prime))

            def potential(x_i):
                total = 0.0
                for j in nbr_ids:
                    a = adjacency_weight(x_i, positions[j], params)
                    total += weights.w_r * (e_self + e_hat[j]) * a
                    total -= math.exp(-weights.w_c * collision_cbf(x_i, positions[j], view.delta_d))
                return total

            fd = central_difference(potential, positions[i], step=1e-5)
            row = constraint_row(view)
            scale = max(1.0, float(np.linalg.norm(row.normal)))
            assert np.linalg.norm(row.normal - fd) / scale < 1e-5


class TestSolveBoxQp:
    def test_feasible_desired_velocity_is_returned(self):
        row = ConstraintRow(normal=np.array([1.0, 0.0]), rhs=-5.0)
        box = InputBox.symmetric(2.0, 2)
        u = solve_box_qp(np.array([0.5, -0.25]), row, box)
        assert np.array_equal(u, [0.5, -0.25])

    def test_projection_onto_halfplane(self):
        row = ConstraintRow(normal=np.array([0.0, 1.0]), rhs=1.0)
        u = solve_box_qp(np.array([1.0, 0.0]), row, InputBox.symmetric(2.0, 2))
        assert np.allclose(u, [1.0, 1.0], atol=1e-12)

    def test_zero_always_feasible_with_nonpositive_rhs(self):
        rng = np.random.default_rng(29)
        box = InputBox.symmetric(1.5, 2)
        for _ in range(200):
            normal = rng.normal(size=2)
            rhs = -abs(rng.uniform(0.0, 2.0))
            u = solve_box_qp(rng.uniform(-3, 3, size=2), ConstraintRow(normal=normal, rhs=rhs), box)
            assert float(normal @ u) >= rhs - 1e-9
            assert box.contains(u, tol=1e-12)

    def test_infeasible_raises(self):
        row = ConstraintRow(normal=np.array([1.0, 0.0]), rhs=10.0)
        with pytest.raises(InfeasibleConstraintError):
            solve_box_qp(np.zeros(2), row, InputBox.symmetric(1.0, 2))

    def test_zero_normal(self):
        box = InputBox.symmetric(1.0, 2)
        u = solve_box_qp(np.array([5.0, 0.2]), ConstraintRow(normal=np.zeros(2), rhs=-1.0), box)
        assert np.array_equal(u, [1.0, 0.2])
        with pytest.raises(InfeasibleConstraintError):
            solve_box_qp(np.zeros(2), ConstraintRow(normal=np.zeros(2), rhs=1.0), box)

    def test_matches_kkt_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(2000)\
                :
            ud = rng.uniform(-3.0, 3.0, size=2)
            scale = 10.0 ** rng.uniform(-3, 0.5)
            normal = rng.normal(size=2)
            normal = normal / np.linalg.norm(normal) * scale
            if rng.uniform() < 0.02:
                normal = np.zeros(2)
            rhs = float(rng.uniform(-2.0, 2.0))
            lo = rng.uniform(-2.0, -0.2, size=2)
            hi = rng.uniform(0.2, 2.0, size=2)
            box = InputBox(lower=tuple(lo), upper=tuple(hi))
            expected = kkt_box_qp(ud, normal, rhs, lo, hi)
            try:
                u = solve_box_qp(ud, ConstraintRow(normal=normal, rhs=rhs), box)
            except InfeasibleConstraintError:
                assert expected is None
                continue
            assert expected is not None
            assert np.max(np.abs(u - expected)) < 1e-6

    def test_three_dimensional_instances(self):
        rng = np.random.default_rng(37)
        for _ in range(300):
            ud = rng.uniform(-2.0, 2.0, size=3)
            normal = rng.normal(size=3)
            rhs = float(rng.uniform(-1.5, 1.5))
            lo = rng.uniform(-1.5, -0.2, size=3)
            hi = rng.uniform(0.2, 1.5, size=3)
            box = InputBox(lower=tuple(lo), upper=tuple(hi))
            expected = kkt_box_qp(ud, normal, rhs, lo, hi)
            try:
                u = solve_box_qp(ud, ConstraintRow(normal=normal, rhs=rhs), box)
            except InfeasibleConstraintError:
                assert expected is None
                continue
            assert expected is not None
            assert np.max(np.abs(u - expected)) < 1e-6

    def test_deterministic(self):
        row = ConstraintRow(normal=np.array([0.3, -0.7]), rhs=0.42)
        box = InputBox.symmetric(1.5, 2)
        first = solve_box_qp(np.array([1.2, 0.8]), row, box)
        second = solve_box_qp(np.array([1.2, 0.8]), row, box)
        assert first.tobytes() == second.tobytes()


class TestQpController:
    def test_slack_constraint_returns_desired(self):
        rng = np.random.default_rng(41)
        positions, _, _, params, _ = random_config(rng, n=5)
        c_table = np.full(5, 50.0)  # everyone reports huge margins
        weights = CbfWeights(w_r=1.0, w_c=20.0, gamma=1.0)
        view = make_view(0, positions, c_table, 2, params, weights)
        u_des = np.array([0.3, -0.2])
        decision = qp_control(view, u_des, InputBox.symmetric(1.5, 2))
        assert not decision.fallback and not decision.void_constraint
        assert np.array_equal(decision.u, u_des)
        assert np.array_equal(cbf_qp_controller(view, u_des, InputBox.symmetric(1.5, 2)), u_des)

    def test_zero_desired_stays_put_when_barrier_nonnegative(self):
        rng = np.random.default_rng(43)
        for _ in range(20):
            positions, c_table, f_prime, params, weights = random_config(rng)
            view = make_view(0, positions, c_table, f_prime, params, weights)
            decision = qp_control(view, np.zeros(2), InputBox.symmetric(1.5, 2))
            if decision.phi >= 0.0:
                assert np.array_equal(decision.u, np.zeros(2))

    def test_active_constraint_reduces_outward_pull(self):
        # two robots near the degree boundary: pulling apart gets projected
        params = AdjacencyParams.for_swarm(2, 3.0)
        weights = CbfWeights(w_r=12.0, w_c=5.0, gamma=1.0)
        pos = np.array([[0.0, 0.0], [2.72, 0.0]])
        level = adjacency_weight(pos[0], pos[1], params)
        c = np.array([level, level])
        view = make_view(0, pos, c, 1, params, weights)
        row = constraint_row(view)
        u_des = np.array([-1.0, 0.0])  # straight away from the partner
        decision = qp_control(view, u_des, InputBox.symmetric(1.5, 2))
        assert not decision.fallback
        assert float(row.normal @ decision.u) >= row.rhs - 1e-12
        assert decision.u[0] > u_des[0]  # outward component reduced

    def test_fallback_on_violated_barrier_with_degenerate_normal(self):
        # no neighbors: zero normal and a violated barrier mean the robot stops
        pos = np.array([[0.0, 0.0], [100.0, 0.0]])
        view = make_view(0, pos, np.array([0.0, 0.0]), 7, P11, W1)
        decision = qp_control(view, np.array([1.0, 1.0]), InputBox.symmetric(1.5, 2))
        assert decision.fallback and decision.void_constraint
        assert np.array_equal(decision.u, np.zeros(2))

    def test_fallback_applies_most_restoring_velocity(self):
        rng = np.random.default_rng(47)
        positions, c_table, f_prime, params, _ = random_config(rng, n=5)
        weights = CbfWeights(w_r=3.0, w_c=20.0, gamma=1e6)  # force infeasibility via huge rhs
        c_table = np.full(5, f_prime - 1.0)  # violated margins everywhere
        view = make_view(0, positions, c_table, f_prime, params, weights)
        decision = qp_control(view, np.zeros(2), InputBox.symmetric(1.5, 2))
        if decision.fallback and not decision.void_constraint:
            expected = np.where(decision.row.normal > 0, 1.5, np.where(decision.row.normal < 0, -1.5, 0.0))
            assert np.array_equal(decision.u, expected)

    def test_output_continuity_under_small_perturbations(self):
        rng = np.random.default_rng(53)
        checked = 0
        while checked < 10:
            base_pos, c_table, f_prime, params, weights = random_config(rng, n=6)
            box = InputBox.symmetric(1.5, 2)
            u_des = np.array([0.7, -0.4])
            view = make_view(0, base_pos, c_table, f_prime, params, weights)
            base = qp_control(view, u_des, box)
            if base.fallback:
                continue
            checked += 1
            for _ in range(10):
                bump = rng.normal(size=base_pos.shape) * 1e-6
                view2 = make_view(0, base_pos + bump, c_table, f_prime, params, weights)
                out = qp_control(view2, u_des, box)
                assert np.linalg.norm(out.u - base.u) < 1e-3


class TestDecisionDump:
    def test_csv_schema(self, tmp_path):
        from resilient_swarm.control import write_decision_csv

        rng = np.random.default_rng(67)
        positions, c_table, f_prime, params, weights = random_config(rng, n=5)
        box = InputBox.symmetric(1.5, 2)
        rows = []
        for i in range(5):
            u_des = rng.uniform(-1, 1, size=2)
            rows.append((0, i, u_des, qp_control(make_view(i, positions, c_table, f_prime, params, weights), u_des, box)))
        path = tmp_path / "decisions.csv"
        write_decision_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,robot,phi,normal0,normal1,u_des0,u_des1,u0,u1,fallback,void_constraint"
        assert len(lines) == 6

    def test_empty_rows_rejected(self, tmp_path):
        from resilient_swarm.control import write_decision_csv

        with pytest.raises(ValueError):
            write_decision_csv(tmp_path / "x.csv", [])


class TestDecompositionAndAggregation:
    def test_global_barrier_dominates_local_sum(self):
        rng = np.random.default_rng(59)
        for _ in range(100):
            n = int(rng.integers(4, 11))
            f = int(rng.integers(0, (n - 1) // 2 + 1))
            f_prime = f + n // 2
            params = AdjacencyParams.for_swarm(n, 3.0)
            positions = random_geometric_positions(rng, n, 1.2, 0.3)  # complete graph
            g = build_graph(positions, params.radius)
            assert min(g.degrees()) == n - 1
            c_table = rng.uniform(f_prime - 2.0, f_prime + 4.0, size=n)
            weights = CbfWeights(w_r=rng.uniform(0.5, 4.0), w_c=rng.uniform(1.0, 25.0))
            phi_global = composed_cbf(positions, g, params, weights, f_prime, 0.3, connectivity=c_table)
            phi_sum = sum(
                local_phi(make_view(i, positions, c_table, f_prime, params, weights)) for i in range(n)
            )
            assert phi_global >= phi_sum - 1e-12

    def test_per_robot_constraints_imply_aggregate(self):
        rng = np.random.default_rng(61)
        box = InputBox.symmetric(1.5, 2)
        for _ in range(30):
            n = int(rng.integers(4, 9))
            f = int(rng.integers(0, (n - 1) // 2 + 1))
            f_prime = f + n // 2
            params = AdjacencyParams.for_swarm(n, 3.0)
            positions = random_geometric_positions(rng, n, 1.2, 0.3)
            g = build_graph(positions, params.radius)
            c_table = rng.uniform(f_prime - 0.5, f_prime + 4.0, size=n)
            weights = CbfWeights(w_r=2.0, w_c=10.0)
            total_lhs = 0.0
            total_phi = 0.0
            feasible = True
            for i in range(n):
                view = make_view(i, positions, c_table, f_prime, params, weights)
                decision = qp_control(view, rng.uniform(-1, 1, size=2), box)
                if decision.fallback:
                    feasible = False
                    break
                total_lhs += float(decision.row.normal @ decision.u)
                total_phi += decision.phi
            if not feasible:
                continue
            phi_global = composed_cbf(positions, g, params, weights, f_prime, 0.3, connectivity=c_table)
            assert total_lhs >= -weights.gamma * total_phi - 1e-9
            assert total_lhs >= -weights.gamma * phi_global - 1e-9
