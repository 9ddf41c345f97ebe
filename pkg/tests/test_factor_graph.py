import math

import numpy as np
import pytest

from bimslam import factor_graph as fg
from bimslam.factor_graph import (
    Factor,
    FactorGraph,
    OptConfig,
    UnderConstrainedGaugeError,
    _Linearization,
    huber_cost,
    huber_weight,
    optimize,
    residual_pose_wall,
    residual_relative_pose,
    residual_wall_wall,
    wall_wall_information,
)
from bimslam.geometry import (
    PoseSE3,
    canonicalize_plane,
    minimal_to_plane,
    plane_to_minimal,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    transform_plane,
)

I6 = np.eye(6)
I3 = np.eye(3)


def translate(x, y=0.0, z=0.0):
    return PoseSE3(np.eye(3), [x, y, z])


def plane_x(x):
    return canonicalize_plane([1, 0, 0], -x)


class TestInformation:
    def test_examples(self):
        np.testing.assert_allclose(wall_wall_information(0.5, 0.01), 200 * I3, rtol=1e-14)
        np.testing.assert_allclose(wall_wall_information(1.0, 0.01), 100 * I3, rtol=1e-14)
        np.testing.assert_allclose(wall_wall_information(0.0, 0.01), I3 / (0.01 * 1e-6), rtol=1e-14)

    def test_monotone_in_score(self):
        assert wall_wall_information(0.2, 0.01)[0, 0] > wall_wall_information(0.4, 0.01)[0, 0]


class TestHuber:
    @pytest.mark.parametrize("r,w", [(0.5, 1.0), (2.0, 0.5), (10.0, 0.1), (1.0, 1.0), (0.0, 1.0)])
    def test_examples(self, r, w):
        assert huber_weight(r, 1.0) == pytest.approx(w, abs=1e-15)

    def test_strictly_decreasing(self):
        r = np.linspace(1.01, 50, 200)
        assert np.all(np.diff(huber_weight(r, 1.0)) < 0)

    def test_cost_continuous(self):
        assert huber_cost(1.0, 1.0) == pytest.approx(1.0)
        assert huber_cost(4.0, 1.0) == pytest.approx(3.0)
        assert huber_cost((1 + 1e-9) ** 2, 1.0) == pytest.approx(1.0, abs=1e-8)


class TestResiduals:
    def test_relative_pose_examples(self):
        assert np.all(residual_relative_pose(PoseSE3(), PoseSE3(), PoseSE3()) == 0)
        np.testing.assert_allclose(residual_relative_pose(PoseSE3(), translate(1), translate(1)), 0, atol=1e-15)

    def test_relative_pose_first_order(self, rng):
        for _ in range(20):
            Ti = se3_exp(rng.normal(size=6))
            Tj = se3_exp(rng.normal(size=6))
            Z = se3_compose(se3_inverse(Ti), Tj)
            d = rng.normal(size=6)
            d *= 1e-4 / np.linalg.norm(d)
            r = residual_relative_pose(Ti, se3_compose(Tj, se3_exp(d)), Z)
            assert np.linalg.norm(r - d) < 1e-7

    def test_pose_wall_examples(self):
        w = plane_x(2)
        assert np.all(residual_pose_wall(PoseSE3(), w, w) == 0)
        np.testing.assert_allclose(residual_pose_wall(translate(1), w, plane_x(1)), 0, atol=1e-15)
        r = residual_pose_wall(translate(1), w, plane_x(1.1))
        np.testing.assert_allclose(r, [0, 0, -0.1], atol=1e-15)

    def test_wall_wall_examples(self):
        w = plane_x(2)
        assert np.all(residual_wall_wall(w, w) == 0)
        r = residual_wall_wall(plane_x(2.2), w)
        np.testing.assert_allclose(r, [0, 0, 0.2], atol=1e-15)
        info = wall_wall_information(0.5, 0.01)
        assert float(r @ info @ r) == pytest.approx(8.0, rel=1e-12)

    def test_wall_wall_graph_cost(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_detected_wall(plane_x(2.2))
        g.add_bim_wall(plane_x(2))
        g.add_wall_wall(0, 0, wall_wall_information(0.5, 0.01), robust=False)
        assert g.total_cost() == pytest.approx(8.0, rel=1e-12)


def fd_relative(x0, f, dim, h=1e-6):
    return np.stack([(f(x0 + h * e) - f(x0 - h * e)) / (2 * h) for e in np.eye(dim)], -1)


class TestJacobians:
    """The three residual types against central differences of the scalar references."""

    def linearize(self, g):
        lin = _Linearization(g)
        return lin, lin.residuals(lin.state(), jacobians=True)

    @pytest.mark.parametrize("seed", range(100))
    def test_all_factor_types(self, seed):
        rng = np.random.default_rng(seed)
        T0 = se3_exp(np.concatenate([rng.normal(0, 2, 3), rng.normal(0, 0.8, 3)]))
        T1 = se3_compose(T0, se3_exp(rng.normal(0, 0.4, 6)))
        Z = se3_compose(se3_inverse(T0), se3_compose(T1, se3_exp(rng.normal(0, 0.1, 6))))
        q = np.array([rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(0.5, 4)])
        w = minimal_to_plane(q)
        meas = transform_plane(se3_inverse(T1), minimal_to_plane(q + rng.normal(0, 0.05, 3)))
        bim = minimal_to_plane(q + rng.normal(0, 0.05, 3))

        g = FactorGraph()
        g.add_pose(T0)
        g.add_pose(T1)
        g.add_detected_wall(w)
        g.add_bim_wall(bim)
        g.add_relative_pose(0, 1, Z, I6)
        g.add_pose_wall(1, 0, meas, I3)
        g.add_wall_wall(0, 0, I3)
        _, ((r_rel, J_rel), (r_pw, J_pw), (r_ww, J_ww)) = self.linearize(g)

        def pose_fn(k, f):
            T = (T0, T1)[k]
            return lambda d: f(se3_compose(T, se3_exp(d)))

        f_i = fd_relative(np.zeros(6), pose_fn(0, lambda T: residual_relative_pose(T, T1, Z)), 6)
        f_j = fd_relative(np.zeros(6), pose_fn(1, lambda T: residual_relative_pose(T0, T, Z)), 6)
        f_p = fd_relative(np.zeros(6), pose_fn(1, lambda T: residual_pose_wall(T, w, meas)), 6)
        f_w = fd_relative(q, lambda x: residual_pose_wall(T1, minimal_to_plane(x), meas), 3)
        f_ww = fd_relative(q, lambda x: residual_wall_wall(minimal_to_plane(x), bim), 3)

        def close(A, B):
            assert np.max(np.abs(A - B)) / max(1.0, np.max(np.abs(B))) < 1e-5

        close(J_rel[0, :, :6], f_i)
        close(J_rel[0, :, 6:], f_j)
        close(J_pw[0, :, :6], f_p)
        close(J_pw[0, :, 6:], f_w)
        close(np.asarray(J_ww[0]), f_ww)


class TestOptimize:
    def test_zero_residual_fixed_point(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_pose(translate(1))
        g.add_relative_pose(0, 1, translate(1), I6)
        res = optimize(g)
        assert res.iterations == 0 and res.converged and res.final_cost == 0.0

    def test_two_pose_chain(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_pose(translate(1.1))
        g.add_relative_pose(0, 1, translate(1), I6)
        res = optimize(g)
        assert res.converged
        assert np.linalg.norm(se3_log(se3_compose(se3_inverse(translate(1)), g.poses[1]))) < 1e-8
        assert g.poses[0] is not None and np.all(g.poses[0].matrix() == np.eye(4))

    def test_wall_snaps_to_bim(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_detected_wall(plane_x(2.3))
        g.add_bim_wall(plane_x(2.0))
        g.add_wall_wall(0, 0, wall_wall_information(0.5, 0.01))
        res = optimize(g)
        assert res.converged
        d = plane_to_minimal(g.walls[0]).as_array() - plane_to_minimal(g.bim_walls[0]).as_array()
        assert np.max(np.abs(d)) < 1e-8

    def test_single_plane_leaves_pose_unobserved(self):
        g = FactorGraph()
        g.add_pose(PoseSE3())
        g.add_detected_wall(plane_x(2.3))
        g.add_bim_wall(plane_x(2.0))
        g.add_pose_wall(0, 0, plane_x(2.3), I3)
        g.add_wall_wall(0, 0, I3)
        with pytest.raises(UnderConstrainedGaugeError):
            optimize(g)  # the pose keeps 3 unobserved directions

    def test_no_gauge_raises(self):
        g = FactorGraph()
        g.add_pose(PoseSE3())
        g.add_pose(translate(1))
        g.add_relative_pose(0, 1, translate(1), I6)
        with pytest.raises(UnderConstrainedGaugeError):
            optimize(g)

    def test_empty_graph_raises(self):
        with pytest.raises(ValueError):
            optimize(FactorGraph())

    def test_unobserved_variable_raises(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_pose(translate(1))
        g.add_detected_wall(plane_x(1))
        g.add_relative_pose(0, 1, translate(1.5), I6)
        with pytest.raises(UnderConstrainedGaugeError):
            optimize(g)


def random_world_graph(rng, n_pose=8, n_wall=5, noise=0.0, perturb=0.2):
    """Exact-measurement graph from a random ground truth, returned with the truth."""
    gt = [PoseSE3()]
    for _ in range(n_pose - 1):
        gt.append(se3_compose(gt[-1], se3_exp(np.concatenate([rng.normal(0, 0.5, 3), rng.normal(0, 0.2, 3)]))))
    walls = []
    for _ in range(n_wall):
        az = rng.uniform(-math.pi, math.pi)
        walls.append(canonicalize_plane([math.cos(az), math.sin(az), rng.normal(0, 0.05)], rng.uniform(2, 6)))
    g = FactorGraph()
    g.add_pose(gt[0], fixed=True)
    for T in gt[1:]:
        g.add_pose(se3_compose(T, se3_exp(rng.normal(0, perturb, 6))))
    for w in walls:
        q = plane_to_minimal(w).as_array() + rng.normal(0, perturb, 3) * [1, 0.2, 1]
        g.add_detected_wall(minimal_to_plane(q))
    for k in range(1, n_pose):
        Z = se3_compose(se3_inverse(gt[k - 1]), gt[k])
        if noise:
            Z = se3_compose(Z, se3_exp(rng.normal(0, noise, 6)))
        g.add_relative_pose(k - 1, k, Z, I6 * 100)
    for k, T in enumerate(gt):
        for m, w in enumerate(walls):
            g.add_pose_wall(k, m, transform_plane(se3_inverse(T), w), I3 * 100)
    return g, gt, walls


class TestProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_construct_and_recover(self, seed):
        g, gt, walls = random_world_graph(np.random.default_rng(seed))
        res = optimize(g, OptConfig(max_iterations=200, cost_tolerance=1e-14))
        assert res.converged
        for T, T_gt in zip(g.poses, gt):
            assert np.linalg.norm(se3_log(se3_compose(se3_inverse(T_gt), T))) < 1e-8
        for w, w_gt in zip(g.walls, walls):
            d = plane_to_minimal(w).as_array() - plane_to_minimal(w_gt).as_array()
            assert np.max(np.abs(d)) < 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_cost_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        g, _, walls = random_world_graph(rng, noise=0.05, perturb=0.3)
        for m, w in enumerate(walls):
            g.add_bim_wall(minimal_to_plane(plane_to_minimal(w).as_array() + rng.normal(0, 0.05, 3)))
            g.add_wall_wall(m, m, wall_wall_information(0.3, 0.01))
        res = optimize(g)
        h = np.array(res.cost_history)
        assert np.all(np.diff(h) <= 0)
        assert res.final_cost <= res.initial_cost
        assert res.final_cost == pytest.approx(g.total_cost(), rel=1e-12)

    def test_bim_nodes_bit_identical(self, rng):
        g, _, walls = random_world_graph(rng, noise=0.05)
        for m, w in enumerate(walls):
            g.add_bim_wall(minimal_to_plane(plane_to_minimal(w).as_array() + [0.01, 0.0, 0.05]))
            g.add_wall_wall(m, m, wall_wall_information(0.3, 0.01))
        before = [(p.normal.tobytes(), p.offset) for p in g.bim_walls]
        optimize(g)
        assert [(p.normal.tobytes(), p.offset) for p in g.bim_walls] == before

    def test_outlier_gradient_bounded(self):
        def gradient(offset):
            g = FactorGraph()
            g.add_pose(PoseSE3(), fixed=True)
            g.add_detected_wall(plane_x(2.0 + offset))
            g.add_bim_wall(plane_x(2.0))
            g.add_wall_wall(0, 0, wall_wall_information(0.5, 0.01))
            lin = _Linearization(g)
            _, grad = lin.normal_equations(lin.state(), 1.0)
            r = float(g.residual_norms()[0])
            return grad, r

        g1, r1 = gradient(0.5)
        g2, r2 = gradient(1.0)
        assert r1 > 5.0 and r2 == pytest.approx(2 * r1)
        np.testing.assert_allclose(g1 / np.linalg.norm(g1), g2 / np.linalg.norm(g2), atol=1e-9)
        # the whitened gradient norm is the Huber threshold times the whitening scale
        scale = math.sqrt(wall_wall_information(0.5, 0.01)[0, 0])
        assert np.linalg.norm(g1) == pytest.approx(1.0 * scale, rel=1e-9)
        assert np.linalg.norm(g2) == pytest.approx(np.linalg.norm(g1), rel=1e-9)

    def test_solvers_agree(self, rng, monkeypatch):
        results = []
        for solver in ("arrowhead", "sparse"):
            monkeypatch.setattr(fg, "SOLVER", solver)
            g, _, walls = random_world_graph(np.random.default_rng(7), noise=0.05)
            for m, w in enumerate(walls):
                g.add_bim_wall(w)
                g.add_wall_wall(m, m, wall_wall_information(0.3, 0.01))
            optimize(g)
            results.append(np.array([T.matrix() for T in g.poses]))
        np.testing.assert_allclose(results[0], results[1], atol=1e-8)

    def test_step_tolerance_stops_early(self):
        g0, _, _ = random_world_graph(np.random.default_rng(3), noise=0.05, perturb=0.3)
        full = optimize(g0.copy(), OptConfig())
        quick = optimize(g0.copy(), OptConfig(step_tolerance=1e-2))
        assert quick.iterations <= full.iterations
        assert quick.final_cost >= full.final_cost


class TestGraphPlumbing:
    def test_factor_validation(self):
        with pytest.raises(ValueError):
            Factor(fg.RELATIVE_POSE, (), PoseSE3(), I3)
        bad = np.eye(3)
        bad[0, 1] = 1.0
        with pytest.raises(ValueError):
            Factor(fg.WALL_WALL, (), None, bad)

    def test_missing_node(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        with pytest.raises(KeyError):
            g.add_wall_wall(0, 0, I3)

    def test_remove_factor(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_pose(translate(1))
        f = g.add_relative_pose(0, 1, translate(1), I6)
        g.remove_factor(f)
        assert g.factors == []
        with pytest.raises(KeyError):
            g.remove_factor(f)

    def test_dump(self):
        g = FactorGraph()
        g.add_pose(PoseSE3(), fixed=True)
        g.add_detected_wall(plane_x(2.2))
        g.add_bim_wall(plane_x(2))
        g.add_wall_wall(0, 0, I3)
        lines = g.dump().splitlines()
        assert lines[0].startswith("NODE pose 0 ") and lines[0].endswith(" fixed")
        assert lines[1].startswith("NODE detected_wall 0 ")
        assert lines[2].startswith("NODE bim_wall 0 ") and lines[2].endswith(" fixed")
        assert lines[3].split()[:4] == ["FACTOR", "wall_wall", "detected_wall:0", "bim_wall:0"]
        assert float(lines[3].split()[-1]) == pytest.approx(0.2, abs=1e-9)

    @pytest.mark.parametrize("field", ["max_iterations", "initial_lambda", "cost_tolerance", "huber_delta", "epsilon_bim"])
    def test_config_positive(self, field):
        with pytest.raises(ValueError):
            OptConfig(**{field: 0})
