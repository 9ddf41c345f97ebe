import math

import numpy as np
import pytest

from bimslam.alignment import InitConfig
from bimslam.backend import BackendConfig, finalize, new_state, process_frame
from bimslam.evaluation import linear_fit
from bimslam.factor_graph import BIM_WALL, POSE_WALL, RELATIVE_POSE, WALL_WALL
from bimslam.geometry import PoseSE3, make_wall, rot_z, se3_compose, se3_inverse
from bimslam.session import Scenario, TrajectorySpec, run_session
from bimslam.simulator import FrameObservation, NoiseSpec, SensorSpec, WorldSpec, simulate_sequence

SHORT = Scenario(trajectory=TrajectorySpec(n_frames=80))


def corner_world():
    a1 = make_wall("A1", [1, 0, 0], 0.0, [0, 2, 1.25], 4.0, 0.2)
    a2 = make_wall("A2", [0, 1, 0], 0.0, [2, 0, 1.25], 4.0, 0.2)
    start = PoseSE3(rot_z(math.pi), [2.0, 2.0, 1.2])
    return WorldSpec([a1, a2], [True, True], [], se3_inverse(start), ("A1", "A2"))


def corner_trajectory(world, n=12):
    """Turn in place from facing -x (A1 only) to facing the corner, then -y."""
    start = world.start_pose_bim
    out = []
    for k in range(n):
        yaw = math.pi + (math.pi / 2) * k / (n - 1)
        out.append(se3_compose(world.bim_frame_offset, PoseSE3(rot_z(yaw), start.translation)))
    return out


class TestProcessFrame:
    def test_minimal_frame(self):
        st = process_frame(new_state(), FrameObservation(0, PoseSE3()))
        g = st.graph
        assert len(g.poses) == 1 and len(g.walls) == 0 and len(g.bim_walls) == 0
        assert [f.kind for f in g.factors] == [RELATIVE_POSE]
        assert st.log == ["frame=0 detections=0 matches=0 cost_before=- cost_after=-"]

    def test_frame_order_enforced(self):
        st = process_frame(new_state(), FrameObservation(0, PoseSE3()))
        with pytest.raises(ValueError):
            process_frame(st, FrameObservation(2, PoseSE3()))

    def test_noiseless_corner(self):
        world = corner_world()
        gt = corner_trajectory(world)
        obs = simulate_sequence(world, gt, SensorSpec(fov=math.radians(60), max_range=6.0), NoiseSpec.zero(), 0)
        cfg = BackendConfig(init=InitConfig("A1", "A2"))
        st = new_state(world.bim_walls, cfg)
        first_both = None
        for o in obs:
            seen = {d.source_id for d in o.wall_detections}
            if first_both is None and seen == {"A1", "A2"}:
                first_both = o.frame_index
            before = st.alignment is None
            process_frame(st, o)
            if before and st.alignment is None:
                assert len(st.graph.bim_walls) == 0
                assert not any(f.kind == WALL_WALL for f in st.graph.factors)
        assert first_both is not None and first_both > 0
        assert st.alignment_frame == first_both
        assert len(st.graph.bim_walls) == 2
        # map -> BIM is the start pose; vertical walls leave its height free
        T, start = st.alignment.transform, world.start_pose_bim
        np.testing.assert_allclose(T.rotation, start.rotation, atol=1e-9)
        np.testing.assert_allclose(T.translation[:2], start.translation[:2], atol=1e-9)
        by_bim = {b: s for _, b, s in st.matches}
        assert set(by_bim) == {"A1", "A2"}
        assert all(s < 1e-9 for s in by_bim.values())

    def test_in_place_and_deterministic(self):
        sc = SHORT.with_(seed=3)
        a, b = run_session(sc), run_session(sc)
        assert a.log == b.log
        np.testing.assert_array_equal([T.matrix() for T in a.estimated], [T.matrix() for T in b.estimated])


@pytest.fixture(scope="module")
def paired():
    sc = SHORT.with_(seed=1)
    return run_session(sc.with_(mode="baseline")), run_session(sc)


class TestSessionInvariants:
    def test_baseline_has_no_bim(self, paired):
        base, _ = paired
        g = base.state.graph
        assert base.state.alignment is None
        assert len(g.bim_walls) == 0
        assert {f.kind for f in g.factors} == {RELATIVE_POSE, POSE_WALL}

    def test_bim_session_aligned(self, paired):
        _, bim = paired
        st = bim.state
        assert st.alignment is not None
        assert len(st.graph.bim_walls) == len(bim.world.bim_walls)

    def test_one_factor_per_match(self, paired):
        _, bim = paired
        st = bim.state
        ww = [f for f in st.graph.factors if f.kind == WALL_WALL]
        assert len(ww) == len(st.matches) == len(st.wall_factors)
        tracked = {tr.node for tr in st.tracks}
        ids = {b.id: st.bim_node[b.id] for b in st.bim_walls_map_frame}
        for det, bid, _ in st.matches:
            f = st.wall_factors[int(det[1:])]
            assert f.node_refs[0].index in tracked
            assert f.node_refs[1].kind == BIM_WALL and f.node_refs[1].index == ids[bid]

    def test_measurements_unchanged_by_optimize(self):
        sc = SHORT.with_(seed=2, trajectory=TrajectorySpec(n_frames=40))
        res = run_session(sc)
        g = res.state.graph
        snap = [(f.kind, f.measurement.matrix().copy() if f.kind == RELATIVE_POSE else
                 (f.measurement.normal.copy(), f.measurement.offset)) for f in g.factors if f.kind != WALL_WALL]
        finalize(res.state)
        after = [(f.kind, f.measurement.matrix() if f.kind == RELATIVE_POSE else
                  (f.measurement.normal, f.measurement.offset)) for f in g.factors if f.kind != WALL_WALL]
        for (k0, m0), (k1, m1) in zip(snap, after):
            assert k0 == k1
            if k0 == RELATIVE_POSE:
                assert np.array_equal(m0, m1)
            else:
                assert np.array_equal(m0[0], m1[0]) and m0[1] == m1[1]

    def test_log_format(self, paired):
        _, bim = paired
        assert len(bim.log) == 80
        for k, line in enumerate(bim.log):
            fields = dict(kv.split("=") for kv in line.split()[:5])
            assert int(fields["frame"]) == k
            assert set(fields) == {"frame", "detections", "matches", "cost_before", "cost_after"}
        optimised = [line for line in bim.log if "cost_after=-" not in line]
        assert len(optimised) == 80 // bim.scenario.backend.optimize_every_k_frames

    def test_bim_beats_baseline(self, paired):
        base, bim = paired
        assert bim.ate_raw < base.ate_raw
        assert max(v for _, v in bim.drift) < max(v for _, v in base.drift)


class TestRunSession:
    def test_zero_noise(self):
        res = run_session(SHORT.with_(noise=NoiseSpec.zero()))
        assert res.ate_raw < 1e-6
        assert res.state.errors == []

    def test_baseline_drift_grows(self):
        res = run_session(Scenario(mode="baseline", seed=4))
        slope, _ = linear_fit(res.drift)
        assert slope > 0

    def test_metrics_row(self, paired):
        _, bim = paired
        row = bim.metrics_row()
        assert list(row) == ["scenario", "mode", "seed", "missing_fraction", "ate_raw", "ate_aligned",
                             "map_rmse", "final_cost", "wallclock_s"]
        assert row["ate_aligned"] <= row["ate_raw"] + 1e-12

    def test_invalid_scenario(self):
        with pytest.raises(ValueError):
            Scenario(mode="fancy")
        with pytest.raises(ValueError):
            TrajectorySpec(kind="spiral")
        with pytest.raises(ValueError):
            BackendConfig(optimize_every_k_frames=0)
