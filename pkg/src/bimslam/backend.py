"""Online session loop: pose chaining, wall tracks, alignment, matching, optimisation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .alignment import AlignmentResult, InitConfig, try_initialize
from .factor_graph import Factor, FactorGraph, OptConfig, optimize, wall_wall_information
from .geometry import GeometryError, PoseSE3, Wall, plane_to_minimal, planes_to_minimal, se3_compose, transform_plane
from .matching import MatchParams, MatchSet, match_walls
from .simulator import FrameObservation


@dataclass
class BackendConfig:
    init: InitConfig = field(default_factory=InitConfig)
    match: MatchParams = field(default_factory=MatchParams)
    # online sessions stop LM once steps drop below 0.1 mm / 0.1 mrad
    opt: OptConfig = field(default_factory=lambda: OptConfig(step_tolerance=1e-4))
    optimize_every_k_frames: int = 10
    wall_merge_threshold: float = 0.15
    rematch_on_optimize: bool = True
    odom_sigma_translation: float = 0.01
    odom_sigma_rotation: float = math.radians(0.2)
    wall_sigma_angle: float = math.radians(0.5)
    wall_sigma_offset: float = 0.01
    merge_gap: Optional[float] = 0.5
    merge_window_frames: Optional[int] = 15

    def __post_init__(self):
        if self.optimize_every_k_frames < 1:
            raise ValueError("optimize_every_k_frames must be >= 1")
        if not self.wall_merge_threshold > 0:
            raise ValueError("wall_merge_threshold must be positive")

    def odometry_information(self) -> np.ndarray:
        s = [self.odom_sigma_translation] * 3 + [self.odom_sigma_rotation] * 3
        return np.diag(1.0 / np.square(s))

    def pose_wall_information(self) -> np.ndarray:
        s = [self.wall_sigma_angle] * 2 + [self.wall_sigma_offset]
        return np.diag(1.0 / np.square(s))


@dataclass
class Track:
    """Observations merged into one detected-wall node."""

    node: int
    pose_idx: list = field(default_factory=list)
    centroids: list = field(default_factory=list)  # local frame
    lengths: list = field(default_factory=list)
    thickness: float = 0.0


@dataclass
class BackendState:
    bim_walls: list = field(default_factory=list)
    config: BackendConfig = field(default_factory=BackendConfig)
    graph: FactorGraph = field(default_factory=FactorGraph)
    alignment: Optional[AlignmentResult] = None
    bim_walls_map_frame: list = field(default_factory=list)
    matches: MatchSet = field(default_factory=MatchSet)
    tracks: list = field(default_factory=list)
    wall_factors: dict = field(default_factory=dict)  # detected node -> wall_wall Factor
    bim_node: dict = field(default_factory=dict)  # BIM id -> bim node index
    last_frame: Optional[int] = None
    frames_processed: int = 0
    online_estimates: list = field(default_factory=list)
    cost_series: list = field(default_factory=list)
    log: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    alignment_frame: Optional[int] = None
    _walls_cache: Optional[list] = field(default=None, repr=False, compare=False)

    def invalidate_walls(self) -> None:
        """Drop cached track walls; call after changing tracks or graph values."""
        self._walls_cache = None

    @property
    def use_bim(self) -> bool:
        return bool(self.bim_walls)

    def track_walls(self) -> list:
        """Current map-frame Wall per track: node plane plus the union of observed extents."""
        if self._walls_cache is None:
            self._walls_cache = self._compute_track_walls()
        return list(self._walls_cache)

    def _compute_track_walls(self) -> list:
        g = self.graph
        if not self.tracks:
            return []
        trk = np.concatenate([np.full(len(tr.pose_idx), i) for i, tr in enumerate(self.tracks)])
        pidx = np.concatenate([tr.pose_idx for tr in self.tracks])
        cl = np.concatenate([np.asarray(tr.centroids).reshape(-1, 3) for tr in self.tracks])
        half = 0.5 * np.concatenate([tr.lengths for tr in self.tracks])
        used = np.unique(pidx)
        R = np.empty((len(g.poses), 3, 3))
        t = np.empty((len(g.poses), 3))
        for k in used:
            R[k] = g.poses[k].rotation
            t[k] = g.poses[k].translation
        c = np.matmul(R[pidx], cl[:, :, None])[:, :, 0] + t[pidx]
        nt = len(self.tracks)
        count = np.bincount(trk, minlength=nt)
        mean = np.stack([np.bincount(trk, weights=c[:, j], minlength=nt) for j in range(3)], 1) / count[:, None]
        planes = [g.walls[tr.node] for tr in self.tracks]
        n = np.array([p.normal for p in planes])
        d = np.array([p.offset for p in planes])
        ref = mean - ((n * mean).sum(1) + d)[:, None] * n
        u = np.stack([-n[:, 1], n[:, 0], np.zeros(nt)], 1)
        un = np.linalg.norm(u, axis=1)
        flat = un < 1e-12
        u[flat] = (1.0, 0.0, 0.0)
        un[flat] = 1.0
        u /= un[:, None]
        s = ((c - ref[trk]) * u[trk]).sum(1)
        lo = np.full(nt, np.inf)
        hi = np.full(nt, -np.inf)
        np.minimum.at(lo, trk, s - half)
        np.maximum.at(hi, trk, s + half)
        centre = ref + (0.5 * (lo + hi))[:, None] * u
        length = np.maximum(hi - lo, 1e-6)
        return [
            Wall(f"S{tr.node}", planes[i], centre[i], length[i], tr.thickness)
            for i, tr in enumerate(self.tracks)
        ]


def new_state(bim_walls: Sequence[Wall] = (), config: Optional[BackendConfig] = None) -> BackendState:
    return BackendState(bim_walls=list(bim_walls), config=config or BackendConfig())


def _merge_target(state: BackendState, plane, centroid, length, walls, Q=None) -> Optional[int]:
    """Closest track by plane distance whose extent overlaps the new segment."""
    g = state.graph
    if not g.walls:
        return None
    q = plane_to_minimal(plane).as_array()
    if Q is None:
        Q = planes_to_minimal(g.walls)
    d = q - np.asarray(Q)
    d[:, 0] = np.mod(d[:, 0] + np.pi, 2.0 * np.pi) - np.pi
    dist = np.linalg.norm(d, axis=1)
    gap = state.config.merge_gap
    window = state.config.merge_window_frames
    newest = len(g.poses) - 1
    for k in np.argsort(dist, kind="stable"):
        if dist[k] >= state.config.wall_merge_threshold:
            return None
        if window is not None and newest - state.tracks[k].pose_idx[-1] > window:
            continue
        if gap is None:
            return int(k)
        w = walls[k]
        s = abs(float((centroid - w.centroid) @ w.tangent))
        if s <= 0.5 * (w.length + length) + gap:
            return int(k)
    return None


def _initialize_bim(state: BackendState, result: AlignmentResult) -> None:
    state.alignment = result
    T = result.transform
    state.bim_walls_map_frame = [w.transformed(T) for w in state.bim_walls]
    for w in state.bim_walls_map_frame:
        state.bim_node[w.id] = state.graph.add_bim_wall(w.plane).index


def _apply_matches(state: BackendState, walls: list, matches: MatchSet, replace_all: bool) -> None:
    g = state.graph
    eps = state.config.opt.epsilon_bim
    found = {}
    for det_id, bim_id, score in matches:
        found[int(det_id[1:])] = (bim_id, score)
    if replace_all:
        for node in [n for n in state.wall_factors if n not in found]:
            g.remove_factor(state.wall_factors.pop(node))
    for node, (bim_id, score) in found.items():
        old = state.wall_factors.pop(node, None)
        if old is not None:
            g.remove_factor(old)
        state.wall_factors[node] = g.add_wall_wall(node, state.bim_node[bim_id], wall_wall_information(score, eps))
    entries = {e[0]: e for e in state.matches.entries}
    if replace_all:
        entries = {}
    for e in matches.entries:
        entries[e[0]] = e
    state.matches = MatchSet(sorted(entries.values(), key=lambda e: int(e[0][1:])))


def _match(state: BackendState, all_walls: bool) -> None:
    walls = state.track_walls()
    if not all_walls:
        walls = [w for w in walls if int(w.id[1:]) not in state.wall_factors]
    if not walls:
        return
    ms = match_walls(walls, state.bim_walls_map_frame, state.config.match)
    _apply_matches(state, walls, ms, all_walls)


def run_optimizer(state: BackendState):
    """Optimise in place; on failure the graph keeps its last consistent values."""
    g = state.graph
    state.invalidate_walls()
    try:
        return optimize(g, state.config.opt)
    except (GeometryError, RuntimeError, np.linalg.LinAlgError) as exc:
        state.errors.append((state.last_frame, repr(exc)))
        return None


def process_frame(state: BackendState, obs: FrameObservation) -> BackendState:
    """Ingest one frame. The state is updated in place and returned."""
    if state.last_frame is not None and obs.frame_index != state.last_frame + 1:
        raise ValueError(f"expected frame {state.last_frame + 1}, got {obs.frame_index}")
    cfg = state.config
    g = state.graph
    if not g.poses:
        pose = obs.odometry_delta
        p = g.add_pose(pose, fixed=True).index
        g.add_relative_pose(None, p, obs.odometry_delta, cfg.odometry_information())
    else:
        pose = se3_compose(g.poses[-1], obs.odometry_delta)
        p = g.add_pose(pose).index
        g.add_relative_pose(p - 1, p, obs.odometry_delta, cfg.odometry_information())
    state.last_frame = obs.frame_index
    state.frames_processed += 1

    info = cfg.pose_wall_information()
    walls = state.track_walls()
    Q = list(planes_to_minimal(w.plane for w in walls))
    for det in obs.wall_detections:
        plane_map = transform_plane(pose, det.plane)
        c_map = pose.apply(det.centroid)
        k = _merge_target(state, plane_map, c_map, det.length, walls, Q)
        if k is None:
            k = g.add_detected_wall(plane_map).index
            Q.append(plane_to_minimal(plane_map).as_array())
            state.tracks.append(Track(k, thickness=det.thickness))
            walls.append(Wall(f"S{k}", plane_map, c_map, det.length, det.thickness))
        tr = state.tracks[k]
        tr.pose_idx.append(p)
        tr.centroids.append(np.asarray(det.centroid, dtype=float))
        tr.lengths.append(float(det.length))
        g.add_pose_wall(p, k, det.plane, info)
    state.invalidate_walls()

    if state.use_bim and state.alignment is None and len(state.tracks) >= 2:
        res = try_initialize(state.track_walls(), state.bim_walls, cfg.init)
        if res is not None:
            _initialize_bim(state, res)
            state.alignment_frame = obs.frame_index
    if state.alignment is not None:
        _match(state, all_walls=False)

    before = after = None
    if state.frames_processed % cfg.optimize_every_k_frames == 0:
        result = run_optimizer(state)
        if result is not None:
            before, after = result.initial_cost, result.final_cost
            state.cost_series.append((obs.frame_index, before, after))
        if state.alignment is not None and cfg.rematch_on_optimize:
            _match(state, all_walls=True)
    state.online_estimates.append(g.poses[-1])
    fmt = lambda v: "-" if v is None else f"{v:.6g}"
    flag = " ERROR" if state.errors and state.errors[-1][0] == obs.frame_index else ""
    state.log.append(
        f"frame={obs.frame_index} detections={len(obs.wall_detections)} matches={len(state.matches)} "
        f"cost_before={fmt(before)} cost_after={fmt(after)}{flag}"
    )
    return state


def finalize(state: BackendState):
    """Final optimisation (and rematch) after the last frame."""
    result = run_optimizer(state)
    if state.alignment is not None and state.config.rematch_on_optimize:
        _match(state, all_walls=True)
        result = run_optimizer(state) or result
    return result
