"""Synthetic worlds, trajectories and noisy per-frame observations.

Worlds are gravity aligned: every wall is vertical and the robot moves in a
horizontal plane at a fixed height. Walls are described in the BIM frame;
``WorldSpec.bim_frame_offset`` maps BIM coordinates into the map frame, which
is the body frame of the first ground-truth pose.

Body frame convention: x forward, y left, z up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    Plane,
    PoseSE3,
    Wall,
    make_wall,
    minimal_to_plane,
    plane_to_minimal,
    rot_z,
    se3_compose,
    se3_exp,
    se3_inverse,
    transform_plane,
)

SENSOR_HEIGHT = 1.2
PATH_MARGIN = 1.0
DOOR_CLEARANCE = 0.2
LOOP_START_ANGLE = 1.25 * math.pi
LOOP_VERTICES = 720
LOOP_RADIUS_FRACTION = 0.75
DISTRACTOR_GAP = 0.4
DISTRACTOR_LENGTH = 1.5


class InvalidLayoutError(ValueError):
    pass


class InfeasibleTrajectoryError(ValueError):
    pass


@dataclass
class WorldParams:
    """Layout knobs for ``generate_world``."""

    n_rooms: int = 4
    n_rows: int = 2
    room_width: float = 4.0
    room_depth: float = 5.0
    door_width: float = 1.0
    thickness: float = 0.2
    height: float = 2.5
    phantom_fraction: float = 0.0
    n_distractors: int = 0
    custom_walls: list = field(default_factory=list)
    anchor_ids: tuple = ()


@dataclass
class NoiseSpec:
    odom_translation_sigma: float = 0.01
    odom_rotation_sigma: float = math.radians(0.2)
    odom_yaw_bias: float = math.radians(0.05)
    detect_normal_sigma: float = math.radians(0.5)
    detect_offset_sigma: float = 0.01
    detect_centroid_sigma: float = 0.05
    detection_dropout: float = 0.1

    def __post_init__(self):
        for k in ("odom_translation_sigma", "odom_rotation_sigma", "detect_normal_sigma",
                  "detect_offset_sigma", "detect_centroid_sigma"):
            if getattr(self, k) < 0:
                raise ValueError(f"NoiseSpec.{k} must be >= 0")
        if not 0.0 <= self.detection_dropout < 1.0:
            raise ValueError("detection_dropout must lie in [0, 1)")

    @classmethod
    def zero(cls) -> "NoiseSpec":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass
class SensorSpec:
    fov: float = math.radians(60.0)
    max_range: float = 3.5
    min_length: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.fov < 2.0 * math.pi:
            raise ValueError("fov must lie in (0, 2 pi)")
        if not self.max_range > 0.0:
            raise ValueError("max_range must be positive")


@dataclass
class WorldSpec:
    bim_walls: list
    built_mask: list
    distractor_walls: list
    bim_frame_offset: PoseSE3
    anchor_ids: tuple = ()
    rooms: list = field(default_factory=list)
    doors: list = field(default_factory=list)
    height: float = 2.5
    grid: tuple = (1, 1)

    def __post_init__(self):
        ids = [w.id for w in self.bim_walls] + [w.id for w in self.distractor_walls]
        if len(set(ids)) != len(ids):
            raise InvalidLayoutError("wall ids must be unique across BIM and distractor sets")
        if len(self.built_mask) != len(self.bim_walls):
            raise InvalidLayoutError("built_mask length must match bim_walls")

    @property
    def start_pose_bim(self) -> PoseSE3:
        return se3_inverse(self.bim_frame_offset)

    def physical_walls(self) -> list:
        """Walls that exist on site (built BIM walls plus distractors), BIM frame."""
        return [w for w, b in zip(self.bim_walls, self.built_mask) if b] + list(self.distractor_walls)

    @cached_property
    def _physical_map(self):
        T = self.bim_frame_offset
        return [w.transformed(T) for w in self.physical_walls()]

    def physical_walls_map(self) -> list:
        return self._physical_map

    def bim_walls_map(self) -> list:
        return [w.transformed(self.bim_frame_offset) for w in self.bim_walls]


@dataclass
class WallDetection:
    plane: Plane
    centroid: np.ndarray
    length: float
    thickness: float = 0.0
    source_id: Optional[str] = None

    def as_wall(self, id: str = "") -> Wall:
        return Wall(id, self.plane, self.centroid, self.length, self.thickness)


@dataclass
class FrameObservation:
    frame_index: int
    odometry_delta: PoseSE3
    wall_detections: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Worlds
# ---------------------------------------------------------------------------


def _vwall(id, x, y0, y1, z, t):
    return make_wall(id, [1.0, 0.0, 0.0], -x, [x, 0.5 * (y0 + y1), z], y1 - y0, t)


def _hwall(id, y, x0, x1, z, t):
    return make_wall(id, [0.0, 1.0, 0.0], -y, [0.5 * (x0 + x1), y, z], x1 - x0, t)


def _loop_radius(room) -> float:
    """Radius of the loop circle around the far corner of the first room."""
    x0, y0, x1, y1 = room
    return LOOP_RADIUS_FRACTION * min(x1 - x0, y1 - y0)


def _ellipse_point(centre, a, b, theta):
    return np.array([centre[0] + a * math.cos(theta), centre[1] + b * math.sin(theta)])


def _start_pose(rooms, grid) -> PoseSE3:
    """Start in the first room: on the junction loop for grids, else at the room centre."""
    x0, y0, x1, y1 = rooms[0]
    if grid[0] >= 2 and grid[1] >= 2:
        rho = _loop_radius(rooms[0])
        p = _ellipse_point((x1, y1), rho, rho, LOOP_START_ANGLE)
        yaw = LOOP_START_ANGLE + 0.5 * math.pi
        return PoseSE3(rot_z(yaw), np.array([p[0], p[1], SENSOR_HEIGHT]))
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    yaw = math.atan2(y0 + PATH_MARGIN - cy, x0 + PATH_MARGIN - cx)
    return PoseSE3(rot_z(yaw), np.array([cx, cy, SENSOR_HEIGHT]))


def _grid_walls(p: WorldParams, rows: int, cols: int):
    """Outer walls split per room plus partitions with a centred door gap."""
    W, D, z, t = p.room_width, p.room_depth, 0.5 * p.height, p.thickness
    walls, doors = [], []
    for r in range(rows):
        walls.append(_vwall(f"left_{r}", 0.0, r * D, (r + 1) * D, z, t))
    for c in range(cols):
        walls.append(_hwall(f"bottom_{c}", 0.0, c * W, (c + 1) * W, z, t))
    for c in range(cols):
        walls.append(_hwall(f"top_{c}", rows * D, c * W, (c + 1) * W, z, t))
    for r in range(rows):
        walls.append(_vwall(f"right_{r}", cols * W, r * D, (r + 1) * D, z, t))
    hw = 0.5 * p.door_width
    # the four doors around the first interior junction sit where the loop circle crosses
    rho = _loop_radius((0.0, 0.0, W, D)) if rows >= 2 and cols >= 2 else None
    for r in range(rows):
        for c in range(1, cols):
            y0, y1, x = r * D, (r + 1) * D, c * W
            if hw > 0:
                ym = 0.5 * (y0 + y1)
                if rho is not None and c == 1 and r < 2:
                    ym = D - rho if r == 0 else D + rho
                walls.append(_vwall(f"vpart_{r}_{c}_a", x, y0, ym - hw, z, t))
                walls.append(_vwall(f"vpart_{r}_{c}_b", x, ym + hw, y1, z, t))
                doors.append(("v", x, ym - hw, ym + hw))
            else:
                walls.append(_vwall(f"vpart_{r}_{c}", x, y0, y1, z, t))
    for r in range(1, rows):
        for c in range(cols):
            x0, x1, y = c * W, (c + 1) * W, r * D
            if hw > 0:
                xm = 0.5 * (x0 + x1)
                if rho is not None and r == 1 and c < 2:
                    xm = W - rho if c == 0 else W + rho
                walls.append(_hwall(f"hpart_{r}_{c}_a", y, x0, xm - hw, z, t))
                walls.append(_hwall(f"hpart_{r}_{c}_b", y, xm + hw, x1, z, t))
                doors.append(("h", y, xm - hw, xm + hw))
            else:
                walls.append(_hwall(f"hpart_{r}_{c}", y, x0, x1, z, t))
    rooms = [(c * W, r * D, (c + 1) * W, (r + 1) * D) for r in range(rows) for c in range(cols)]
    return walls, doors, rooms


def generate_world(layout: str = "multi_room", params: Optional[WorldParams] = None, seed: int = 0) -> WorldSpec:
    """Build a world.

    ``multi_room`` is an ``n_rows`` x (``n_rooms`` / ``n_rows``) grid of rooms
    with a door in every shared wall; ``corridor`` is a single rectangle.
    """
    p = params or WorldParams()
    if layout == "corridor":
        p = WorldParams(**{**p.__dict__, "n_rooms": 1, "n_rows": 1})
        layout = "multi_room"
    distractors = []
    doors, grid = [], (1, 1)
    if layout == "multi_room":
        if p.n_rooms < 1 or p.n_rows < 1 or p.room_width <= 0 or p.room_depth <= 0 or p.height <= 0:
            raise InvalidLayoutError("room counts and dimensions must be positive")
        if p.n_rooms % p.n_rows:
            raise InvalidLayoutError("n_rooms must be a multiple of n_rows")
        if not 0 <= p.door_width < min(p.room_depth, p.room_width):
            raise InvalidLayoutError("door_width must lie in [0, min(room_width, room_depth))")
        rows, cols = p.n_rows, p.n_rooms // p.n_rows
        grid = (rows, cols)
        walls, doors, rooms = _grid_walls(p, rows, cols)
        if rows >= 2 and cols >= 2:
            anchors = ("vpart_0_1_a", "bottom_0")
        else:
            anchors = ("left_0", "bottom_0")
        # distractors stand in front of outer walls, away from the anchor corner
        hosts = [w for w in walls if w.id.startswith(("top_", "right_"))]
        hosts = sorted(hosts, key=lambda w: (-(w.centroid[0] + w.centroid[1]), w.id))
        centre = np.array([0.5 * cols * p.room_width, 0.5 * rows * p.room_depth, 0.5 * p.height])
        for k in range(min(p.n_distractors, len(hosts))):
            h = hosts[k]
            c = h.centroid + DISTRACTOR_GAP * np.sign((centre - h.centroid) @ h.normal) * h.normal
            distractors.append(make_wall(f"distractor_{k}", h.normal, -(h.normal @ c), c,
                                         min(DISTRACTOR_LENGTH, h.length), p.thickness))
    elif layout == "custom":
        walls = list(p.custom_walls)
        if len(walls) < 2:
            raise InvalidLayoutError("custom layout needs at least two walls")
        pts = np.array([e for w in walls for e in w.endpoints()])
        rooms = [(pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())]
        anchors = tuple(p.anchor_ids) or (walls[0].id, walls[1].id)
    else:
        raise InvalidLayoutError(f"unknown layout {layout!r}")
    if p.anchor_ids:
        anchors = tuple(p.anchor_ids)

    rng = np.random.default_rng([int(seed), 7919])
    n_walls = len(walls)
    n_phantom = int(math.floor(p.phantom_fraction * n_walls + 0.5))
    candidates = [k for k, w in enumerate(walls) if w.id not in anchors]
    if n_phantom > len(candidates):
        raise InvalidLayoutError("phantom fraction leaves no room for the anchor walls")
    phantom = set(rng.choice(candidates, size=n_phantom, replace=False).tolist()) if n_phantom else set()
    mask = [k not in phantom for k in range(n_walls)]
    offset = se3_inverse(_start_pose(rooms, grid))
    return WorldSpec(walls, mask, distractors, offset, anchors, rooms, doors, p.height, grid)


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def _loop_waypoints(world: WorldSpec):
    rows, cols = world.grid
    x0, y0, x1, y1 = world.rooms[0]
    if rows >= 2 and cols >= 2:
        # counter-clockwise circle around the first interior junction, crossing
        # each shared wall through its door; a constant distance from the centre
        # keeps yaw-bias drift growing steadily
        rho = _loop_radius(world.rooms[0])
        th = LOOP_START_ANGLE + np.linspace(0.0, 2.0 * np.pi, LOOP_VERTICES + 1)
        pts = np.stack([x1 + rho * np.cos(th), y1 + rho * np.sin(th)], 1)
        pts[-1] = pts[0]
        return pts
    return _row_loop_waypoints(world)


def _row_loop_waypoints(world: WorldSpec):
    m = PATH_MARGIN
    rooms = world.rooms
    x0, y0, x1, y1 = rooms[0]
    D = y1 - y0
    start = world.start_pose_bim.translation[:2]
    if world.doors:
        door_lo = min(d[2] for d in world.doors)
        door_hi = max(d[3] for d in world.doors)
    else:
        door_lo, door_hi = y0 + 0.5 * D, y0 + 0.5 * D
    y_low, y_up = door_lo + DOOR_CLEARANCE, door_hi - DOOR_CLEARANCE
    n = len(rooms)
    pts = [tuple(start), (x0 + m, y0 + m)]
    for k, (a0, b0, a1, b1) in enumerate(rooms):
        if k > 0:
            pts += [(a0 + m, y_low), (a0 + m, b0 + m)]
        pts.append((a1 - m, b0 + m))
        if k < n - 1:
            pts.append((a1 - m, y_low))
    a0, b0, a1, b1 = rooms[-1]
    pts.append((a1 - m, b1 - m))
    for k in range(n - 1, 0, -1):
        a0, b0, a1, b1 = rooms[k]
        pts += [(a0 + m, b1 - m), (a0 + m, y_up), (a0 - m, y_up), (a0 - m, b1 - m)]
    pts += [(x0 + m, y1 - m), tuple(start)]
    out = [pts[0]]
    for q in pts[1:]:
        if np.hypot(q[0] - out[-1][0], q[1] - out[-1][1]) > 1e-12:
            out.append(q)
    return np.array(out)


def _sweep_waypoints(world: WorldSpec):
    x0, y0, x1, y1 = world.rooms[0]
    m = PATH_MARGIN
    start = world.start_pose_bim.translation[:2]
    pts = [tuple(start), (x0 + m, y0 + m)]
    ys = np.arange(y0 + m, y1 - m + 1e-9, 0.75)
    for k, y in enumerate(ys):
        xs = (x0 + m, x1 - m) if k % 2 == 0 else (x1 - m, x0 + m)
        if k > 0:
            pts.append((xs[0], y))
        pts.append((xs[1], y))
    return np.array(pts)


def _segments_intersect(p, q, a, b) -> bool:
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    o1, o2 = orient(p, q, a), orient(p, q, b)
    o3, o4 = orient(a, b, p), orient(a, b, q)
    return (o1 * o2 <= 0.0) and (o3 * o4 <= 0.0) and not (o1 == o2 == 0.0)


def _resample(pts: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n)
    out = np.stack([np.interp(target, s, pts[:, 0]), np.interp(target, s, pts[:, 1])], -1)
    out[-1] = pts[-1]
    return out


def generate_trajectory(world: WorldSpec, kind: str = "loop", n_frames: int = 200, seed: int = 0) -> list:
    """Ground-truth poses in the map frame; the first pose is the identity.

    The path is deterministic given the world; ``seed`` is accepted for API
    symmetry with the other generators.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if kind == "loop":
        pts = _loop_waypoints(world)
    elif kind == "sweep":
        pts = _sweep_waypoints(world)
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    obstacles = [w.endpoints() for w in world.physical_walls()]
    for p, q in zip(pts[:-1], pts[1:]):
        for a, b in obstacles:
            if _segments_intersect(p, q, a[:2], b[:2]):
                raise InfeasibleTrajectoryError(f"path segment {p} -> {q} crosses a built wall")
    xy = _resample(pts, n_frames)
    d = np.zeros_like(xy)
    d[:-1] = xy[1:] - xy[:-1]
    d[-1] = d[-2]
    ang = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    heading = np.empty(n_frames)
    for k in range(n_frames):
        lo, hi = max(0, k - 2), min(n_frames, k + 3)
        heading[k] = ang[lo:hi].mean()
    start = world.start_pose_bim
    heading += start.yaw - heading[0]
    off = world.bim_frame_offset
    poses = []
    for k in range(n_frames):
        Tb = PoseSE3(rot_z(heading[k]), np.array([xy[k, 0], xy[k, 1], SENSOR_HEIGHT]))
        poses.append(se3_compose(off, Tb))
    poses[0] = PoseSE3()
    return poses


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


def _clip_halfplane(a, b, lo, hi, c, normal):
    """Restrict s in [lo, hi] so that (a + s(b - a) - c) . normal >= 0."""
    f0 = float((a - c) @ normal)
    f1 = float((b - a) @ normal)
    if abs(f1) < 1e-15:
        return (lo, hi) if f0 >= 0.0 else (1.0, 0.0)
    s = -f0 / f1
    return (max(lo, s), hi) if f1 > 0 else (lo, min(hi, s))


def _wedge_interval(a, b, c, heading, half, lo, hi):
    left = np.array([math.cos(heading + half), math.sin(heading + half)])
    right = np.array([math.cos(heading - half), math.sin(heading - half)])
    # inward normals of the two bounding rays
    lo, hi = _clip_halfplane(a, b, lo, hi, c, np.array([left[1], -left[0]]))
    return _clip_halfplane(a, b, lo, hi, c, np.array([-right[1], right[0]]))


def visible_interval(a, b, c, heading, fov, max_range):
    """Parameter interval of segment ``a -> b`` (2-D) inside the sensor wedge and range disk."""
    a, b, c = (np.asarray(v, dtype=float) for v in (a, b, c))
    d = b - a
    f = a - c
    A, B, C = d @ d, 2.0 * (f @ d), f @ f - max_range * max_range
    disc = B * B - 4.0 * A * C
    if A <= 0.0 or disc < 0.0:
        return None
    sq = math.sqrt(disc)
    lo, hi = max(0.0, (-B - sq) / (2.0 * A)), min(1.0, (-B + sq) / (2.0 * A))
    if hi <= lo:
        return None
    half = 0.5 * fov
    if fov < math.pi:
        s0, s1 = _wedge_interval(a, b, c, heading, half, lo, hi)
    else:
        parts = [_wedge_interval(a, b, c, heading + sgn * 0.5 * half, 0.5 * half, lo, hi) for sgn in (-1, 1)]
        parts = [p for p in parts if p[1] > p[0]]
        if not parts:
            return None
        if len(parts) == 2 and parts[0][1] >= parts[1][0] - 1e-12 and parts[1][1] >= parts[0][0] - 1e-12:
            s0, s1 = min(parts[0][0], parts[1][0]), max(parts[0][1], parts[1][1])
        else:
            s0, s1 = max(parts, key=lambda p: p[1] - p[0])
    return (s0, s1) if s1 > s0 else None


def frame_rng(seed: int, frame_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(frame_index)])


def _noisy_delta(delta: PoseSE3, noise: NoiseSpec, rng) -> PoseSE3:
    """Planar odometry error: translation noise in x-y, rotation noise and bias about z."""
    xi = np.zeros(6)
    xi[:2] = rng.normal(0.0, 1.0, 2) * noise.odom_translation_sigma
    xi[5] = rng.normal() * noise.odom_rotation_sigma + noise.odom_yaw_bias
    return se3_compose(delta, se3_exp(xi))


def detect_walls(pose: PoseSE3, world: WorldSpec, sensor: SensorSpec, noise: NoiseSpec, rng) -> list:
    c = pose.translation[:2]
    heading = pose.yaw
    inv = se3_inverse(pose)
    out = []
    for w in world.physical_walls_map():
        a, b = w.endpoints()
        iv = visible_interval(a[:2], b[:2], c, heading, sensor.fov, sensor.max_range)
        if iv is None:
            continue
        length = (iv[1] - iv[0]) * w.length
        if length < sensor.min_length:
            continue
        if noise.detection_dropout > 0 and rng.random() < noise.detection_dropout:
            continue
        mid = a + 0.5 * (iv[0] + iv[1]) * (b - a)
        q = plane_to_minimal(transform_plane(inv, w.plane)).as_array()
        q = q + rng.normal(0.0, 1.0, 3) * np.array(
            [noise.detect_normal_sigma, noise.detect_normal_sigma, noise.detect_offset_sigma]
        )
        plane = minimal_to_plane(q)
        centroid = inv.apply(mid) + rng.normal(0.0, 1.0, 3) * noise.detect_centroid_sigma
        centroid = plane.project(centroid)
        out.append(WallDetection(plane, centroid, float(length), w.thickness, w.id))
    return out


def simulate_frame(pose_gt: PoseSE3, prev_pose_gt: Optional[PoseSE3], world: WorldSpec, sensor: SensorSpec,
                   noise: NoiseSpec, seed: int, frame_index: int = 0) -> FrameObservation:
    """One frame: noisy odometry since ``prev_pose_gt`` plus noisy wall detections.

    The first frame (``prev_pose_gt is None``) carries an exact identity delta.
    """
    rng = frame_rng(seed, frame_index)
    if prev_pose_gt is None:
        delta = PoseSE3()
    else:
        delta = _noisy_delta(se3_compose(se3_inverse(prev_pose_gt), pose_gt), noise, rng)
    return FrameObservation(frame_index, delta, detect_walls(pose_gt, world, sensor, noise, rng))


def simulate_sequence(world: WorldSpec, trajectory: Sequence[PoseSE3], sensor: SensorSpec, noise: NoiseSpec,
                      seed: int) -> list:
    prev = None
    out = []
    for k, T in enumerate(trajectory):
        out.append(simulate_frame(T, prev, world, sensor, noise, seed, k))
        prev = T
    return out
