"""File formats: BIM wall JSON, trajectory text, scenario JSON, metrics CSV, observations."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import warnings
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import InitConfig
from .backend import BackendConfig
from .factor_graph import OptConfig
from .geometry import PoseSE3, Wall, canonicalize_plane, matrix_from_quat, quat_from_matrix
from .matching import MatchParams
from .session import Scenario, TrajectorySpec
from .simulator import FrameObservation, NoiseSpec, SensorSpec, WallDetection, WorldParams

METRICS_COLUMNS = (
    "scenario", "mode", "seed", "missing_fraction",
    "ate_raw", "ate_aligned", "map_rmse", "final_cost", "wallclock_s",
)


class FormatError(ValueError):
    """Malformed input file; the message carries file and line or field context."""


class DuplicateIdError(FormatError):
    pass


# ---------------------------------------------------------------------------
# BIM walls
# ---------------------------------------------------------------------------

_WALL_KEYS = {"id", "normal", "offset", "centroid", "length", "thickness"}


def _vec3(value, ctx):
    try:
        v = np.array(value, dtype=float).reshape(3)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{ctx}: expected a 3-vector, got {value!r}") from exc
    if not np.all(np.isfinite(v)):
        raise FormatError(f"{ctx}: non-finite component in {value!r}")
    return v


def _num(value, ctx):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise FormatError(f"{ctx}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise FormatError(f"{ctx}: non-finite value")
    return float(value)


def walls_from_records(records, source="<walls>") -> list:
    if not isinstance(records, list):
        raise FormatError(f"{source}: 'walls' must be an array")
    out, seen = [], set()
    for k, rec in enumerate(records):
        ctx = f"{source}: walls[{k}]"
        if not isinstance(rec, dict):
            raise FormatError(f"{ctx}: expected an object")
        missing = {"id", "normal", "offset", "centroid", "length"} - rec.keys()
        if missing:
            raise FormatError(f"{ctx}: missing field(s) {sorted(missing)}")
        extra = rec.keys() - _WALL_KEYS
        if extra:
            raise FormatError(f"{ctx}: unknown field(s) {sorted(extra)}")
        wid = rec["id"]
        if not isinstance(wid, str) or not wid:
            raise FormatError(f"{ctx}.id: expected a non-empty string")
        if wid in seen:
            raise DuplicateIdError(f"{ctx}.id: duplicate wall id {wid!r}")
        seen.add(wid)
        n = _vec3(rec["normal"], f"{ctx}.normal")
        norm = float(np.linalg.norm(n))
        if norm < 1e-12:
            raise FormatError(f"{ctx}.normal: zero vector")
        off = _num(rec["offset"], f"{ctx}.offset")
        if abs(norm - 1.0) > 1e-9:
            warnings.warn(f"{ctx}.normal has norm {norm:.6g}; normalised", stacklevel=3)
            n, off = n / norm, off / norm
        try:
            w = Wall(
                wid,
                canonicalize_plane(n, off),
                _vec3(rec["centroid"], f"{ctx}.centroid"),
                _num(rec["length"], f"{ctx}.length"),
                _num(rec.get("thickness", 0.0), f"{ctx}.thickness"),
            )
        except ValueError as exc:
            raise FormatError(f"{ctx}: {exc}") from exc
        out.append(w)
    return out


def walls_to_records(walls: Iterable[Wall]) -> list:
    return [
        {
            "id": w.id,
            "normal": [float(x) for x in w.normal],
            "offset": float(w.plane.offset),
            "centroid": [float(x) for x in w.centroid],
            "length": float(w.length),
            "thickness": float(w.thickness),
        }
        for w in walls
    ]


def load_bim_walls(path) -> list:
    """Read ``{"walls": [...]}``; planes are canonicalised and ids must be unique."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "walls" not in doc:
        raise FormatError(f"{path}: expected an object with a 'walls' array")
    return walls_from_records(doc["walls"], str(path))


def save_bim_walls(walls: Sequence[Wall], path) -> None:
    Path(path).write_text(json.dumps({"walls": walls_to_records(walls)}, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def format_number(x: float) -> str:
    """Shortest decimal of ``x`` rounded to 9 decimals ("0.0", "1.0", "0.123456789")."""
    v = round(float(x), 9) + 0.0  # folds -0.0
    return repr(v)


def pose_fields(T: PoseSE3) -> list:
    q = quat_from_matrix(T.rotation)
    return [*T.translation, *q]


def save_trajectory(poses, path, frames: Sequence[int] | None = None) -> None:
    """One line per pose: ``frame tx ty tz qx qy qz qw`` (unit quaternion, scalar last)."""
    poses = list(poses)
    frames = range(len(poses)) if frames is None else frames
    lines = [" ".join([str(int(k))] + [format_number(v) for v in pose_fields(T)]) for k, T in zip(frames, poses)]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_trajectory(path) -> list:
    """Return ``[(frame, PoseSE3), ...]``; blank lines and ``#`` comments are skipped."""
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
            try:
                frame = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
            q = np.array(vals[3:])
            nq = float(np.linalg.norm(q))
            if not np.all(np.isfinite(vals)) or nq < 1e-12:
                raise FormatError(f"{path}: line {lineno}: invalid pose values")
            out.append((frame, PoseSE3(matrix_from_quat(q / nq), np.array(vals[:3]))))
    return out


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------

_NESTED = {
    Scenario: {
        "world": WorldParams,
        "trajectory": TrajectorySpec,
        "sensor": SensorSpec,
        "noise": NoiseSpec,
        "backend": BackendConfig,
    },
    BackendConfig: {"init": InitConfig, "match": MatchParams, "opt": OptConfig},
}
# keys accepted in the JSON "world" object besides WorldParams fields
_WORLD_EXTRA = {"bim_file"}
_WORLD_SKIP = {"custom_walls"}


def _build(cls, data, ctx, base_dir, default=None):
    """Overlay ``data`` on ``default`` (or ``cls()``), recursing into nested configs."""
    default = cls() if default is None else default
    if not isinstance(data, dict):
        raise FormatError(f"{ctx}: expected an object")
    names = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    allowed = names - (_WORLD_SKIP if cls is WorldParams else set())
    if cls is WorldParams:
        allowed |= _WORLD_EXTRA
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise FormatError(f"{ctx}: unknown key(s) {unknown}")
    kw = {}
    nested = _NESTED.get(cls, {})
    for key, value in data.items():
        if key in nested:
            kw[key] = _build(nested[key], value, f"{ctx}.{key}", base_dir, getattr(default, key))
        elif cls is WorldParams and key == "bim_file":
            p = Path(value)
            kw["custom_walls"] = load_bim_walls(p if p.is_absolute() else Path(base_dir) / p)
        elif key == "anchor_ids":
            kw[key] = tuple(value)
        else:
            kw[key] = value
    try:
        return dataclasses.replace(default, **kw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{ctx}: {exc}") from exc


def scenario_from_dict(data: dict, base_dir=".") -> Scenario:
    """Strict parse: unknown keys anywhere are rejected."""
    return _build(Scenario, data, "scenario", base_dir)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(data, path.parent)


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {
            f.name: _plain(getattr(obj, f.name))
            for f in dataclasses.fields(obj)
            if not f.name.startswith("_") and f.name not in _WORLD_SKIP
        }
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def scenario_to_dict(scenario: Scenario) -> dict:
    """Inverse of ``scenario_from_dict`` for generated layouts (custom walls are not inlined)."""
    return _plain(scenario)


def save_scenario(scenario: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(scenario), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Metrics, logs, observations
# ---------------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9g}"
    return str(v)


def write_metrics_csv(rows: Sequence[dict], path, record_timing: bool = False,
                      columns: Sequence[str] = METRICS_COLUMNS) -> None:
    """Write rows in the fixed column order. Timing stays blank unless requested, so
    repeated runs produce byte-identical files."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([
                "" if (c == "wallclock_s" and not record_timing) else _cell(row.get(c))
                for c in columns
            ])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_lines(lines: Iterable[str], path) -> None:
    Path(path).write_text("".join(f"{line}\n" for line in lines))


def write_drift_csv(series, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "drift"])
        for k, v in series:
            w.writerow([k, _cell(float(v))])


def observation_to_record(obs: FrameObservation) -> dict:
    return {
        "frame": obs.frame_index,
        "odometry": [float(v) for v in pose_fields(obs.odometry_delta)],
        "detections": [
            {
                "normal": [float(x) for x in d.plane.normal],
                "offset": float(d.plane.offset),
                "centroid": [float(x) for x in d.centroid],
                "length": float(d.length),
                "thickness": float(d.thickness),
                "source_id": d.source_id,
            }
            for d in obs.wall_detections
        ],
    }


def observation_from_record(rec: dict) -> FrameObservation:
    od = rec["odometry"]
    q = np.asarray(od[3:], dtype=float)
    T = PoseSE3(matrix_from_quat(q / np.linalg.norm(q)), np.asarray(od[:3], dtype=float))
    dets = [
        WallDetection(
            canonicalize_plane(d["normal"], d["offset"]),
            np.asarray(d["centroid"], dtype=float),
            float(d["length"]),
            float(d.get("thickness", 0.0)),
            d.get("source_id"),
        )
        for d in rec["detections"]
    ]
    return FrameObservation(int(rec["frame"]), T, dets)


def save_observations(observations: Iterable[FrameObservation], path) -> None:
    with open(path, "w") as fh:
        for obs in observations:
            fh.write(json.dumps(observation_to_record(obs), separators=(",", ":")) + "\n")


def load_observations(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(observation_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
