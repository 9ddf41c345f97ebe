"""Continuous association of detected walls with map-frame BIM walls."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import Plane, Wall, minimal_difference, plane_to_minimal, planes_to_minimal


@dataclass(frozen=True)
class MatchParams:
    alpha: float = 0.7
    tau_p: float = 0.3
    tau_c: float = 0.5
    gate_relative_centroid: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not (self.tau_p > 0.0 and self.tau_c > 0.0):
            raise ValueError("tau_p and tau_c must be positive")


@dataclass
class MatchSet:
    entries: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {d: (b, s) for d, b, s in self.entries}

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def plane_param_distance(p_s: Plane, p_a: Plane) -> float:
    return float(np.linalg.norm(minimal_difference(plane_to_minimal(p_s), plane_to_minimal(p_a))))


def projected_centroid_distance(w_s: Wall, w_a: Wall) -> float:
    return abs(float((w_s.centroid - w_a.centroid) @ w_a.normal))


def _score(d_plane: float, d_cent: float, params: MatchParams) -> float:
    return params.alpha * d_plane / params.tau_p + (1.0 - params.alpha) * d_cent / params.tau_c


def match_score(w_s: Wall, w_a: Wall, params: MatchParams) -> float:
    return _score(plane_param_distance(w_s.plane, w_a.plane), projected_centroid_distance(w_s, w_a), params)


def passes_gates(w_s: Wall, w_a: Wall, params: MatchParams) -> bool:
    if plane_param_distance(w_s.plane, w_a.plane) > params.tau_p:
        return False
    d_c = projected_centroid_distance(w_s, w_a)
    if params.gate_relative_centroid:
        return d_c <= params.tau_c * float(np.linalg.norm(w_s.centroid - w_a.centroid))
    return d_c <= params.tau_c


def match_walls(detected: Sequence[Wall], bim: Sequence[Wall], params: MatchParams) -> MatchSet:
    """Best gated BIM candidate per detected wall; ties go to the smaller BIM id."""
    out = MatchSet()
    if not detected or not bim:
        return out
    q_b = planes_to_minimal(w.plane for w in bim)
    c_b = np.array([w.centroid for w in bim])
    n_b = np.array([w.normal for w in bim])
    ids = [w.id for w in bim]
    for w in detected:
        dq = plane_to_minimal(w.plane).as_array() - q_b
        dq[:, 0] = np.mod(dq[:, 0] + np.pi, 2.0 * np.pi) - np.pi
        dq[dq[:, 0] == -np.pi, 0] = np.pi
        d_plane = np.sqrt(np.einsum("ij,ij->i", dq, dq))
        diff = w.centroid - c_b
        d_cent = np.abs(np.einsum("ij,ij->i", diff, n_b))
        if params.gate_relative_centroid:
            ok_c = d_cent <= params.tau_c * np.sqrt(np.einsum("ij,ij->i", diff, diff))
        else:
            ok_c = d_cent <= params.tau_c
        ok = (d_plane <= params.tau_p) & ok_c
        if not np.any(ok):
            continue
        scores = _score(d_plane, d_cent, params)
        best = min(np.flatnonzero(ok), key=lambda k: (scores[k], ids[k]))
        out.entries.append((w.id, ids[best], float(scores[best])))
    return out
