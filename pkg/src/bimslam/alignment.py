"""Initial BIM-to-map alignment from two near-perpendicular wall correspondences."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import (
    GeometryError,
    Plane,
    PoseSE3,
    Wall,
    minimal_difference,
    plane_to_minimal,
    se3_compose,
    se3_exp,
    transform_plane,
)

PARALLEL_LIMIT = 0.99
GN_STEPS = 10
EXTENT_MARGIN = 0.1


class DegenerateConfigurationError(GeometryError):
    """BIM normals are (near) parallel, so rotation is not determined."""


class MissingBimIdError(KeyError):
    pass


@dataclass(frozen=True)
class InitConfig:
    bim_id_first: str = ""
    bim_id_second: str = ""
    tau_perp: float = 0.1
    tau_init: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.tau_perp < 1.0:
            raise ValueError("tau_perp must lie in (0, 1)")
        if not self.tau_init > 0.0:
            raise ValueError("tau_init must be positive")


@dataclass(frozen=True)
class AlignmentResult:
    transform: PoseSE3
    residual: float
    pair_assignment: tuple = ()


PlaneLike = Union[Plane, Wall]


def _plane(x: PlaneLike) -> Plane:
    return x.plane if isinstance(x, Wall) else x


def check_perpendicular(w_i: PlaneLike, w_j: PlaneLike, tau_perp: float) -> bool:
    return abs(float(_plane(w_i).normal @ _plane(w_j).normal)) < tau_perp


def alignment_residual(T: PoseSE3, pairs) -> np.ndarray:
    """Stacked minimal-coordinate residuals of ``T`` applied to the BIM planes."""
    out = [
        minimal_difference(
            plane_to_minimal(transform_plane(T, _plane(a))), plane_to_minimal(_plane(s))
        )
        for s, a in pairs
    ]
    return np.concatenate(out)


def _procrustes(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation R minimising sum |R src_k - dst_k|^2."""
    U, _, Vt = np.linalg.svd(dst.T @ src)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


def _min_norm_translation(R, nA, dA, m, e):
    A = nA @ R.T
    t, *_ = np.linalg.lstsq(A, dA - e, rcond=None)
    return t


def _refine(T: PoseSE3, pairs, h: float = 1e-7) -> PoseSE3:
    """Gauss-Newton with left perturbations and minimum-norm steps."""
    r = alignment_residual(T, pairs)
    cost = float(r @ r)
    for _ in range(GN_STEPS):
        if cost < 1e-28:
            break
        J = np.empty((len(r), 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            rp = alignment_residual(se3_compose(se3_exp(d), T), pairs)
            rm = alignment_residual(se3_compose(se3_exp(-d), T), pairs)
            J[:, k] = (rp - rm) / (2.0 * h)
        step, *_ = np.linalg.lstsq(J, -r, rcond=1e-10)
        T_new = se3_compose(se3_exp(step), T)
        r_new = alignment_residual(T_new, pairs)
        c_new = float(r_new @ r_new)
        if c_new >= cost:
            break
        T, r, cost = T_new, r_new, c_new
        if np.linalg.norm(step) < 1e-14:
            break
    return T


def _project_translation(T: PoseSE3, pairs) -> PoseSE3:
    """Drop the translation component the planes cannot observe."""
    A = np.array([T.rotation @ _plane(a).normal for _, a in pairs])
    t = np.linalg.pinv(A) @ (A @ T.translation)
    return PoseSE3(T.rotation, t)


def _extent_violation(T: PoseSE3, pairs) -> float:
    """How far detected segments stick out of their transformed BIM walls."""
    total = 0.0
    for s, a in pairs:
        if not (isinstance(s, Wall) and isinstance(a, Wall)):
            continue
        aw = a.transformed(T)
        u = aw.tangent
        off = float((s.centroid - aw.centroid) @ u)
        total += max(0.0, abs(off) + 0.5 * s.length - 0.5 * aw.length - EXTENT_MARGIN)
    return total


def _hypotheses(pairs):
    """Yield ``(transform, residual, violation)`` for every normal-sign hypothesis."""
    S = [_plane(s) for s, _ in pairs]
    A = [_plane(a) for _, a in pairs]
    n1, n2 = A[0].normal, A[1].normal
    if abs(float(n1 @ n2)) >= PARALLEL_LIMIT:
        raise DegenerateConfigurationError("BIM normals are near-parallel")
    nA = np.array([p.normal for p in A])
    dA = np.array([p.offset for p in A])
    cA = np.cross(n1, n2)
    cA /= np.linalg.norm(cA)
    for s1 in (1.0, -1.0):
        for s2 in (1.0, -1.0):
            signs = np.ones(len(S))
            signs[0], signs[1] = s1, s2
            m = np.array([sg * p.normal for sg, p in zip(signs, S)])
            e = np.array([sg * p.offset for sg, p in zip(signs, S)])
            cS = np.cross(m[0], m[1])
            cS /= max(np.linalg.norm(cS), 1e-300)
            R = _procrustes(np.vstack([nA, cA]), np.vstack([m, cS]))
            if R[2, 2] <= 0.0:
                continue  # would turn the building upside down
            for k in range(2, len(S)):
                if m[k] @ (R @ nA[k]) < 0.0:
                    m[k], e[k] = -m[k], -e[k]
            T = PoseSE3(R, _min_norm_translation(R, nA, dA, m, e))
            T = _project_translation(_refine(T, pairs), pairs)
            r = alignment_residual(T, pairs)
            yield T, float(np.sqrt(r @ r)), _extent_violation(T, pairs)


def _rank(T: PoseSE3, residual: float, violation: float):
    """Extent violation, then residual; exact ties go to the smaller rotation,
    then to the positive sense about z."""
    R = T.rotation
    angle = math.acos(max(-1.0, min(1.0, 0.5 * (np.trace(R) - 1.0))))
    return (round(violation, 9), round(residual, 9), round(angle, 9), -(R[1, 0] - R[0, 1]), residual)


def _best(hyps):
    return min(hyps, key=lambda h: _rank(h[0], h[1], h[2]))


def estimate_alignment(pairs: Sequence[tuple]) -> AlignmentResult:
    """Least-squares ``T`` mapping BIM planes onto map planes.

    ``pairs`` holds ``(in_map, in_bim)`` tuples of planes or walls. Canonical
    planes carry no orientation, so several normal-sign hypotheses fit equally
    well; wall extents pick among them when walls are given.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DegenerateConfigurationError("need at least two plane pairs")
    T, res, _ = _best(list(_hypotheses(pairs)))
    ids = tuple(
        (s.id, a.id) for s, a in pairs if isinstance(s, Wall) and isinstance(a, Wall)
    )
    return AlignmentResult(T, res, ids)


def _scan_order(n: int):
    for j in range(1, n):
        for i in range(j):
            yield i, j


def try_initialize(detected: Sequence[Wall], bim: Sequence[Wall], cfg: InitConfig) -> Optional[AlignmentResult]:
    by_id = {w.id: w for w in bim}
    for key in (cfg.bim_id_first, cfg.bim_id_second):
        if key not in by_id:
            raise MissingBimIdError(f"declared BIM wall {key!r} not found")
    a1, a2 = by_id[cfg.bim_id_first], by_id[cfg.bim_id_second]
    for i, j in _scan_order(len(detected)):
        wi, wj = detected[i], detected[j]
        if not check_perpendicular(wi, wj, cfg.tau_perp):
            continue
        hyps = []
        for s1, s2 in ((wi, wj), (wj, wi)):
            pairs = [(s1, a1), (s2, a2)]
            hyps += [(T, r, v, pairs) for T, r, v in _hypotheses(pairs)]
        T, res, _, pairs = min(hyps, key=lambda h: _rank(h[0], h[1], h[2]))
        if res < cfg.tau_init:
            return AlignmentResult(T, res, tuple((s.id, a.id) for s, a in pairs))
        return None
    return None
