"""Trajectory and map metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import PoseSE3, Wall

SAMPLE_PITCH = 0.1
WALL_HEIGHT = 2.5
EXTENT_MARGIN = 0.25


class EmptyIntersectionError(ValueError):
    pass


@dataclass
class TrajectoryPair:
    estimated: list  # (frame_index, PoseSE3)
    ground_truth: list

    @classmethod
    def from_lists(cls, est: Sequence[PoseSE3], gt: Sequence[PoseSE3]) -> "TrajectoryPair":
        return cls(list(enumerate(est)), list(enumerate(gt)))

    def matched(self):
        """Frame indices and stacked (est, gt) translations on the common frames."""
        gt = {k: T for k, T in self.ground_truth}
        frames = [k for k, _ in self.estimated if k in gt]
        if not frames:
            raise EmptyIntersectionError("estimated and ground-truth trajectories share no frame index")
        est = {k: T for k, T in self.estimated}
        P = np.array([est[k].translation for k in frames])
        Q = np.array([gt[k].translation for k in frames])
        return frames, P, Q


@dataclass
class MetricsReport:
    ate_rmse: float
    ate_rmse_aligned: float
    map_rmse: float = float("nan")
    drift_series: list = field(default_factory=list)
    improvement_vs_baseline: Optional[float] = None


def kabsch(P: np.ndarray, Q: np.ndarray):
    """Rotation R and translation t minimising sum |R p + t - q|^2."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    U, _, Vt = np.linalg.svd((Q - mq).T @ (P - mp))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mq - R @ mp


def compute_ate(pair: TrajectoryPair, align: bool = False) -> float:
    _, P, Q = pair.matched()
    if len(P) < 2:
        raise EmptyIntersectionError("need at least two matched poses")
    if align:
        R, t = kabsch(P, Q)
        P = P @ R.T + t
    err = np.linalg.norm(P - Q, axis=1)
    return float(np.sqrt(np.mean(err * err)))


def drift_series(pair: TrajectoryPair) -> list:
    frames, P, Q = pair.matched()
    err = np.linalg.norm(P - Q, axis=1)
    return [(k, float(e)) for k, e in zip(frames, err)]


def sample_wall(wall: Wall, pitch: float = SAMPLE_PITCH, height: float = WALL_HEIGHT) -> np.ndarray:
    """Regular grid of points on the wall rectangle (length x height, centred on the centroid)."""
    u = wall.tangent
    v = np.cross(wall.normal, u)
    v /= np.linalg.norm(v)
    nu = max(1, int(round(wall.length / pitch)) + 1)
    nv = max(1, int(round(height / pitch)) + 1)
    su = np.linspace(-0.5 * wall.length, 0.5 * wall.length, nu)
    sv = np.linspace(-0.5 * height, 0.5 * height, nv)
    g = wall.centroid + su[:, None, None] * u + sv[None, :, None] * v
    return g.reshape(-1, 3)


def compute_map_rmse(wall_samples, bim_walls: Sequence[Wall], height: float = WALL_HEIGHT,
                     margin: float = EXTENT_MARGIN) -> float:
    X = np.asarray(wall_samples, dtype=float).reshape(-1, 3)
    if len(X) == 0 or not bim_walls:
        raise ValueError("map RMSE needs samples and BIM walls")
    N = np.array([w.normal for w in bim_walls])
    d = np.array([w.plane.offset for w in bim_walls])
    dist = np.abs(X @ N.T + d)  # (samples, walls)
    U = np.array([w.tangent for w in bim_walls])
    C = np.array([w.centroid for w in bim_walls])
    V = np.cross(N, U)
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    half_l = np.array([0.5 * w.length + 0.5 * w.thickness for w in bim_walls]) + margin
    half_h = 0.5 * height + np.array([0.5 * w.thickness for w in bim_walls]) + margin
    rel = X[:, None, :] - C[None, :, :]
    inside = (np.abs(np.einsum("swk,wk->sw", rel, U)) <= half_l) & (
        np.abs(np.einsum("swk,wk->sw", rel, V)) <= half_h
    )
    best = np.where(inside, dist, np.inf).min(axis=1)
    best = np.where(np.isfinite(best), best, dist.min(axis=1))
    return float(np.sqrt(np.mean(best * best)))


def improvement_percent(baseline_metric: float, ours_metric: float) -> float:
    if baseline_metric == 0:
        raise ZeroDivisionError("baseline metric is zero")
    return 100.0 * (baseline_metric - ours_metric) / baseline_metric


def aggregate_improvement(baseline: Sequence[float], ours: Sequence[float]) -> dict:
    """Both aggregations: mean of per-run percentages and percentage of the means."""
    b = np.asarray(baseline, dtype=float)
    o = np.asarray(ours, dtype=float)
    per_run = [improvement_percent(x, y) for x, y in zip(b, o)]
    return {
        "mean_of_percentages": float(np.mean(per_run)),
        "percentage_of_means": improvement_percent(float(b.mean()), float(o.mean())),
    }


def linear_fit(series: Sequence[tuple]):
    """Least-squares slope and R^2 of (frame, value) pairs."""
    x = np.array([s[0] for s in series], dtype=float)
    y = np.array([s[1] for s in series], dtype=float)
    A = np.stack([x, np.ones_like(x)], -1)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 0.0
    return float(coef[0]), r2
