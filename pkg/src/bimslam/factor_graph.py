"""Factor graph with pose, detected-wall and fixed BIM-wall nodes.

Three factor kinds are supported:

``relative_pose``
    ``log(Z^-1 Ti^-1 Tj)``; with a single node reference it acts as a prior
    relative to the map origin.
``pose_wall``
    minimal-coordinate difference between a map-frame wall seen from the pose
    and the plane measured in the pose's local frame.
``wall_wall``
    minimal-coordinate difference between a detected wall and a fixed BIM wall.

Costs are ``sum rho(r^T W r)`` with Huber ``rho`` on robust factors. Poses are
updated on the right, ``T <- T exp(delta)``; walls by ``plane_boxplus``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_triangular
from scipy.sparse.linalg import splu

from . import kernels
from .geometry import (
    Plane,
    PoseSE3,
    minimal_difference,
    plane_to_minimal,
    planes_to_minimal,
    minimal_to_plane,
    se3_compose,
    se3_inverse,
    se3_log,
    transform_plane,
)

POSE = "pose"
DETECTED_WALL = "detected_wall"
BIM_WALL = "bim_wall"

RELATIVE_POSE = "relative_pose"
POSE_WALL = "pose_wall"
WALL_WALL = "wall_wall"

SCORE_CLAMP = 1e-6

# "auto": block-arrowhead Cholesky with the compiled kernels, sparse LU otherwise
SOLVER = "auto"


class UnderConstrainedGaugeError(RuntimeError):
    """The normal equations are singular (missing gauge or unobserved variable)."""


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str
    index: int


@dataclass(eq=False)
class Factor:
    kind: str
    node_refs: tuple
    measurement: object
    information: np.ndarray
    robust: bool = False

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float)
        dim = 6 if self.kind == RELATIVE_POSE else 3
        if info.shape != (dim, dim):
            raise ValueError(f"{self.kind} factor needs a {dim}x{dim} information matrix")
        if np.max(np.abs(info - info.T)) > 1e-8 * (1.0 + np.max(np.abs(info))):
            raise ValueError("information matrix must be symmetric")
        self.information = info
        self.node_refs = tuple(self.node_refs)


@dataclass
class OptConfig:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    cost_tolerance: float = 1e-8
    step_tolerance: float = 0.0  # stop once max |dx| of an accepted step falls below this
    huber_delta: float = 1.0
    epsilon_bim: float = 0.01

    def __post_init__(self):
        for name in ("max_iterations", "initial_lambda", "cost_tolerance", "huber_delta", "epsilon_bim"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OptConfig.{name} must be positive")


@dataclass
class OptResult:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    residual_norms: np.ndarray
    cost_history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Scalar helpers
# ---------------------------------------------------------------------------


def wall_wall_information(score: float, epsilon: float) -> np.ndarray:
    """Information of a wall-wall factor: inverse of the covariance ``I * eps * s``."""
    s = max(float(score), SCORE_CLAMP)
    return np.eye(3) / (epsilon * s)


def huber_weight(r, delta: float):
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        w = np.where(r <= delta, 1.0, delta / np.where(r > 0, r, 1.0))
    return float(w) if w.ndim == 0 else w


def huber_cost(sq, delta: float):
    """Huber loss of a squared whitened norm."""
    sq = np.asarray(sq, dtype=float)
    r = np.sqrt(sq)
    out = np.where(r <= delta, sq, 2.0 * delta * r - delta * delta)
    return float(out) if out.ndim == 0 else out


def residual_relative_pose(Ti: PoseSE3, Tj: PoseSE3, Z: PoseSE3) -> np.ndarray:
    return se3_log(se3_compose(se3_inverse(Z), se3_compose(se3_inverse(Ti), Tj)))


def residual_pose_wall(T: PoseSE3, w: Plane, measured_local: Plane) -> np.ndarray:
    local = transform_plane(se3_inverse(T), w)
    return minimal_difference(plane_to_minimal(local), plane_to_minimal(measured_local))


def residual_wall_wall(w_s: Plane, w_a: Plane) -> np.ndarray:
    return minimal_difference(plane_to_minimal(w_s), plane_to_minimal(w_a))


def boxplus_coords(q: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Vectorised ``plane_boxplus`` on stacked minimal coordinates."""
    q = q + delta
    hi = q[:, 1] > np.pi / 2
    lo = q[:, 1] < -np.pi / 2
    q[hi, 1] = np.pi - q[hi, 1]
    q[lo, 1] = -np.pi - q[lo, 1]
    q[hi | lo, 0] += np.pi
    neg = q[:, 2] < 0.0
    q[neg, 0] += np.pi
    q[neg, 1] = -q[neg, 1]
    q[neg, 2] = -q[neg, 2]
    q[:, 0] = np.mod(q[:, 0] + np.pi, 2.0 * np.pi) - np.pi
    q[q[:, 0] == -np.pi, 0] = np.pi
    return q


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


class FactorGraph:
    def __init__(self):
        self.poses: list[PoseSE3] = []
        self.walls: list[Plane] = []
        self.bim_walls: list[Plane] = []
        self.fixed_poses: set[int] = set()
        self.factors: list[Factor] = []

    # nodes -----------------------------------------------------------------
    def add_pose(self, pose: PoseSE3, fixed: bool = False) -> NodeId:
        self.poses.append(pose)
        idx = len(self.poses) - 1
        if fixed:
            self.fixed_poses.add(idx)
        return NodeId(POSE, idx)

    def add_detected_wall(self, plane: Plane) -> NodeId:
        self.walls.append(plane)
        return NodeId(DETECTED_WALL, len(self.walls) - 1)

    def add_bim_wall(self, plane: Plane) -> NodeId:
        self.bim_walls.append(plane)
        return NodeId(BIM_WALL, len(self.bim_walls) - 1)

    def value(self, node: NodeId):
        if node.kind == POSE:
            return self.poses[node.index]
        if node.kind == DETECTED_WALL:
            return self.walls[node.index]
        if node.kind == BIM_WALL:
            return self.bim_walls[node.index]
        raise KeyError(node)

    # factors ---------------------------------------------------------------
    def add_factor(self, factor: Factor) -> Factor:
        for ref in factor.node_refs:
            store = {POSE: self.poses, DETECTED_WALL: self.walls, BIM_WALL: self.bim_walls}[ref.kind]
            if not 0 <= ref.index < len(store):
                raise KeyError(f"factor references missing node {ref}")
        self.factors.append(factor)
        return factor

    def add_relative_pose(self, i: Optional[int], j: int, Z: PoseSE3, information, robust=False) -> Factor:
        refs = (NodeId(POSE, j),) if i is None else (NodeId(POSE, i), NodeId(POSE, j))
        return self.add_factor(Factor(RELATIVE_POSE, refs, Z, information, robust))

    def add_pose_wall(self, pose: int, wall: int, measured_local: Plane, information, robust=True) -> Factor:
        refs = (NodeId(POSE, pose), NodeId(DETECTED_WALL, wall))
        return self.add_factor(Factor(POSE_WALL, refs, measured_local, information, robust))

    def add_wall_wall(self, wall: int, bim: int, information, robust=True) -> Factor:
        refs = (NodeId(DETECTED_WALL, wall), NodeId(BIM_WALL, bim))
        return self.add_factor(Factor(WALL_WALL, refs, None, information, robust))

    def remove_factor(self, factor: Factor) -> None:
        for k, f in enumerate(self.factors):
            if f is factor:
                del self.factors[k]
                return
        raise KeyError("factor not in graph")

    def factor_residual(self, f: Factor) -> np.ndarray:
        if f.kind == RELATIVE_POSE:
            Ti = PoseSE3() if len(f.node_refs) == 1 else self.value(f.node_refs[0])
            return residual_relative_pose(Ti, self.value(f.node_refs[-1]), f.measurement)
        if f.kind == POSE_WALL:
            return residual_pose_wall(self.value(f.node_refs[0]), self.value(f.node_refs[1]), f.measurement)
        return residual_wall_wall(self.value(f.node_refs[0]), self.value(f.node_refs[1]))

    def total_cost(self, huber_delta: float = 1.0) -> float:
        lin = _Linearization(self)
        return lin.cost(lin.state(), huber_delta)[0]

    def residual_norms(self) -> np.ndarray:
        lin = _Linearization(self)
        return np.sqrt(lin.cost(lin.state(), 1.0)[1])

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.poses = list(self.poses)
        g.walls = list(self.walls)
        g.bim_walls = list(self.bim_walls)
        g.fixed_poses = set(self.fixed_poses)
        g.factors = list(self.factors)
        return g

    def dump(self, stream: Optional[io.TextIOBase] = None) -> str:
        """Diagnostic text dump: ``NODE kind index params...`` / ``FACTOR kind refs... residual_norm``."""
        lines = []
        for k, T in enumerate(self.poses):
            vals = list(T.translation) + list(T.rotation.reshape(-1))
            fixed = " fixed" if k in self.fixed_poses else ""
            lines.append(f"NODE {POSE} {k} " + " ".join(f"{v:.9g}" for v in vals) + fixed)
        for kind, store in ((DETECTED_WALL, self.walls), (BIM_WALL, self.bim_walls)):
            for k, p in enumerate(store):
                vals = list(p.normal) + [p.offset]
                fixed = " fixed" if kind == BIM_WALL else ""
                lines.append(f"NODE {kind} {k} " + " ".join(f"{v:.9g}" for v in vals) + fixed)
        norms = self.residual_norms() if self.factors else []
        for f, rn in zip(self.factors, norms):
            refs = " ".join(f"{r.kind}:{r.index}" for r in f.node_refs)
            lines.append(f"FACTOR {f.kind} {refs} {rn:.9g}")
        text = "\n".join(lines) + "\n"
        if stream is not None:
            stream.write(text)
        return text


# ---------------------------------------------------------------------------
# Linearisation and Levenberg-Marquardt
# ---------------------------------------------------------------------------


class _Linearization:
    """Stacked factor data and the sparse block pattern of the normal equations."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        n_pose = len(graph.poses)
        free = [k for k in range(n_pose) if k not in graph.fixed_poses]
        pose_col = np.full(n_pose, -1, dtype=np.int64)
        pose_col[free] = 6 * np.arange(len(free))
        wall_col = 6 * len(free) + 3 * np.arange(len(graph.walls), dtype=np.int64)
        self.pose_col = pose_col
        self.wall_col = wall_col
        self.dim = 6 * len(free) + 3 * len(graph.walls)

        rel, pw, ww = [], [], []
        for k, f in enumerate(graph.factors):
            (rel if f.kind == RELATIVE_POSE else pw if f.kind == POSE_WALL else ww).append(k)
        self.order = np.array(rel + pw + ww, dtype=np.int64)
        F = graph.factors

        # relative pose
        self.rel_i = np.array([F[k].node_refs[0].index if len(F[k].node_refs) == 2 else -1 for k in rel], dtype=np.int64)
        self.rel_j = np.array([F[k].node_refs[-1].index for k in rel], dtype=np.int64)
        self.rel_Rz = np.ascontiguousarray(np.array([F[k].measurement.rotation for k in rel]).reshape(-1, 3, 3))
        self.rel_tz = np.ascontiguousarray(np.array([F[k].measurement.translation for k in rel]).reshape(-1, 3))
        self.rel_W = np.array([F[k].information for k in rel]).reshape(-1, 6, 6)
        self.rel_robust = np.array([F[k].robust for k in rel], dtype=bool)
        # pose-wall
        self.pw_p = np.array([F[k].node_refs[0].index for k in pw], dtype=np.int64)
        self.pw_w = np.array([F[k].node_refs[1].index for k in pw], dtype=np.int64)
        self.pw_qm = np.ascontiguousarray(
            planes_to_minimal(F[k].measurement for k in pw)
        )
        self.pw_W = np.array([F[k].information for k in pw]).reshape(-1, 3, 3)
        self.pw_robust = np.array([F[k].robust for k in pw], dtype=bool)
        # wall-wall
        self.ww_s = np.array([F[k].node_refs[0].index for k in ww], dtype=np.int64)
        self.ww_a = np.array([F[k].node_refs[1].index for k in ww], dtype=np.int64)
        bim_q = planes_to_minimal(graph.bim_walls)
        self.ww_qa = bim_q[self.ww_a] if len(ww) else np.zeros((0, 3))
        self.ww_W = np.array([F[k].information for k in ww]).reshape(-1, 3, 3)
        self.ww_robust = np.array([F[k].robust for k in ww], dtype=bool)

        self._build_pattern()

    # column index arrays per factor block row
    def _block_index(self, cols, width):
        idx = cols[:, None] + np.arange(width)[None, :]
        idx[cols < 0] = -1
        return idx

    def _build_pattern(self):
        rel_i_cols = np.where(self.rel_i >= 0, self.pose_col[np.maximum(self.rel_i, 0)], -1)
        rel_idx = np.concatenate(
            [self._block_index(rel_i_cols, 6), self._block_index(self.pose_col[self.rel_j], 6)], axis=1
        )
        pw_idx = np.concatenate(
            [self._block_index(self.pose_col[self.pw_p], 6), self._block_index(self.wall_col[self.pw_w], 3)], axis=1
        )
        ww_idx = self._block_index(self.wall_col[self.ww_s], 3)
        self.idx = (rel_idx.reshape(-1, 12), pw_idx.reshape(-1, 9), ww_idx.reshape(-1, 3))

        rows, cols = [], []
        for idx in self.idx:
            r = np.broadcast_to(idx[:, :, None], (idx.shape[0], idx.shape[1], idx.shape[1]))
            c = np.broadcast_to(idx[:, None, :], r.shape)
            rows.append(r.reshape(-1))
            cols.append(c.reshape(-1))
        rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
        self.h_mask = (rows >= 0) & (cols >= 0)
        rows, cols = rows[self.h_mask], cols[self.h_mask]
        self.use_arrowhead = SOLVER == "arrowhead" or (SOLVER == "auto" and kernels.BACKEND == "cython")
        if self.use_arrowhead:
            self.use_arrowhead = self._arrowhead_pattern(rows, cols)
        if not self.use_arrowhead:
            self._sparse_pattern(rows, cols)

        grows = [idx.reshape(-1) for idx in self.idx]
        grows = np.concatenate(grows) if grows else np.zeros(0, np.int64)
        self.g_mask = grows >= 0
        self.g_rows = grows[self.g_mask]

    def _sparse_pattern(self, rows, cols):
        n = max(self.dim, 1)
        ukeys, self.h_inv = np.unique(rows * n + cols, return_inverse=True)
        self.h_rows = ukeys // n
        self.h_cols = ukeys % n
        self.n_unique = len(ukeys)
        self.indptr = np.searchsorted(self.h_rows, np.arange(self.dim + 1)).astype(np.int32)
        self.indices = self.h_cols.astype(np.int32)
        diag = np.flatnonzero(self.h_rows == self.h_cols)
        self.diag_pos = diag
        self.has_diag = len(diag) == self.dim and np.array_equal(self.h_rows[diag], np.arange(self.dim))

    def _arrowhead_pattern(self, rows, cols) -> bool:
        """Map Hessian entries onto (pose diagonal, pose sub-diagonal, border, wall) buffers.

        Returns False when two non-consecutive free poses are coupled.
        """
        P6 = int(np.count_nonzero(self.pose_col >= 0)) * 6
        n = P6 // 6
        M = self.dim - P6
        pa, ra = np.divmod(rows, 6)
        pb, rb = np.divmod(cols, 6)
        both_p = (rows < P6) & (cols < P6)
        if np.any(both_p & (np.abs(pa - pb) > 1)):
            return False
        off_td, off_to = 0, 36 * n
        off_b = off_to + 36 * max(n - 1, 0)
        off_w = off_b + 6 * n * M
        dest = np.full(len(rows), -1, dtype=np.int64)
        m = both_p & (pa == pb)
        dest[m] = off_td + pa[m] * 36 + ra[m] * 6 + rb[m]
        m = both_p & (pa == pb + 1)
        dest[m] = off_to + pb[m] * 36 + ra[m] * 6 + rb[m]
        m = (rows < P6) & (cols >= P6)
        dest[m] = off_b + pa[m] * 6 * M + ra[m] * M + (cols[m] - P6)
        m = (rows >= P6) & (cols >= P6)
        dest[m] = off_w + (rows[m] - P6) * M + (cols[m] - P6)
        keep = dest >= 0
        self.a_keep = keep
        self.a_dest = dest[keep]
        self.a_size = off_w + M * M
        self.a_shape = (n, M, off_to, off_b, off_w)
        k6 = np.arange(6)
        self.a_diag = np.concatenate(
            [(off_td + 36 * np.arange(n)[:, None] + 7 * k6).reshape(-1), off_w + (M + 1) * np.arange(M)]
        ).astype(np.int64)
        self.has_diag = True
        return True

    def state(self):
        g = self.graph
        R = np.ascontiguousarray(np.array([T.rotation for T in g.poses]).reshape(-1, 3, 3))
        t = np.ascontiguousarray(np.array([T.translation for T in g.poses]).reshape(-1, 3))
        q = np.ascontiguousarray(planes_to_minimal(g.walls))
        return R, t, q

    def _rel_inputs(self, R, t):
        n = len(self.rel_j)
        Ri = np.empty((n, 3, 3))
        ti = np.empty((n, 3))
        has_i = self.rel_i >= 0
        Ri[has_i] = R[self.rel_i[has_i]]
        ti[has_i] = t[self.rel_i[has_i]]
        Ri[~has_i] = np.eye(3)
        ti[~has_i] = 0.0
        return Ri, ti, np.ascontiguousarray(R[self.rel_j]), np.ascontiguousarray(t[self.rel_j])

    def residuals(self, state, jacobians):
        R, t, q = state
        out = []
        if len(self.rel_j):
            Ri, ti, Rj, tj = self._rel_inputs(R, t)
            r, Ji, Jj, bad = kernels.relpose_linearize(Ri, ti, Rj, tj, self.rel_Rz, self.rel_tz, jacobians)
            if bad:
                from .geometry import NearSingularityError

                raise NearSingularityError(f"{bad} relative-pose residual(s) near a pi rotation")
            out.append((r, None if Ji is None else np.concatenate([Ji, Jj], axis=2)))
        else:
            out.append((np.zeros((0, 6)), np.zeros((0, 6, 12))))
        if len(self.pw_p):
            r, Jp, Jw = kernels.posewall_linearize(
                np.ascontiguousarray(R[self.pw_p]), np.ascontiguousarray(t[self.pw_p]),
                np.ascontiguousarray(q[self.pw_w]), self.pw_qm, jacobians,
            )
            out.append((r, None if Jp is None else np.concatenate([Jp, Jw], axis=2)))
        else:
            out.append((np.zeros((0, 3)), np.zeros((0, 3, 9))))
        if len(self.ww_s):
            r = q[self.ww_s] - self.ww_qa
            r[:, 0] = np.mod(r[:, 0] + np.pi, 2.0 * np.pi) - np.pi
            r[r[:, 0] == -np.pi, 0] = np.pi
            J = np.broadcast_to(np.eye(3), (len(r), 3, 3)) if jacobians else None
            out.append((r, J))
        else:
            out.append((np.zeros((0, 3)), np.zeros((0, 3, 3))))
        return out

    def _weights(self):
        return (self.rel_W, self.pw_W, self.ww_W), (self.rel_robust, self.pw_robust, self.ww_robust)

    def cost(self, state, delta):
        parts = self.residuals(state, jacobians=False)
        Ws, robust = self._weights()
        total = 0.0
        sq_all = []
        for (r, _), W, rb in zip(parts, Ws, robust):
            sq = np.matmul(np.matmul(r[:, None, :], W), r[:, :, None]).reshape(-1)
            total += float(np.sum(np.where(rb, huber_cost(sq, delta), sq)))
            sq_all.append(sq)
        sq_all = np.concatenate(sq_all)
        # report in graph factor order
        sq_graph = np.empty_like(sq_all)
        sq_graph[self.order] = sq_all
        return total, sq_graph

    def normal_equations(self, state, delta):
        parts = self.residuals(state, jacobians=True)
        Ws, robust = self._weights()
        hdata, gdata = [], []
        for (r, J), W, rb in zip(parts, Ws, robust):
            sq = np.matmul(np.matmul(r[:, None, :], W), r[:, :, None]).reshape(-1)
            w = np.where(rb, huber_weight(np.sqrt(sq), delta), 1.0)
            WJ = np.matmul(W, J) * w[:, None, None]
            WJt = WJ.transpose(0, 2, 1)
            hdata.append(np.matmul(WJt, J).reshape(-1))
            gdata.append(np.matmul(WJt, r[:, :, None]).reshape(-1))
        hdata = np.concatenate(hdata)[self.h_mask]
        gdata = np.concatenate(gdata)[self.g_mask]
        if self.use_arrowhead:
            H = np.bincount(self.a_dest, weights=hdata[self.a_keep], minlength=self.a_size)
        else:
            H = np.bincount(self.h_inv, weights=hdata, minlength=self.n_unique)
        g = np.bincount(self.g_rows, weights=gdata, minlength=self.dim)
        return H, g

    def _solve_arrowhead(self, H, g, lam):
        n, M, off_to, off_b, off_w = self.a_shape
        d = H[self.a_diag]
        if np.any(d <= 0.0):
            raise UnderConstrainedGaugeError("zero curvature on an optimised variable")
        data = H.copy()
        data[self.a_diag] += lam * d
        Td = data[:off_to].reshape(n, 6, 6)
        To = data[off_to:off_b].reshape(-1, 6, 6)
        B = data[off_b:off_w].reshape(n, 6, M)
        W = data[off_w:].reshape(M, M)
        L, Lo, G, ok = kernels.arrowhead_factor(Td, To, B)
        if not ok:
            raise UnderConstrainedGaugeError("pose block of the normal equations is not positive definite")
        rhs = -g
        y = kernels.arrowhead_forward(L, Lo, np.ascontiguousarray(rhs[: 6 * n].reshape(n, 6)))
        xw = np.zeros(M)
        if M:
            Gm = G.reshape(M, 6 * n)
            S = W - Gm @ Gm.T
            try:
                LS = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise UnderConstrainedGaugeError("wall block of the normal equations is singular") from exc
            yw = solve_triangular(LS, rhs[6 * n:] - Gm @ y.reshape(-1), lower=True)
            xw = solve_triangular(LS, yw, lower=True, trans="T")
        x = kernels.arrowhead_backward(L, Lo, G, y, np.ascontiguousarray(xw))
        dx = np.concatenate([x.reshape(-1), xw])
        if not np.all(np.isfinite(dx)):
            raise UnderConstrainedGaugeError("non-finite solution of the normal equations")
        return dx

    def solve(self, H, g, lam):
        if self.use_arrowhead:
            return self._solve_arrowhead(H, g, lam)
        if not self.has_diag:
            raise UnderConstrainedGaugeError("some optimised variable has no factor")
        d = H[self.diag_pos]
        if np.any(d <= 0.0):
            raise UnderConstrainedGaugeError("zero curvature on an optimised variable")
        data = H.copy()
        data[self.diag_pos] += lam * d
        A = sp.csc_matrix((data, self.indices, self.indptr), shape=(self.dim, self.dim))
        try:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise UnderConstrainedGaugeError(str(exc)) from exc
        dx = lu.solve(-g)
        if not np.all(np.isfinite(dx)):
            raise UnderConstrainedGaugeError("non-finite solution of the normal equations")
        return dx

    def retract(self, state, dx):
        R, t, q = state
        free = self.pose_col >= 0
        R2, t2 = R.copy(), t.copy()
        if np.any(free):
            cols = self.pose_col[free]
            delta = np.ascontiguousarray(dx[cols[:, None] + np.arange(6)])
            Rn, tn = kernels.retract_poses(np.ascontiguousarray(R[free]), np.ascontiguousarray(t[free]), delta)
            R2[free] = Rn
            t2[free] = tn
        q2 = q
        if len(q):
            q2 = boxplus_coords(q.copy(), dx[self.wall_col[:, None] + np.arange(3)])
        return R2, t2, q2

    def write_back(self, state):
        R, t, q = state
        g = self.graph
        g.poses = [g.poses[k] if k in g.fixed_poses else PoseSE3(R[k], t[k]) for k in range(len(g.poses))]
        g.walls = [minimal_to_plane(row) for row in q]


def optimize(graph: FactorGraph, config: Optional[OptConfig] = None) -> OptResult:
    """Levenberg-Marquardt with IRLS Huber weights; BIM nodes never move."""
    config = config or OptConfig()
    if not graph.poses:
        raise ValueError("graph has no pose node")
    has_ww = any(f.kind == WALL_WALL for f in graph.factors)
    if not graph.fixed_poses and not has_ww:
        raise UnderConstrainedGaugeError("no fixed pose and no wall-wall factor: gauge is free")
    delta = config.huber_delta
    lin = _Linearization(graph)
    state = lin.state()
    cost, sq = lin.cost(state, delta)
    initial = cost
    history = [cost]
    if lin.dim == 0 or cost <= 1e-300:
        return OptResult(initial, cost, 0, True, np.sqrt(sq), history)

    lam = config.initial_lambda
    converged = False
    it = 0
    while it < config.max_iterations:
        it += 1
        H, g = lin.normal_equations(state, delta)
        if float(np.max(np.abs(g))) <= 1e-14 * max(1.0, cost):
            converged = True
            break
        accepted = False
        while lam < 1e16:
            dx = lin.solve(H, g, lam)
            trial = lin.retract(state, dx)
            trial_cost, trial_sq = lin.cost(trial, delta)
            if trial_cost < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent direction left at machine precision
            converged = True
            break
        decrease = cost - trial_cost
        state, cost, sq = trial, trial_cost, trial_sq
        history.append(cost)
        lam = max(lam * 0.5, 1e-12)
        small_step = float(np.max(np.abs(dx))) < config.step_tolerance
        if decrease <= config.cost_tolerance * max(cost + decrease, 1e-300) or cost <= 1e-300 or small_step:
            converged = True
            break
    lin.write_back(state)
    return OptResult(initial, cost, it, converged, np.sqrt(sq), history)
