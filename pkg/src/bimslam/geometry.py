"""Planes, walls and SE(3) poses.

Conventions
-----------
* A plane is the point set ``{x : n.x + d = 0}`` with ``|n| = 1``. The canonical
  representative has ``d >= 0``; when ``d == 0`` the first nonzero component of
  ``n`` is positive.
* Minimal plane coordinates are ``(azimuth, elevation, offset)`` with
  ``azimuth = atan2(n_y, n_x)`` and ``elevation = asin(n_z)``.
* Tangent vectors of SE(3) are ordered ``(rho, phi)``: translation part first,
  rotation part second. ``exp((rho, phi)) = (exp(phi), J_l(phi) rho)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

NORMAL_EPS = 1e-9
SMALL_ANGLE = 1e-2


class GeometryError(ValueError):
    pass


class DegenerateNormalError(GeometryError):
    pass


class NearSingularityError(GeometryError):
    """Raised by ``se3_log`` for rotations too close to pi."""


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    if isinstance(a, (float, int)):
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        w = (w + 2.0 * math.pi if w < 0 else w) - math.pi
        return math.pi if w == -math.pi else w
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


# ---------------------------------------------------------------------------
# Planes and walls
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Plane:
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=float).reshape(3))
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, x):
        return np.asarray(x, dtype=float) @ self.normal + self.offset

    def project(self, x):
        x = np.asarray(x, dtype=float)
        return x - np.multiply.outer(self.signed_distance(x), self.normal)

    def allclose(self, other: "Plane", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.normal, other.normal, atol=atol)
            and abs(self.offset - other.offset) <= atol
        )

    def __eq__(self, other):
        if not isinstance(other, Plane):
            return NotImplemented
        return bool(np.array_equal(self.normal, other.normal) and self.offset == other.offset)

    __hash__ = None


@dataclass(frozen=True)
class PlaneCoords:
    azimuth: float
    elevation: float
    offset: float

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.offset])


def canonicalize_plane(normal, offset) -> Plane:
    n = np.asarray(normal, dtype=float).reshape(3)
    norm = float(np.linalg.norm(n))
    if norm <= NORMAL_EPS:
        raise DegenerateNormalError(f"plane normal has norm {norm:g}")
    d = float(offset)
    if abs(norm - 1.0) > 2.0 * np.finfo(float).eps:  # keeps canonicalisation idempotent
        n, d = n / norm, d / norm
    if d < 0.0:
        n, d = -n, -d
    elif d == 0.0:
        first = n[np.flatnonzero(n)[0]]
        if first < 0.0:
            n = -n
        d = 0.0
    return Plane(n, d)


def transform_plane(T: "PoseSE3", p: Plane) -> Plane:
    n = T.rotation @ p.normal
    return canonicalize_plane(n, p.offset - n @ T.translation)


def plane_to_minimal(p: Plane) -> PlaneCoords:
    n = p.normal
    nz = float(np.clip(n[2], -1.0, 1.0))
    if abs(nz) >= 1.0:
        az = 0.0
    else:
        az = wrap_angle(math.atan2(n[1], n[0]))
    return PlaneCoords(az, math.asin(nz), p.offset)


def planes_to_minimal(planes) -> np.ndarray:
    """Batched ``plane_to_minimal``: (n, 3) array of (azimuth, elevation, offset)."""
    planes = list(planes)
    if not planes:
        return np.zeros((0, 3))
    n = np.array([p.normal for p in planes])
    nz = np.clip(n[:, 2], -1.0, 1.0)
    az = np.where(np.abs(nz) >= 1.0, 0.0, wrap_angle(np.arctan2(n[:, 1], n[:, 0])))
    return np.stack([az, np.arcsin(nz), [p.offset for p in planes]], axis=1)


def minimal_to_plane(q) -> Plane:
    az, el, off = (q.azimuth, q.elevation, q.offset) if isinstance(q, PlaneCoords) else q
    ce = math.cos(el)
    n = np.array([ce * math.cos(az), ce * math.sin(az), math.sin(el)])
    return canonicalize_plane(n, off)


def minimal_difference(a, b) -> np.ndarray:
    """``a - b`` on minimal coordinates with the azimuth component wrapped."""
    a = a.as_array() if isinstance(a, PlaneCoords) else np.asarray(a, dtype=float)
    b = b.as_array() if isinstance(b, PlaneCoords) else np.asarray(b, dtype=float)
    r = a - b
    r[0] = wrap_angle(r[0])
    return r


def plane_boxplus(p: Plane, delta) -> Plane:
    q = plane_to_minimal(p).as_array() + np.asarray(delta, dtype=float)
    # keep elevation inside its chart; crossing a pole flips the azimuth
    if q[1] > np.pi / 2:
        q[1] = np.pi - q[1]
        q[0] += np.pi
    elif q[1] < -np.pi / 2:
        q[1] = -np.pi - q[1]
        q[0] += np.pi
    q[0] = wrap_angle(q[0])
    return minimal_to_plane(q)


def horizontal_tangent(normal) -> np.ndarray:
    """Unit in-plane direction orthogonal to gravity (z)."""
    n = np.asarray(normal, dtype=float)
    u = np.array([-n[1], n[0], 0.0])
    norm = np.linalg.norm(u)
    if norm < 1e-12:
        return np.array([1.0, 0.0, 0.0])
    return u / norm


@dataclass(frozen=True, eq=False)
class Wall:
    """Finite wall segment; the centroid is re-projected onto the plane."""

    id: str
    plane: Plane
    centroid: np.ndarray
    length: float
    thickness: float = 0.0

    def __post_init__(self):
        if not self.length > 0:
            raise GeometryError(f"wall {self.id!r}: length must be > 0, got {self.length}")
        if not self.thickness >= 0:
            raise GeometryError(f"wall {self.id!r}: thickness must be >= 0, got {self.thickness}")
        c = np.asarray(self.centroid, dtype=float).reshape(3)
        object.__setattr__(self, "centroid", self.plane.project(c))
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "thickness", float(self.thickness))

    @property
    def normal(self) -> np.ndarray:
        return self.plane.normal

    @property
    def tangent(self) -> np.ndarray:
        return horizontal_tangent(self.plane.normal)

    def endpoints(self):
        u = self.tangent * (0.5 * self.length)
        return self.centroid - u, self.centroid + u

    def transformed(self, T: "PoseSE3", id: str | None = None) -> "Wall":
        return Wall(
            self.id if id is None else id,
            transform_plane(T, self.plane),
            T.apply(self.centroid),
            self.length,
            self.thickness,
        )


def make_wall(id, normal, offset, centroid, length, thickness=0.0) -> Wall:
    return Wall(id, canonicalize_plane(normal, offset), centroid, length, thickness)


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def hat(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    th2 = float(phi @ phi)
    th = math.sqrt(th2)
    K = hat(phi)
    if th < SMALL_ANGLE:
        a = 1.0 - th2 / 6.0 + th2 * th2 / 120.0
        b = 0.5 - th2 / 24.0 + th2 * th2 / 720.0
    else:
        a = math.sin(th) / th
        b = (1.0 - math.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    c = min(1.0, max(-1.0, 0.5 * (np.trace(R) - 1.0)))
    th = math.acos(c)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < SMALL_ANGLE:
        th2 = th * th
        return 0.5 * (1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0) * w
    if th > math.pi - 1e-3:
        # axis from the symmetric part; sign from the skew part
        B = 0.5 * (R + R.T) - c * np.eye(3)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if axis @ w < 0.0:
            axis = -axis
        return th * axis
    return th / (2.0 * math.sin(th)) * w


def _coeffs(th2):
    """Series-safe coefficients shared by the SO(3)/SE(3) Jacobians."""
    if th2 < SMALL_ANGLE * SMALL_ANGLE:
        t4 = th2 * th2
        A = 1.0 - th2 / 6.0 + t4 / 120.0
        B = 0.5 - th2 / 24.0 + t4 / 720.0
        C = 1.0 / 6.0 - th2 / 120.0 + t4 / 5040.0
        D = 1.0 / 24.0 - th2 / 720.0 + t4 / 40320.0
        E = 1.0 / 120.0 - th2 / 2520.0 + t4 / 120960.0
        F = 1.0 / 12.0 + th2 / 720.0 + t4 / 30240.0
        return A, B, C, D, E, F
    th = math.sqrt(th2)
    s, c = math.sin(th), math.cos(th)
    A = s / th
    B = (1.0 - c) / th2
    C = (th - s) / (th2 * th)
    D = (th2 + 2.0 * c - 2.0) / (2.0 * th2 * th2)
    E = (2.0 * th - 3.0 * s + th * c) / (2.0 * th2 * th2 * th)
    F = 1.0 / th2 - (1.0 + c) / (2.0 * th * s)
    return A, B, C, D, E, F


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    _, B, C, *_ = _coeffs(float(phi @ phi))
    K = hat(phi)
    return np.eye(3) + B * K + C * (K @ K)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    *_, F = _coeffs(float(phi @ phi))
    K = hat(phi)
    return np.eye(3) - 0.5 * K + F * (K @ K)


def se3_q_matrix(rho, phi) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    _, _, C, D, E, _ = _coeffs(float(np.dot(phi, phi)))
    P, Rh = hat(phi), hat(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * Rh
        + C * (PR + RP + PRP)
        + D * (PP @ Rh + RP @ P - 3.0 * PRP)
        + E * (PRP @ P + PP @ Rh @ P)
    )


def se3_right_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    rho, phi = -xi[:3], -xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ se3_q_matrix(rho, phi) @ Ji
    return out


@dataclass(frozen=True, eq=False)
class PoseSE3:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_xyz_yaw(cls, x=0.0, y=0.0, z=0.0, yaw=0.0) -> "PoseSE3":
        return cls(rot_z(yaw), np.array([x, y, z], dtype=float))

    @classmethod
    def from_matrix(cls, M) -> "PoseSE3":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        return se3_compose(self, other)

    def inverse(self) -> "PoseSE3":
        return se3_inverse(self)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def __matmul__(self, other):
        if isinstance(other, PoseSE3):
            return se3_compose(self, other)
        return NotImplemented


def rot_z(yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_inverse(T: PoseSE3) -> PoseSE3:
    Rt = T.rotation.T
    return PoseSE3(Rt, -Rt @ T.translation)


def se3_exp(xi) -> PoseSE3:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return PoseSE3(so3_exp(phi), so3_left_jacobian(phi) @ rho)


def se3_log(T: PoseSE3) -> np.ndarray:
    c = 0.5 * (np.trace(T.rotation) - 1.0)
    if c < math.cos(math.pi - 1e-6):
        raise NearSingularityError("rotation angle too close to pi for se3_log")
    phi = so3_log(T.rotation)
    rho = so3_left_jacobian_inv(phi) @ T.translation
    return np.concatenate([rho, phi])


def se3_adjoint(T: PoseSE3) -> np.ndarray:
    R, t = T.rotation, T.translation
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = hat(t) @ R
    return A


def pose_distance(a: PoseSE3, b: PoseSE3) -> float:
    """Norm of the tangent-space difference, used for "within tol" checks."""
    return float(np.linalg.norm(se3_log(se3_compose(se3_inverse(a), b))))


def quat_from_matrix(R) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` with ``qw >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    if q[3] < 0.0:
        q = -q
    return q


def matrix_from_quat(q) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
