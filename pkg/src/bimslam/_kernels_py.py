"""Vectorised numpy implementation of the factor kernels.

Mirrors ``_kernels.pyx`` function for function. Every routine takes stacked
arrays (leading axis = factor / pose index) and returns freshly allocated
arrays. ``bad`` outputs count residual rotations too close to pi.
"""
import numpy as np

SMALL = 1e-2
PI_GUARD = np.cos(np.pi - 1e-6)


def _hat(v):
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _coeffs(th2):
    small = th2 < SMALL * SMALL
    th2s = np.where(small, 1.0, th2)
    th = np.sqrt(th2s)
    s, c = np.sin(th), np.cos(th)
    t4 = th2 * th2
    A = np.where(small, 1.0 - th2 / 6.0 + t4 / 120.0, s / th)
    B = np.where(small, 0.5 - th2 / 24.0 + t4 / 720.0, (1.0 - c) / th2s)
    C = np.where(small, 1.0 / 6.0 - th2 / 120.0 + t4 / 5040.0, (th - s) / (th2s * th))
    D = np.where(
        small, 1.0 / 24.0 - th2 / 720.0 + t4 / 40320.0, (th2s + 2.0 * c - 2.0) / (2.0 * th2s * th2s)
    )
    E = np.where(
        small,
        1.0 / 120.0 - th2 / 2520.0 + t4 / 120960.0,
        (2.0 * th - 3.0 * s + th * c) / (2.0 * th2s * th2s * th),
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        F = np.where(small, 1.0 / 12.0 + th2 / 720.0 + t4 / 30240.0, 1.0 / th2s - (1.0 + c) / (2.0 * th * s))
    return A, B, C, D, E, F


def _mm(a, b):
    return np.einsum("...ij,...jk->...ik", a, b)


def _mv(a, v):
    return np.einsum("...ij,...j->...i", a, v)


def _so3_exp(phi):
    A, B, *_ = _coeffs(np.einsum("...i,...i->...", phi, phi))
    K = _hat(phi)
    return np.eye(3) + A[..., None, None] * K + B[..., None, None] * _mm(K, K)


def _so3_log(R):
    tr = np.trace(R, axis1=-2, axis2=-1)
    c = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    th = np.arccos(c)
    w = np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]], -1)
    th2 = th * th
    small = th < SMALL
    big = th > np.pi - 1e-3
    sin_th = np.where(small | big, 1.0, np.sin(th))
    scale = np.where(small, 0.5 * (1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0), th / (2.0 * sin_th))
    out = scale[..., None] * w
    if np.any(big):
        idx = np.flatnonzero(big.reshape(-1))
        Rb = R.reshape(-1, 3, 3)[idx]
        cb = c.reshape(-1)[idx]
        Bm = 0.5 * (Rb + np.swapaxes(Rb, -1, -2)) - cb[:, None, None] * np.eye(3)
        diag = np.diagonal(Bm, axis1=-2, axis2=-1)
        k = np.argmax(diag, axis=-1)
        axis = Bm[np.arange(len(idx)), :, k]
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        wb = w.reshape(-1, 3)[idx]
        sgn = np.where(np.einsum("ij,ij->i", axis, wb) < 0.0, -1.0, 1.0)
        flat = out.reshape(-1, 3)
        flat[idx] = (sgn * th.reshape(-1)[idx])[:, None] * axis
        out = flat.reshape(out.shape)
    return out


def _jl_inv(phi):
    *_, F = _coeffs(np.einsum("...i,...i->...", phi, phi))
    K = _hat(phi)
    return np.eye(3) - 0.5 * K + F[..., None, None] * _mm(K, K)


def _jl(phi):
    _, B, C, *_ = _coeffs(np.einsum("...i,...i->...", phi, phi))
    K = _hat(phi)
    return np.eye(3) + B[..., None, None] * K + C[..., None, None] * _mm(K, K)


def _q_matrix(rho, phi):
    _, _, C, D, E, _ = _coeffs(np.einsum("...i,...i->...", phi, phi))
    P, Rh = _hat(phi), _hat(rho)
    PR, RP = _mm(P, Rh), _mm(Rh, P)
    PRP = _mm(PR, P)
    PP = _mm(P, P)
    C, D, E = C[..., None, None], D[..., None, None], E[..., None, None]
    return (
        0.5 * Rh
        + C * (PR + RP + PRP)
        + D * (_mm(PP, Rh) + _mm(RP, P) - 3.0 * PRP)
        + E * (_mm(PRP, P) + _mm(_mm(PP, Rh), P))
    )


def se3_log_batch(R, t):
    """Stacked SE(3) logs; returns (xi, bad_count)."""
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    bad = int(np.count_nonzero(c < PI_GUARD))
    phi = _so3_log(R)
    rho = _mv(_jl_inv(phi), t)
    return np.concatenate([rho, phi], axis=-1), bad


def relpose_linearize(Ri, ti, Rj, tj, Rz, tz, jacobians=True):
    """Residual ``log(Z^-1 Ti^-1 Tj)`` and right-perturbation Jacobians."""
    Rit = np.swapaxes(Ri, -1, -2)
    Rzt = np.swapaxes(Rz, -1, -2)
    Rx = _mm(Rit, Rj)
    tx = _mv(Rit, tj - ti)
    RE = _mm(Rzt, Rx)
    tE = _mv(Rzt, tx - tz)
    r, bad = se3_log_batch(RE, tE)
    if not jacobians:
        return r, None, None, bad
    rho, phi = -r[:, :3], -r[:, 3:]
    Jinv = _jl_inv(phi)
    Jr = np.zeros((len(r), 6, 6))
    Jr[:, :3, :3] = Jinv
    Jr[:, 3:, 3:] = Jinv
    Jr[:, :3, 3:] = -_mm(_mm(Jinv, _q_matrix(rho, phi)), Jinv)
    # Ad(Tj^-1 Ti)
    Rjt = np.swapaxes(Rj, -1, -2)
    Ra = _mm(Rjt, Ri)
    ta = _mv(Rjt, ti - tj)
    Ad = np.zeros((len(r), 6, 6))
    Ad[:, :3, :3] = Ra
    Ad[:, 3:, 3:] = Ra
    Ad[:, :3, 3:] = _mm(_hat(ta), Ra)
    Ji = -_mm(Jr, Ad)
    return r, Ji, Jr, bad


def posewall_linearize(R, t, qw, qm, jacobians=True):
    """Residual of a world plane seen from pose ``(R, t)`` vs a local measurement.

    ``qw`` and ``qm`` are minimal coordinates (azimuth, elevation, offset).
    """
    az, el, off = qw[:, 0], qw[:, 1], qw[:, 2]
    ce, se = np.cos(el), np.sin(el)
    ca, sa = np.cos(az), np.sin(az)
    nw = np.stack([ce * ca, ce * sa, se], -1)
    nl = _mv(np.swapaxes(R, -1, -2), nw)
    dl = off + np.einsum("ij,ij->i", nw, t)
    s = np.where(dl < 0.0, -1.0, 1.0)
    nc = s[:, None] * nl
    dc = s * dl
    nxy2 = nc[:, 0] ** 2 + nc[:, 1] ** 2
    polar = nxy2 < 1e-24
    az_c = np.where(polar, 0.0, np.arctan2(nc[:, 1], nc[:, 0]))
    el_c = np.arcsin(np.clip(nc[:, 2], -1.0, 1.0))
    r = np.stack([az_c - qm[:, 0], el_c - qm[:, 1], dc - qm[:, 2]], -1)
    r[:, 0] = np.mod(r[:, 0] + np.pi, 2.0 * np.pi) - np.pi
    r[:, 0] = np.where(r[:, 0] == -np.pi, np.pi, r[:, 0])
    if not jacobians:
        return r, None, None
    n = len(r)
    safe = np.where(polar, 1.0, nxy2)
    daz_dn = np.stack([-nc[:, 1] / safe, nc[:, 0] / safe, np.zeros(n)], -1)
    daz_dn[polar] = 0.0
    del_dn = np.zeros((n, 3))
    del_dn[:, 2] = 1.0 / np.sqrt(np.maximum(1.0 - nc[:, 2] ** 2, 1e-300))
    M = np.stack([daz_dn, del_dn], 1)  # (n,2,3): d(az,el)/d n_c
    # pose block
    Jp = np.zeros((n, 3, 6))
    Jp[:, :2, 3:] = s[:, None, None] * _mm(M, _hat(nl))
    Jp[:, 2, :3] = s[:, None] * nl
    # wall block
    dn_daz = np.stack([-ce * sa, ce * ca, np.zeros(n)], -1)
    dn_del = np.stack([-se * ca, -se * sa, ce], -1)
    dNw = np.stack([dn_daz, dn_del], -1)  # (n,3,2)
    Rt = np.swapaxes(R, -1, -2)
    Jw = np.zeros((n, 3, 3))
    Jw[:, :2, :2] = s[:, None, None] * _mm(M, _mm(Rt, dNw))
    Jw[:, 2, :2] = s[:, None] * np.einsum("nij,ni->nj", dNw, t)
    Jw[:, 2, 2] = s
    return r, Jp, Jw


def retract_poses(R, t, delta):
    """Right retraction ``T exp(delta)`` applied row-wise."""
    rho, phi = delta[:, :3], delta[:, 3:]
    dR = _so3_exp(phi)
    dt = _mv(_jl(phi), rho)
    return _mm(R, dR), t + _mv(R, dt)


def arrowhead_factor(Td, To, B):
    """Factor the pose part of ``[[T, B], [B^T, W]]`` with T block tridiagonal.

    Returns ``(L, Lo, G, ok)``; ``G`` is (M, n, 6) and the wall Schur
    complement is ``W - G G^T``.
    """
    from scipy.linalg import solve_triangular

    n, M = Td.shape[0], B.shape[2]
    L = np.empty((n, 6, 6))
    Lo = np.zeros((max(n - 1, 0), 6, 6))
    G = np.zeros((M, n, 6))
    for i in range(n):
        A = Td[i].copy()
        rhs = B[i].T.copy()  # (M, 6)
        if i > 0:
            A -= Lo[i - 1] @ Lo[i - 1].T
            rhs -= G[:, i - 1, :] @ Lo[i - 1].T
        try:
            Li = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            return L, Lo, G, False
        L[i] = Li
        if i < n - 1:
            Lo[i] = solve_triangular(Li, To[i].T, lower=True).T
        if M:
            G[:, i, :] = solve_triangular(Li, rhs.T, lower=True).T
    return L, Lo, G, True


def arrowhead_forward(L, Lo, b):
    from scipy.linalg import solve_triangular

    y = np.array(b, dtype=float, copy=True)
    for i in range(len(L)):
        if i > 0:
            y[i] -= Lo[i - 1] @ y[i - 1]
        y[i] = solve_triangular(L[i], y[i], lower=True)
    return y


def arrowhead_backward(L, Lo, G, y, xw):
    from scipy.linalg import solve_triangular

    x = np.array(y, dtype=float, copy=True)
    n = len(L)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            x[i] -= Lo[i].T @ x[i + 1]
        if G.shape[0]:
            x[i] -= G[:, i, :].T @ xw
        x[i] = solve_triangular(L[i], x[i], lower=True, trans="T")
    return x
