# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled factor kernels. Same contract as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, acos, atan2, asin, fmod, M_PI

cnp.import_array()

cdef double SMALL = 1e-2
cdef double PI_GUARD = cos(M_PI - 1e-6)


cdef inline void hat3(const double* v, double* K) noexcept nogil:
    K[0] = 0.0;   K[1] = -v[2]; K[2] = v[1]
    K[3] = v[2];  K[4] = 0.0;   K[5] = -v[0]
    K[6] = -v[1]; K[7] = v[0];  K[8] = 0.0


cdef inline void mm3(const double* a, const double* b, double* c) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            c[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]


cdef inline void mtm3(const double* a, const double* b, double* c) noexcept nogil:
    # c = a^T b
    cdef int i, j
    for i in range(3):
        for j in range(3):
            c[3 * i + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j]


cdef inline void mv3(const double* a, const double* v, double* out) noexcept nogil:
    out[0] = a[0] * v[0] + a[1] * v[1] + a[2] * v[2]
    out[1] = a[3] * v[0] + a[4] * v[1] + a[5] * v[2]
    out[2] = a[6] * v[0] + a[7] * v[1] + a[8] * v[2]


cdef inline void mtv3(const double* a, const double* v, double* out) noexcept nogil:
    out[0] = a[0] * v[0] + a[3] * v[1] + a[6] * v[2]
    out[1] = a[1] * v[0] + a[4] * v[1] + a[7] * v[2]
    out[2] = a[2] * v[0] + a[5] * v[1] + a[8] * v[2]


cdef inline void coeffs(double th2, double* out) noexcept nogil:
    # out = A, B, C, D, E, F
    cdef double th, s, c, t4
    if th2 < SMALL * SMALL:
        t4 = th2 * th2
        out[0] = 1.0 - th2 / 6.0 + t4 / 120.0
        out[1] = 0.5 - th2 / 24.0 + t4 / 720.0
        out[2] = 1.0 / 6.0 - th2 / 120.0 + t4 / 5040.0
        out[3] = 1.0 / 24.0 - th2 / 720.0 + t4 / 40320.0
        out[4] = 1.0 / 120.0 - th2 / 2520.0 + t4 / 120960.0
        out[5] = 1.0 / 12.0 + th2 / 720.0 + t4 / 30240.0
        return
    th = sqrt(th2)
    s = sin(th)
    c = cos(th)
    out[0] = s / th
    out[1] = (1.0 - c) / th2
    out[2] = (th - s) / (th2 * th)
    out[3] = (th2 + 2.0 * c - 2.0) / (2.0 * th2 * th2)
    out[4] = (2.0 * th - 3.0 * s + th * c) / (2.0 * th2 * th2 * th)
    out[5] = 1.0 / th2 - (1.0 + c) / (2.0 * th * s)


cdef inline void poly3(const double* phi, double a, double b, double* out) noexcept nogil:
    # out = I + a K + b K^2
    cdef double K[9]
    cdef double K2[9]
    cdef int i
    hat3(phi, K)
    mm3(K, K, K2)
    for i in range(9):
        out[i] = a * K[i] + b * K2[i]
    out[0] += 1.0
    out[4] += 1.0
    out[8] += 1.0


cdef inline void so3_log(const double* R, double* phi) noexcept nogil:
    cdef double c = 0.5 * (R[0] + R[4] + R[8] - 1.0)
    cdef double th, th2, scale, B[9], nrm
    cdef double w0 = R[7] - R[5]
    cdef double w1 = R[2] - R[6]
    cdef double w2 = R[3] - R[1]
    cdef int k, i
    if c > 1.0:
        c = 1.0
    if c < -1.0:
        c = -1.0
    th = acos(c)
    if th < SMALL:
        th2 = th * th
        scale = 0.5 * (1.0 + th2 / 6.0 + 7.0 * th2 * th2 / 360.0)
    elif th > M_PI - 1e-3:
        for i in range(9):
            B[i] = 0.5 * (R[i] + R[3 * (i % 3) + i // 3])
        B[0] -= c
        B[4] -= c
        B[8] -= c
        k = 0
        if B[4] > B[0]:
            k = 1
        if B[8] > B[3 * k + k]:
            k = 2
        phi[0] = B[k]
        phi[1] = B[3 + k]
        phi[2] = B[6 + k]
        nrm = sqrt(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2])
        if phi[0] * w0 + phi[1] * w1 + phi[2] * w2 < 0.0:
            nrm = -nrm
        for i in range(3):
            phi[i] = th * phi[i] / nrm
        return
    else:
        scale = th / (2.0 * sin(th))
    phi[0] = scale * w0
    phi[1] = scale * w1
    phi[2] = scale * w2


cdef inline void q_matrix(const double* rho, const double* phi, double* Q) noexcept nogil:
    cdef double cf[6]
    cdef double P[9], Rh[9], PR[9], RP[9], PRP[9], PP[9], T1[9], T2[9], T3[9], T4[9]
    cdef int i
    coeffs(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2], cf)
    hat3(phi, P)
    hat3(rho, Rh)
    mm3(P, Rh, PR)
    mm3(Rh, P, RP)
    mm3(PR, P, PRP)
    mm3(P, P, PP)
    mm3(PP, Rh, T1)      # P P Rh
    mm3(RP, P, T2)       # Rh P P
    mm3(PRP, P, T3)      # P Rh P P
    mm3(T1, P, T4)       # P P Rh P
    for i in range(9):
        Q[i] = (0.5 * Rh[i] + cf[2] * (PR[i] + RP[i] + PRP[i])
                + cf[3] * (T1[i] + T2[i] - 3.0 * PRP[i])
                + cf[4] * (T3[i] + T4[i]))


def se3_log_batch(double[:, :, ::1] R, double[:, ::1] t):
    cdef Py_ssize_t n = R.shape[0], k
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, 6))
    cdef double[:, ::1] o = out
    cdef double phi[3], cf[6], Ji[9], rho[3]
    cdef int bad = 0
    with nogil:
        for k in range(n):
            if 0.5 * (R[k, 0, 0] + R[k, 1, 1] + R[k, 2, 2] - 1.0) < PI_GUARD:
                bad += 1
            so3_log(&R[k, 0, 0], phi)
            coeffs(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2], cf)
            poly3(phi, -0.5, cf[5], Ji)
            mv3(Ji, &t[k, 0], rho)
            o[k, 0] = rho[0]; o[k, 1] = rho[1]; o[k, 2] = rho[2]
            o[k, 3] = phi[0]; o[k, 4] = phi[1]; o[k, 5] = phi[2]
    return out, bad


def relpose_linearize(double[:, :, ::1] Ri, double[:, ::1] ti,
                      double[:, :, ::1] Rj, double[:, ::1] tj,
                      double[:, :, ::1] Rz, double[:, ::1] tz, bint jacobians=True):
    cdef Py_ssize_t n = Ri.shape[0], k
    cdef int a, b, q, bad = 0
    cdef cnp.ndarray[double, ndim=2] r_arr = np.empty((n, 6))
    cdef double[:, ::1] r = r_arr
    cdef cnp.ndarray[double, ndim=3] Ji_arr
    cdef cnp.ndarray[double, ndim=3] Jj_arr
    cdef double[:, :, ::1] Jim
    cdef double[:, :, ::1] Jjm
    cdef double Rx[9], RE[9], tx[3], tE[3], d[3], phi[3], rho[3], cf[6], Jinv[9]
    cdef double mphi[3], mrho[3], Q[9], tmp[9], UR[9], Ra[9], ta[3], Th[9], tR[9]
    cdef double Jr[36], Ad[36], s
    if jacobians:
        Ji_arr = np.empty((n, 6, 6))
        Jj_arr = np.empty((n, 6, 6))
        Jim = Ji_arr
        Jjm = Jj_arr
    with nogil:
        for k in range(n):
            mtm3(&Ri[k, 0, 0], &Rj[k, 0, 0], Rx)
            for a in range(3):
                d[a] = tj[k, a] - ti[k, a]
            mtv3(&Ri[k, 0, 0], d, tx)
            mtm3(&Rz[k, 0, 0], Rx, RE)
            for a in range(3):
                d[a] = tx[a] - tz[k, a]
            mtv3(&Rz[k, 0, 0], d, tE)
            if 0.5 * (RE[0] + RE[4] + RE[8] - 1.0) < PI_GUARD:
                bad += 1
            so3_log(RE, phi)
            coeffs(phi[0] * phi[0] + phi[1] * phi[1] + phi[2] * phi[2], cf)
            poly3(phi, -0.5, cf[5], Jinv)
            mv3(Jinv, tE, rho)
            for a in range(3):
                r[k, a] = rho[a]
                r[k, 3 + a] = phi[a]
            if not jacobians:
                continue
            # right Jacobian inverse at r: left inverse evaluated at -r
            for a in range(3):
                mphi[a] = -phi[a]
                mrho[a] = -rho[a]
            poly3(mphi, -0.5, cf[5], Jinv)
            q_matrix(mrho, mphi, Q)
            mm3(Jinv, Q, tmp)
            mm3(tmp, Jinv, UR)
            for a in range(3):
                for b in range(3):
                    Jr[6 * a + b] = Jinv[3 * a + b]
                    Jr[6 * (a + 3) + b + 3] = Jinv[3 * a + b]
                    Jr[6 * (a + 3) + b] = 0.0
                    Jr[6 * a + b + 3] = -UR[3 * a + b]
            # Ad(Tj^-1 Ti)
            mtm3(&Rj[k, 0, 0], &Ri[k, 0, 0], Ra)
            for a in range(3):
                d[a] = ti[k, a] - tj[k, a]
            mtv3(&Rj[k, 0, 0], d, ta)
            hat3(ta, Th)
            mm3(Th, Ra, tR)
            for a in range(3):
                for b in range(3):
                    Ad[6 * a + b] = Ra[3 * a + b]
                    Ad[6 * (a + 3) + b + 3] = Ra[3 * a + b]
                    Ad[6 * (a + 3) + b] = 0.0
                    Ad[6 * a + b + 3] = tR[3 * a + b]
            for a in range(6):
                for b in range(6):
                    Jjm[k, a, b] = Jr[6 * a + b]
                    s = 0.0
                    for q in range(6):
                        s = s + Jr[6 * a + q] * Ad[6 * q + b]
                    Jim[k, a, b] = -s
    if jacobians:
        return r_arr, Ji_arr, Jj_arr, bad
    return r_arr, None, None, bad


def posewall_linearize(double[:, :, ::1] R, double[:, ::1] t,
                       double[:, ::1] qw, double[:, ::1] qm, bint jacobians=True):
    cdef Py_ssize_t n = R.shape[0], k
    cdef int a, b
    cdef cnp.ndarray[double, ndim=2] r_arr = np.empty((n, 3))
    cdef double[:, ::1] r = r_arr
    cdef cnp.ndarray[double, ndim=3] Jp_arr
    cdef cnp.ndarray[double, ndim=3] Jw_arr
    cdef double[:, :, ::1] Jp
    cdef double[:, :, ::1] Jw
    cdef double ce, se, ca, sa, nw[3], nl[3], dl, sg, nc[3], dc, nxy2, az, el, v
    cdef double M[6], K[9], MK[6], dNw[6], RtdN[6], dn[3]
    if jacobians:
        Jp_arr = np.zeros((n, 3, 6))
        Jw_arr = np.zeros((n, 3, 3))
        Jp = Jp_arr
        Jw = Jw_arr
    with nogil:
        for k in range(n):
            ce = cos(qw[k, 1]); se = sin(qw[k, 1])
            ca = cos(qw[k, 0]); sa = sin(qw[k, 0])
            nw[0] = ce * ca; nw[1] = ce * sa; nw[2] = se
            mtv3(&R[k, 0, 0], nw, nl)
            dl = qw[k, 2] + nw[0] * t[k, 0] + nw[1] * t[k, 1] + nw[2] * t[k, 2]
            sg = -1.0 if dl < 0.0 else 1.0
            for a in range(3):
                nc[a] = sg * nl[a]
            dc = sg * dl
            nxy2 = nc[0] * nc[0] + nc[1] * nc[1]
            if nxy2 < 1e-24:
                az = 0.0
            else:
                az = atan2(nc[1], nc[0])
            v = nc[2]
            if v > 1.0:
                v = 1.0
            if v < -1.0:
                v = -1.0
            el = asin(v)
            v = fmod(az - qm[k, 0] + M_PI, 2.0 * M_PI)
            if v < 0.0:
                v = v + 2.0 * M_PI
            v = v - M_PI
            if v == -M_PI:
                v = M_PI
            r[k, 0] = v
            r[k, 1] = el - qm[k, 1]
            r[k, 2] = dc - qm[k, 2]
            if not jacobians:
                continue
            # M = d(az, el)/d n_c, 2x3 row-major
            if nxy2 < 1e-24:
                M[0] = 0.0; M[1] = 0.0
            else:
                M[0] = -nc[1] / nxy2; M[1] = nc[0] / nxy2
            M[2] = 0.0
            M[3] = 0.0; M[4] = 0.0
            v = 1.0 - nc[2] * nc[2]
            if v < 1e-300:
                v = 1e-300
            M[5] = 1.0 / sqrt(v)
            hat3(nl, K)
            for a in range(2):
                for b in range(3):
                    MK[3 * a + b] = M[3 * a] * K[b] + M[3 * a + 1] * K[3 + b] + M[3 * a + 2] * K[6 + b]
                    Jp[k, a, 3 + b] = sg * MK[3 * a + b]
            for b in range(3):
                Jp[k, 2, b] = sg * nl[b]
            # dNw: 3x2 columns d n_w / d az, d n_w / d el
            dNw[0] = -ce * sa; dNw[1] = -se * ca
            dNw[2] = ce * ca;  dNw[3] = -se * sa
            dNw[4] = 0.0;      dNw[5] = ce
            for b in range(2):
                dn[0] = dNw[b]; dn[1] = dNw[2 + b]; dn[2] = dNw[4 + b]
                mtv3(&R[k, 0, 0], dn, nw)
                RtdN[b] = nw[0]; RtdN[2 + b] = nw[1]; RtdN[4 + b] = nw[2]
                Jw[k, 2, b] = sg * (dn[0] * t[k, 0] + dn[1] * t[k, 1] + dn[2] * t[k, 2])
            for a in range(2):
                for b in range(2):
                    Jw[k, a, b] = sg * (M[3 * a] * RtdN[b] + M[3 * a + 1] * RtdN[2 + b] + M[3 * a + 2] * RtdN[4 + b])
            Jw[k, 2, 2] = sg
    if jacobians:
        return r_arr, Jp_arr, Jw_arr
    return r_arr, None, None


def retract_poses(double[:, :, ::1] R, double[:, ::1] t, double[:, ::1] delta):
    cdef Py_ssize_t n = R.shape[0], k
    cdef int a
    cdef cnp.ndarray[double, ndim=3] Ro_arr = np.empty((n, 3, 3))
    cdef cnp.ndarray[double, ndim=2] to_arr = np.empty((n, 3))
    cdef double[:, :, ::1] Ro = Ro_arr
    cdef double[:, ::1] to = to_arr
    cdef double cf[6], dR[9], Jl[9], dt[3], Rd[9], w[3]
    with nogil:
        for k in range(n):
            coeffs(delta[k, 3] * delta[k, 3] + delta[k, 4] * delta[k, 4] + delta[k, 5] * delta[k, 5], cf)
            poly3(&delta[k, 3], cf[0], cf[1], dR)
            poly3(&delta[k, 3], cf[1], cf[2], Jl)
            mv3(Jl, &delta[k, 0], dt)
            mm3(&R[k, 0, 0], dR, Rd)
            mv3(&R[k, 0, 0], dt, w)
            for a in range(9):
                Ro[k, a // 3, a % 3] = Rd[a]
            for a in range(3):
                to[k, a] = t[k, a] + w[a]
    return Ro_arr, to_arr


# ---------------------------------------------------------------------------
# Block-tridiagonal-with-border ("arrowhead") Cholesky
# ---------------------------------------------------------------------------


cdef inline int chol6(double* A) noexcept nogil:
    """In-place lower Cholesky of a row-major 6x6 block; -1 if not positive definite."""
    cdef int i, j, k
    cdef double s, v
    for j in range(6):
        s = A[6 * j + j]
        for k in range(j):
            s -= A[6 * j + k] * A[6 * j + k]
        if s <= 0.0:
            return -1
        s = sqrt(s)
        A[6 * j + j] = s
        for i in range(j + 1, 6):
            v = A[6 * i + j]
            for k in range(j):
                v -= A[6 * i + k] * A[6 * j + k]
            A[6 * i + j] = v / s
            A[6 * j + i] = 0.0
    return 0


cdef inline void fwd6(const double* L, double* x) noexcept nogil:
    # x <- L^-1 x
    cdef int j, k
    cdef double v
    for j in range(6):
        v = x[j]
        for k in range(j):
            v -= L[6 * j + k] * x[k]
        x[j] = v / L[6 * j + j]


cdef inline void bwd6(const double* L, double* x) noexcept nogil:
    # x <- L^-T x
    cdef int j, k
    cdef double v
    for j in range(5, -1, -1):
        v = x[j]
        for k in range(j + 1, 6):
            v -= L[6 * k + j] * x[k]
        x[j] = v / L[6 * j + j]


def arrowhead_factor(double[:, :, ::1] Td, double[:, :, ::1] To, double[:, :, ::1] B):
    """Factor the pose part of ``[[T, B], [B^T, W]]`` with T block tridiagonal.

    ``Td`` (n,6,6) diagonal blocks, ``To`` (n-1,6,6) blocks (i+1, i), ``B``
    (n,6,M) border. Returns ``(L, Lo, G, ok)`` with ``G`` shaped (M, n, 6) so
    that the wall Schur complement is ``W - G G^T``.
    """
    cdef Py_ssize_t n = Td.shape[0], M = B.shape[2]
    L_arr = np.empty((n, 6, 6))
    Lo_arr = np.zeros((max(n - 1, 0), 6, 6))
    G_arr = np.zeros((M, n, 6))
    cdef double[:, :, ::1] L = L_arr
    cdef double[:, :, ::1] Lo = Lo_arr
    cdef double[:, :, ::1] G = G_arr
    cdef double A[36]
    cdef double v[6]
    cdef Py_ssize_t i, m
    cdef int a, b, k, ok = 1
    cdef bint live
    with nogil:
        for i in range(n):
            for a in range(6):
                for b in range(6):
                    A[6 * a + b] = Td[i, a, b]
            if i > 0:
                for a in range(6):
                    for b in range(a + 1):
                        for k in range(6):
                            A[6 * a + b] -= Lo[i - 1, a, k] * Lo[i - 1, b, k]
                for a in range(6):
                    for b in range(a + 1, 6):
                        A[6 * a + b] = A[6 * b + a]
            if chol6(A) != 0:
                ok = 0
                break
            for a in range(6):
                for b in range(6):
                    L[i, a, b] = A[6 * a + b]
            if i < n - 1:
                for a in range(6):
                    for b in range(6):
                        v[b] = To[i, a, b]
                    fwd6(A, v)
                    for b in range(6):
                        Lo[i, a, b] = v[b]
            for m in range(M):
                live = False
                for a in range(6):
                    v[a] = B[i, a, m]
                    if v[a] != 0.0:
                        live = True
                if i > 0:
                    for k in range(6):
                        if G[m, i - 1, k] != 0.0:
                            live = True
                            break
                    if live:
                        for a in range(6):
                            for k in range(6):
                                v[a] -= G[m, i - 1, k] * Lo[i - 1, a, k]
                if not live:
                    continue
                fwd6(A, v)
                for a in range(6):
                    G[m, i, a] = v[a]
    return L_arr, Lo_arr, G_arr, bool(ok)


def arrowhead_forward(double[:, :, ::1] L, double[:, :, ::1] Lo, double[:, ::1] b):
    """Pose part of ``L y = b``; ``b`` is (n, 6)."""
    cdef Py_ssize_t n = L.shape[0], i
    y_arr = np.array(b, copy=True)
    cdef double[:, ::1] y = y_arr
    cdef int a, k
    with nogil:
        for i in range(n):
            if i > 0:
                for a in range(6):
                    for k in range(6):
                        y[i, a] -= Lo[i - 1, a, k] * y[i - 1, k]
            fwd6(&L[i, 0, 0], &y[i, 0])
    return y_arr


def arrowhead_backward(double[:, :, ::1] L, double[:, :, ::1] Lo, double[:, :, ::1] G,
                       double[:, ::1] y, double[::1] xw):
    """Pose part of ``L^T x = y`` given the already solved wall part ``xw``."""
    cdef Py_ssize_t n = L.shape[0], M = G.shape[0], i, m
    x_arr = np.array(y, copy=True)
    cdef double[:, ::1] x = x_arr
    cdef int a, k
    with nogil:
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                for a in range(6):
                    for k in range(6):
                        x[i, a] -= Lo[i, k, a] * x[i + 1, k]
            for m in range(M):
                if xw[m] != 0.0:
                    for a in range(6):
                        x[i, a] -= G[m, i, a] * xw[m]
            bwd6(&L[i, 0, 0], &x[i, 0])
    return x_arr
