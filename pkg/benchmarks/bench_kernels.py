"""Compiled kernels against the numpy fallback, plus the arrowhead solver against
a general sparse LU and an end-to-end session timing for each backend.

    python benchmarks/bench_kernels.py [--n 2000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from bimslam import factor_graph, kernels
from bimslam.geometry import canonicalize_plane, plane_to_minimal, se3_exp
from bimslam.session import Scenario, run_session


def pose_batch(rng, n):
    P = [se3_exp(np.concatenate([rng.normal(0, 2, 3), rng.normal(0, 0.8, 3)])) for _ in range(n)]
    return np.array([p.rotation for p in P]), np.array([p.translation for p in P])


def plane_batch(rng, n):
    return np.array([plane_to_minimal(canonicalize_plane(rng.normal(size=3), rng.uniform(0.5, 3))).as_array()
                     for _ in range(n)])


def arrowhead_blocks(rng, n, m):
    """Random SPD system with a block-tridiagonal pose part and a dense wall border."""
    dim = 6 * n + m
    rows = []
    for i in range(n - 1):
        J = np.zeros((6, dim))
        J[:, 6 * i:6 * i + 12] = rng.normal(size=(6, 12))
        rows.append(J)
    for k in range(4 * n):
        J = np.zeros((3, dim))
        i = rng.integers(n)
        J[:, 6 * i:6 * i + 6] = rng.normal(size=(3, 6))
        J[:, 6 * n + rng.integers(m)] = rng.normal(size=3)
        rows.append(J)
    J = np.vstack(rows)
    return J.T @ J + np.eye(dim)


def solve_arrowhead(K, A, b, n, m):
    Td = np.ascontiguousarray([A[6 * i:6 * i + 6, 6 * i:6 * i + 6] for i in range(n)])
    To = np.ascontiguousarray([A[6 * i + 6:6 * i + 12, 6 * i:6 * i + 6] for i in range(n - 1)])
    Bm = np.ascontiguousarray([A[6 * i:6 * i + 6, 6 * n:] for i in range(n)])
    L, Lo, G, ok = K.arrowhead_factor(Td, To, Bm)
    y = K.arrowhead_forward(L, Lo, np.ascontiguousarray(b[:6 * n].reshape(n, 6)))
    Gm = np.asarray(G).reshape(m, 6 * n)
    S = A[6 * n:, 6 * n:] - Gm @ Gm.T
    xw = np.linalg.solve(S, b[6 * n:] - Gm @ np.asarray(y).reshape(-1))
    return K.arrowhead_backward(L, Lo, G, y, np.ascontiguousarray(xw))


def best(stmt, repeat):
    return min(timeit.repeat(stmt, number=1, repeat=repeat))


def session_time(backend: str, repeat: int) -> float:
    saved = kernels._impl, kernels.BACKEND
    kernels._impl, kernels.BACKEND = kernels.get_backend(backend), backend
    try:
        return best(lambda: run_session(Scenario(seed=0)), repeat)
    finally:
        kernels._impl, kernels.BACKEND = saved


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000, help="factors per kernel call")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-session", action="store_true")
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    n = args.n
    Ri, ti = pose_batch(rng, n)
    Rj, tj = pose_batch(rng, n)
    Rz, tz = pose_batch(rng, n)
    qw, qm = plane_batch(rng, n), plane_batch(rng, n)
    d = rng.normal(0, 0.1, (n, 6))

    backends = ["python"]
    try:
        kernels.get_backend("cython")
        backends.append("cython")
    except ImportError:
        print("compiled kernels not built; timing the numpy fallback only")

    cases = {
        "relpose_linearize": lambda K: K.relpose_linearize(Ri, ti, Rj, tj, Rz, tz, True),
        "posewall_linearize": lambda K: K.posewall_linearize(Ri, ti, qw, qm, True),
        "retract_poses": lambda K: K.retract_poses(Ri, ti, d),
        "se3_log_batch": lambda K: K.se3_log_batch(Ri, ti),
    }
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        times = [best(lambda K=kernels.get_backend(b): fn(K), args.repeat) for b in backends]
        row = f"{name:<22}" + "".join(f"{1e3 * t:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)

    print()
    n_pose, n_wall = 400, 40
    A = arrowhead_blocks(rng, n_pose, n_wall)
    b = rng.normal(size=A.shape[0])
    As = sp.csc_matrix(A)
    ref = spla.splu(As).solve(b)
    t_lu = best(lambda: spla.splu(As).solve(b), args.repeat)
    print(f"linear solve, {n_pose} poses + {n_wall} walls")
    print(f"  {'sparse LU':<20}{1e3 * t_lu:>10.2f}ms")
    for bk in backends:
        K = kernels.get_backend(bk)
        x = np.asarray(solve_arrowhead(K, A, b, n_pose, n_wall)).reshape(-1)
        err = np.max(np.abs(x - ref[:6 * n_pose]))
        t = best(lambda: solve_arrowhead(K, A, b, n_pose, n_wall), args.repeat)
        print(f"  {'arrowhead/' + bk:<20}{1e3 * t:>10.2f}ms   max diff vs LU {err:.1e}")

    if not args.skip_session:
        print()
        print(f"200-frame session (solver setting {factor_graph.SOLVER!r})")
        for bk in backends:
            print(f"  {bk:<20}{session_time(bk, min(args.repeat, 3)):>10.2f}s")


if __name__ == "__main__":
    main()
