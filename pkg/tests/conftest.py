import numpy as np
import pytest

from bimslam.geometry import PoseSE3, canonicalize_plane, se3_exp


def random_pose(rng, scale=1.0) -> PoseSE3:
    xi = rng.normal(size=6)
    xi[3:] *= 0.8
    xi[:3] *= scale
    return se3_exp(xi)


def random_plane(rng):
    return canonicalize_plane(rng.normal(size=3), rng.uniform(-3, 3))


def refit_plane(points):
    """Oracle: plane through three non-collinear points, canonicalised."""
    a, b, c = np.asarray(points, dtype=float)
    n = np.cross(b - a, c - a)
    return canonicalize_plane(n, -float(n @ a))


def points_on_plane(plane, rng, k=3):
    n = plane.normal
    u = np.cross(n, [1.0, 0.0, 0.0] if abs(n[0]) < 0.9 else [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    base = -plane.offset * n
    return [base + s * u + t * v for s, t in rng.uniform(-5, 5, size=(k, 2))]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
