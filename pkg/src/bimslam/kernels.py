"""Factor-kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Set ``BIMSLAM_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("BIMSLAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _kernels_py


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "python") or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def relpose_linearize(*args, **kw):
    return _impl.relpose_linearize(*args, **kw)


def posewall_linearize(*args, **kw):
    return _impl.posewall_linearize(*args, **kw)


def retract_poses(*args, **kw):
    return _impl.retract_poses(*args, **kw)


def se3_log_batch(*args, **kw):
    return _impl.se3_log_batch(*args, **kw)


def arrowhead_factor(*args, **kw):
    return _impl.arrowhead_factor(*args, **kw)


def arrowhead_forward(*args, **kw):
    return _impl.arrowhead_forward(*args, **kw)


def arrowhead_backward(*args, **kw):
    return _impl.arrowhead_backward(*args, **kw)
