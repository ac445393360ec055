"""Backend selection for the geometry kernels.

The compiled ``_ckernels`` extension is preferred; the numpy module
``_pykernels`` is used when the extension was not built or when the
environment variable ``TRAJGEOM_FORCE_PYTHON`` is set to a non-empty value
other than ``0``.
"""
import os

import numpy as np

from trajgeom import _pykernels

_force_python = os.environ.get("TRAJGEOM_FORCE_PYTHON", "") not in ("", "0")

try:
    if _force_python:
        raise ImportError("python backend forced")
    from trajgeom import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"


def _as_states(states):
    return np.ascontiguousarray(states, dtype=np.float64)


def path_stats(states, backend=None):
    return _pick(backend).path_stats(_as_states(states))


def menger_profile(states, eps, backend=None):
    return _pick(backend).menger_profile(_as_states(states), float(eps))


def two_nn(states, backend=None):
    return _pick(backend).two_nn(_as_states(states))


def available_backends():
    out = ["python"]
    if _impl is not _pykernels:
        out.insert(0, "cython")
    return out


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _pykernels
    if backend == "cython":
        if _impl is _pykernels:
            raise ImportError("compiled kernels are not built")
        return _impl
    raise ValueError(f"unknown backend {backend!r}")
