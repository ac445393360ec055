"""Numpy implementations of the per-trajectory geometry kernels.

Used when the compiled extension is unavailable or when
``TRAJGEOM_FORCE_PYTHON=1`` is set. Signatures and results match
``_ckernels`` to floating-point rounding.
"""
import numpy as np
from scipy.spatial.distance import cdist


def path_stats(states):
    """Return ``(path_length, net_displacement)`` of a ``(n, d)`` float64 array."""
    steps = np.diff(states, axis=0)
    path_length = float(np.sqrt(np.einsum("ij,ij->i", steps, steps)).sum())
    disp = states[-1] - states[0]
    return path_length, float(np.sqrt(disp @ disp))


def menger_profile(states, eps):
    a = states[:-2]
    b = states[1:-1]
    c = states[2:]
    u = b - a
    v = c - a
    w = c - b
    uu = np.einsum("ij,ij->i", u, u)
    vv = np.einsum("ij,ij->i", v, v)
    ww = np.einsum("ij,ij->i", w, w)
    uv = np.einsum("ij,ij->i", u, v)
    ab = np.sqrt(uu)
    ac = np.sqrt(vv)
    bc = np.sqrt(ww)
    degenerate = (ab <= eps) | (ac <= eps) | (bc <= eps)
    gram = np.maximum(uu * vv - uv * uv, 0.0)
    denom = np.where(degenerate, 1.0, ab * bc * ac)
    kappa = np.where(degenerate, 0.0, 2.0 * np.sqrt(gram) / denom)
    return kappa, degenerate.astype(np.uint8)


def two_nn(states):
    """Distances to the first and second nearest neighbour of every row."""
    dist = cdist(states, states)
    np.fill_diagonal(dist, np.inf)
    part = np.partition(dist, 1, axis=1)[:, :2]
    return part[:, 0].copy(), part[:, 1].copy()
