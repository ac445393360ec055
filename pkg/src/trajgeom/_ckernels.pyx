# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-trajectory geometry kernels (see ``_pykernels`` for the reference)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def path_stats(const double[:, ::1] states):
    cdef Py_ssize_t n = states.shape[0], d = states.shape[1]
    cdef Py_ssize_t t, j
    cdef double total = 0.0, seg, diff
    for t in range(1, n):
        seg = 0.0
        for j in range(d):
            diff = states[t, j] - states[t - 1, j]
            seg += diff * diff
        total += sqrt(seg)
    seg = 0.0
    for j in range(d):
        diff = states[n - 1, j] - states[0, j]
        seg += diff * diff
    return total, sqrt(seg)


def menger_profile(const double[:, ::1] states, double eps):
    cdef Py_ssize_t n = states.shape[0], d = states.shape[1]
    cdef Py_ssize_t m = n - 2 if n > 2 else 0
    kappa_arr = np.zeros(m, dtype=np.float64)
    flag_arr = np.zeros(m, dtype=np.uint8)
    cdef double[::1] kappa = kappa_arr
    cdef unsigned char[::1] flag = flag_arr
    cdef Py_ssize_t t, j
    cdef double uu, vv, ww, uv, du, dv, dw, gram, ab, ac, bc
    for t in range(m):
        uu = 0.0
        vv = 0.0
        ww = 0.0
        uv = 0.0
        for j in range(d):
            du = states[t + 1, j] - states[t, j]
            dv = states[t + 2, j] - states[t, j]
            dw = states[t + 2, j] - states[t + 1, j]
            uu += du * du
            vv += dv * dv
            ww += dw * dw
            uv += du * dv
        ab = sqrt(uu)
        ac = sqrt(vv)
        bc = sqrt(ww)
        if ab <= eps or ac <= eps or bc <= eps:
            flag[t] = 1
            continue
        gram = uu * vv - uv * uv
        if gram < 0.0:
            gram = 0.0
        kappa[t] = 2.0 * sqrt(gram) / (ab * bc * ac)
    return kappa_arr, flag_arr


def two_nn(const double[:, ::1] states):
    cdef Py_ssize_t n = states.shape[0], d = states.shape[1]
    r1_arr = np.full(n, np.inf, dtype=np.float64)
    r2_arr = np.full(n, np.inf, dtype=np.float64)
    cdef double[::1] r1 = r1_arr
    cdef double[::1] r2 = r2_arr
    cdef Py_ssize_t i, k, j
    cdef double acc, diff, dist
    for i in range(n):
        for k in range(i + 1, n):
            acc = 0.0
            for j in range(d):
                diff = states[i, j] - states[k, j]
                acc += diff * diff
            dist = sqrt(acc)
            if dist < r1[i]:
                r2[i] = r1[i]
                r1[i] = dist
            elif dist < r2[i]:
                r2[i] = dist
            if dist < r1[k]:
                r2[k] = r1[k]
                r1[k] = dist
            elif dist < r2[k]:
                r2[k] = dist
    return r1_arr, r2_arr
