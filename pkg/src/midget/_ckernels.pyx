# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()


def nearest_code(const double[:, ::1] e, const double[:, ::1] codes):
    """Index of the nearest code row for every row of ``e`` (ties -> lowest index)."""
    cdef Py_ssize_t n_rows = e.shape[0], n_codes = codes.shape[0], dim = e.shape[1]
    cdef Py_ssize_t i, j, c
    cdef double best, dist, diff
    cdef Py_ssize_t best_j
    out = np.empty(n_rows, dtype=np.int64)
    cdef long long[::1] out_v = out
    for i in range(n_rows):
        best = INFINITY
        best_j = 0
        for j in range(n_codes):
            dist = 0.0
            for c in range(dim):
                diff = e[i, c] - codes[j, c]
                dist = dist + diff * diff
            if dist < best:
                best = dist
                best_j = j
        out_v[i] = best_j
    return out


def speed_minima(const double[::1] speed):
    """Interior local minima of a 1-D curve; a flat valley reports its first frame."""
    cdef Py_ssize_t n = speed.shape[0]
    cdef Py_ssize_t t = 1, end
    found = []
    while t < n - 1:
        if speed[t] < speed[t - 1]:
            end = t
            while end + 1 < n and speed[end + 1] == speed[t]:
                end += 1
            if end + 1 < n and speed[end + 1] > speed[t]:
                found.append(t)
            t = end + 1
        else:
            t += 1
    return np.asarray(found, dtype=np.int64)


def nearest_distance(const double[::1] src, const double[::1] sorted_targets):
    """Distance from each ``src`` value to the closest target (inf if no targets)."""
    cdef Py_ssize_t n = src.shape[0], m = sorted_targets.shape[0]
    cdef Py_ssize_t i, lo, hi, mid
    cdef double x, best, d
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] out_v = out
    for i in range(n):
        x = src[i]
        if m == 0:
            out_v[i] = INFINITY
            continue
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if sorted_targets[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        best = INFINITY
        if lo < m:
            best = fabs(sorted_targets[lo] - x)
        if lo > 0:
            d = fabs(x - sorted_targets[lo - 1])
            if d < best:
                best = d
        out_v[i] = best
    return out
