# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fusion kernel. Mirrors backends/numpy_backend.py: identical
accumulation order over patch positions and identical first-minimum
candidate selection, so both backends return bitwise-equal arrays."""

import numpy as np

from libc.math cimport fabs

name = "cython"

cdef double INF = float("inf")


cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t hi) nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def build_systems(vols, img_idx, ref_idx, num_idx, coords, offsets, cands,
                  double beta, double epsilon):
    cdef double[:, :, :, ::1] V = np.ascontiguousarray(vols, dtype=np.float64)
    cdef Py_ssize_t[::1] II = np.ascontiguousarray(img_idx, dtype=np.intp)
    cdef Py_ssize_t[::1] RI = np.ascontiguousarray(ref_idx, dtype=np.intp)
    cdef Py_ssize_t[::1] NI = np.ascontiguousarray(num_idx, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] X = np.ascontiguousarray(coords, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] OFF = np.ascontiguousarray(offsets, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] D = np.ascontiguousarray(cands, dtype=np.intp)

    cdef Py_ssize_t n_vox = X.shape[0]
    cdef Py_ssize_t n_atlas = II.shape[0]
    cdef Py_ssize_t n_patch = OFF.shape[0]
    cdef Py_ssize_t n_cand = D.shape[0]
    cdef Py_ssize_t h0 = V.shape[1] - 1
    cdef Py_ssize_t h1 = V.shape[2] - 1
    cdef Py_ssize_t h2 = V.shape[3] - 1

    grams_arr = np.zeros((n_vox, n_atlas, n_atlas))
    expo_arr = np.zeros((n_vox, n_atlas))
    cdef double[:, :, ::1] G = grams_arr
    cdef double[:, ::1] E = expo_arr
    if n_vox == 0 or n_atlas == 0:
        return grams_arr, expo_arr

    cdef double[:, ::1] res = np.empty((n_atlas, n_patch))
    cdef double[::1] refpatch = np.empty(n_patch)
    cdef Py_ssize_t[::1] y0 = np.empty(n_patch, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(n_patch, dtype=np.intp)
    cdef Py_ssize_t[::1] y2 = np.empty(n_patch, dtype=np.intp)

    cdef Py_ssize_t v, i, p, c, best_c
    cdef Py_ssize_t x0, x1, x2, z0, z1, z2, img, ref, num
    cdef double acc, best_cost, ai, den

    with nogil:
        for v in range(n_vox):
            x0 = X[v, 0]
            x1 = X[v, 1]
            x2 = X[v, 2]
            for i in range(n_atlas):
                img = II[i]
                ref = RI[i]
                num = NI[i]
                for p in range(n_patch):
                    y0[p] = _clip(x0 + OFF[p, 0], h0)
                    y1[p] = _clip(x1 + OFF[p, 1], h1)
                    y2[p] = _clip(x2 + OFF[p, 2], h2)
                    refpatch[p] = V[ref, y0[p], y1[p], y2[p]]

                best_cost = INF
                best_c = 0
                for c in range(n_cand):
                    acc = 0.0
                    for p in range(n_patch):
                        z0 = _clip(x0 + D[c, 0] + OFF[p, 0], h0)
                        z1 = _clip(x1 + D[c, 1] + OFF[p, 1], h1)
                        z2 = _clip(x2 + D[c, 2] + OFF[p, 2], h2)
                        acc += fabs(refpatch[p] - V[img, z0, z1, z2])
                        if acc >= best_cost:
                            # partial sums only grow, so this candidate
                            # can no longer beat the current best
                            acc = INF
                            break
                    if acc < best_cost:
                        best_cost = acc
                        best_c = c

                for p in range(n_patch):
                    z0 = _clip(y0[p] + D[best_c, 0], h0)
                    z1 = _clip(y1[p] + D[best_c, 1], h1)
                    z2 = _clip(y2[p] + D[best_c, 2], h2)
                    res[i, p] = fabs(refpatch[p] - V[img, z0, z1, z2])

                if num >= 0:
                    acc = 0.0
                    for p in range(n_patch):
                        den = res[i, p]
                        if den < epsilon:
                            den = epsilon
                        acc += fabs(refpatch[p] - V[num, y0[p], y1[p], y2[p]]) / den
                    E[v, i] = beta * acc

            for p in range(n_patch):
                for i in range(n_atlas):
                    ai = res[i, p]
                    for c in range(n_atlas):
                        G[v, i, c] += ai * res[c, p]

    return grams_arr, expo_arr
