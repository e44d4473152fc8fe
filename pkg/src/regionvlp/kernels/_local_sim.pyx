# cython: language_level=3
"""Compiled region-word similarity kernel for retrieval scoring.

Inputs are pre-normalized and zero-padded; see ``regionvlp.kernels``.
"""
import numpy as np

from libc.math cimport exp, sqrt


cdef double _attend(
    const double[:, ::1] sims_rows,
    Py_ssize_t row,
    Py_ssize_t count,
    const double[:, ::1] keys,
    const double[::1] query,
    bint refine,
    double[::1] weights,
    double[::1] acc,
) noexcept nogil:
    """cos(query, sum of refined softmax weights times keys) for one row."""
    cdef Py_ssize_t k, c, d = keys.shape[1]
    cdef double mx = sims_rows[row, 0], total = 0.0, a, thr, norm = 0.0, dot = 0.0
    for k in range(1, count):
        if sims_rows[row, k] > mx:
            mx = sims_rows[row, k]
    for k in range(count):
        weights[k] = exp(sims_rows[row, k] - mx)
        total += weights[k]
    for c in range(d):
        acc[c] = 0.0
    thr = 1.0 / count
    for k in range(count):
        a = weights[k] / total
        if refine and count > 1 and not (a > thr):
            continue
        for c in range(d):
            acc[c] += a * keys[k, c]
    for c in range(d):
        norm += acc[c] * acc[c]
        dot += acc[c] * query[c]
    if norm <= 0.0:
        return 0.0
    return dot / sqrt(norm)


def local_similarities(
    const double[:, :, ::1] regions,
    const int[::1] region_len,
    const double[:, :, ::1] words,
    const int[::1] word_len,
    bint refine=True,
):
    """Return (v2l, l2v), each [V, C] and indexed [video, caption]."""
    cdef Py_ssize_t V = regions.shape[0], C = words.shape[0]
    cdef Py_ssize_t n_max = regions.shape[1], l_max = words.shape[1], d = regions.shape[2]
    cdef Py_ssize_t i, j, n, l, c, n_i, l_j
    cdef double s, acc_total
    v2l_arr = np.zeros((V, C), dtype=np.float64)
    l2v_arr = np.zeros((V, C), dtype=np.float64)
    cdef double[:, ::1] v2l = v2l_arr
    cdef double[:, ::1] l2v = l2v_arr
    cdef double[:, ::1] sims = np.zeros((max(n_max, 1), max(l_max, 1)), dtype=np.float64)
    cdef double[:, ::1] sims_t = np.zeros((max(l_max, 1), max(n_max, 1)), dtype=np.float64)
    cdef double[::1] weights = np.zeros(max(n_max, l_max, 1), dtype=np.float64)
    cdef double[::1] acc = np.zeros(max(d, 1), dtype=np.float64)
    with nogil:
        for i in range(V):
            n_i = region_len[i]
            for j in range(C):
                l_j = word_len[j]
                for n in range(n_i):
                    for l in range(l_j):
                        s = 0.0
                        for c in range(d):
                            s = s + regions[i, n, c] * words[j, l, c]
                        sims[n, l] = s
                        sims_t[l, n] = s
                acc_total = 0.0
                for n in range(n_i):
                    acc_total += _attend(sims, n, l_j, words[j], regions[i, n], refine, weights, acc)
                v2l[i, j] = acc_total / n_i
                acc_total = 0.0
                for l in range(l_j):
                    acc_total += _attend(sims_t, l, n_i, regions[i], words[j, l], refine, weights, acc)
                l2v[i, j] = acc_total / l_j
    return v2l_arr, l2v_arr
