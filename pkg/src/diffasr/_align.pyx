# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Levenshtein alignment over integer token ids."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def align(ref, hyp):
    """Same contract as ``_align_py.align``; inputs are sequences of ints."""
    cdef cnp.int64_t[::1] a = np.ascontiguousarray(ref, dtype=np.int64)
    cdef cnp.int64_t[::1] b = np.ascontiguousarray(hyp, dtype=np.int64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0]
    cdef cnp.int32_t[:, ::1] t = np.empty((n + 1, m + 1), dtype=np.int32)
    cdef Py_ssize_t i, j
    cdef int best, d, ins_c, cost, sub = 0, dele = 0, ins = 0
    for j in range(m + 1):
        t[0, j] = j
    for i in range(1, n + 1):
        t[i, 0] = i
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = t[i - 1, j - 1] + cost
            d = t[i - 1, j] + 1
            if d < best:
                best = d
            ins_c = t[i, j - 1] + 1
            if ins_c < best:
                best = ins_c
            t[i, j] = best
    i = n
    j = m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if a[i - 1] == b[j - 1] else 1
            if t[i, j] == t[i - 1, j - 1] + cost:
                sub += cost
                i -= 1
                j -= 1
                continue
        if i > 0 and t[i, j] == t[i - 1, j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(t[n, m]), sub, dele, ins
