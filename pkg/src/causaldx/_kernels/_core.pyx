# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counting kernels; contracts mirror ``_fallback`` exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

IMPL = "cython"


def transition_counts(cnp.int32_t[::1] codes,
                      cnp.int64_t[::1] visit_ptr,
                      cnp.int64_t[::1] patient_ptr,
                      Py_ssize_t n_codes):
    """Successor/occurrence counts; see ``_fallback.transition_counts``."""
    num_arr = np.zeros((n_codes, n_codes), dtype=np.int64)
    den_arr = np.zeros(n_codes, dtype=np.int64)
    succ_arr = np.empty(n_codes, dtype=np.int32)
    stamp_arr = np.zeros(n_codes, dtype=np.int64)

    cdef cnp.int64_t[:, ::1] num = num_arr
    cdef cnp.int64_t[::1] den = den_arr
    cdef cnp.int32_t[::1] succ = succ_arr
    cdef cnp.int64_t[::1] stamp = stamp_arr

    cdef Py_ssize_t n_patients = patient_ptr.shape[0] - 1
    cdef Py_ssize_t p, v, i, j, n_succ
    cdef cnp.int64_t tick = 0
    cdef cnp.int32_t a, b

    for p in range(n_patients):
        for v in range(patient_ptr[p], patient_ptr[p + 1] - 1):
            tick += 1
            n_succ = 0
            # union of the current and next visit, deduplicated via stamps
            for i in range(visit_ptr[v], visit_ptr[v + 2]):
                b = codes[i]
                if stamp[b] != tick:
                    stamp[b] = tick
                    succ[n_succ] = b
                    n_succ += 1
            for i in range(visit_ptr[v], visit_ptr[v + 1]):
                a = codes[i]
                den[a] += 1
                for j in range(n_succ):
                    num[a, succ[j]] += 1
    return num_arr, den_arr


def node_config_counts(const cnp.uint8_t[:, ::1] ad,
                       Py_ssize_t node,
                       cnp.int32_t[::1] parents):
    """Parent-config counts for one node; see ``_fallback.node_config_counts``."""
    cdef Py_ssize_t q = parents.shape[0]
    cdef Py_ssize_t n_cfg = 1 << q
    counts_arr = np.zeros(n_cfg, dtype=np.int64)
    ones_arr = np.zeros(n_cfg, dtype=np.int64)

    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.int64_t[::1] ones = ones_arr
    cdef Py_ssize_t n_patients = ad.shape[0]
    cdef Py_ssize_t p, j, cfg

    for p in range(n_patients):
        cfg = 0
        for j in range(q):
            if ad[p, parents[j]]:
                cfg |= 1 << j
        counts[cfg] += 1
        if ad[p, node]:
            ones[cfg] += 1
    return counts_arr, ones_arr
