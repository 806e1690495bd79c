"""Numpy implementations of the hot counting kernels.

These are the import-time fallback when the compiled extension is missing.
Both lanes share the exact same contracts and must produce identical
integer counts; the test suite asserts equality whenever the compiled
module is available.
"""

from __future__ import annotations

import numpy as np

IMPL = "python"


def transition_counts(codes, visit_ptr, patient_ptr, n_codes):
    """Successor and occurrence counts for the transition-probability matrix.

    Args:
        codes: int32 array, all visit code indices flattened.
        visit_ptr: int64 array, offsets into ``codes`` per visit (len = visits+1).
        patient_ptr: int64 array, offsets into ``visit_ptr`` per patient
            (len = patients+1); patient p owns visits
            ``visit_ptr[patient_ptr[p] : patient_ptr[p+1]+1]`` boundaries.
        n_codes: size of the code registry.

    Returns:
        (num, den): int64 arrays of shape (n_codes, n_codes) and (n_codes,).
        ``num[a, b]`` counts non-final visits holding ``a`` whose own or next
        visit holds ``b``; ``den[a]`` counts non-final visits holding ``a``.
    """
    num = np.zeros((n_codes, n_codes), dtype=np.int64)
    den = np.zeros(n_codes, dtype=np.int64)
    n_patients = len(patient_ptr) - 1
    for p in range(n_patients):
        first, last = patient_ptr[p], patient_ptr[p + 1]
        for v in range(first, last - 1):
            cur = codes[visit_ptr[v]:visit_ptr[v + 1]]
            nxt = codes[visit_ptr[v + 1]:visit_ptr[v + 2]]
            succ = np.union1d(cur, nxt)
            den[cur] += 1
            num[np.ix_(cur, succ)] += 1
    return num, den


def node_config_counts(ad, node, parents):
    """Parent-configuration occurrence counts for one node of a DAG.

    Args:
        ad: uint8 C-contiguous matrix (patients x codes), entries in {0, 1}.
        node: column index of the scored node.
        parents: int32 array of parent column indices (possibly empty).

    Returns:
        (counts, ones): int64 arrays of length ``2**len(parents)`` where
        configuration ids pack parent bits in ``parents`` order (parent j
        contributes bit j); ``counts[c]`` is the number of patients showing
        configuration c and ``ones[c]`` how many of those also show ``node``.
    """
    q = len(parents)
    n_cfg = 1 << q
    if q == 0:
        col = ad[:, node]
        ones = np.array([int(col.sum())], dtype=np.int64)
        return np.array([ad.shape[0]], dtype=np.int64), ones
    weights = (np.int64(1) << np.arange(q, dtype=np.int64))
    cfg = ad[:, parents].astype(np.int64) @ weights
    counts = np.bincount(cfg, minlength=n_cfg).astype(np.int64)
    ones = np.bincount(cfg[ad[:, node] == 1], minlength=n_cfg).astype(np.int64)
    return counts, ones
