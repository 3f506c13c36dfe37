"""Pure-numpy kernel implementations.

These are the fallback twins of the jit kernels in ``jit.py``: same
signatures, same contracts, vectorized numpy instead of compiled loops.
Both operate on CSR arrays (int64 offsets/targets, float64 values).
"""

import numpy as np


def _ragged_slots(offsets, rows):
    # slot indices of every CSR entry belonging to `rows`, row order preserved
    starts = offsets[rows]
    counts = offsets[rows + 1] - starts
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), counts
    ends = np.cumsum(counts)
    slots = np.arange(total, dtype=np.int64) - np.repeat(ends - counts, counts)
    slots += np.repeat(starts, counts)
    return slots, counts


def push_ppr(offsets, targets, degrees, seed, alpha, epsilon):
    """Forward-push residual propagation on a self-looped walk graph.

    Sweeps the whole frontier per iteration. Returns the (un-normalized)
    mass vector; at return every residual sits below epsilon * degree.
    """
    n = degrees.shape[0]
    mass = np.zeros(n)
    residual = np.zeros(n)
    residual[seed] = 1.0
    thresholds = epsilon * degrees
    while True:
        frontier = np.nonzero(residual >= thresholds)[0]
        if frontier.size == 0:
            return mass
        pushed = residual[frontier].copy()
        mass[frontier] += alpha * pushed
        residual[frontier] = 0.0
        if alpha >= 1.0:
            continue
        share = (1.0 - alpha) * pushed / degrees[frontier]
        slots, counts = _ragged_slots(offsets, frontier)
        np.add.at(residual, targets[slots], np.repeat(share, counts))


def csr_dense_matmul(offsets, targets, values, dense):
    """Sparse @ dense product: out[u] = sum_s values[s] * dense[targets[s]]."""
    n = offsets.shape[0] - 1
    counts = np.diff(offsets)
    contrib = values[:, None] * dense[targets]
    if counts.min(initial=1) > 0:
        # every row non-empty: segment-reduce is safe and fast
        return np.add.reduceat(contrib, offsets[:-1])
    out = np.zeros((n, dense.shape[1]))
    np.add.at(out, np.repeat(np.arange(n, dtype=np.int64), counts), contrib)
    return out
