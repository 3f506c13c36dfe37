"""Numba-compiled kernel implementations.

Same signatures and contracts as ``pure.py``. The push kernel runs the
classic queue-driven variant; the matmul is a plain row loop. Both cache
their compilation artifacts so repeat runs skip the jit cost.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def push_ppr(offsets, targets, degrees, seed, alpha, epsilon):
    n = degrees.shape[0]
    mass = np.zeros(n)
    residual = np.zeros(n)
    residual[seed] = 1.0
    in_queue = np.zeros(n, np.bool_)
    queue = np.empty(n, np.int64)
    head = 0
    tail = 0
    size = 0
    queue[tail] = seed
    tail = (tail + 1) % n if n > 1 else 0
    size += 1
    in_queue[seed] = True
    while size > 0:
        u = queue[head]
        head = (head + 1) % n if n > 1 else 0
        size -= 1
        in_queue[u] = False
        r_u = residual[u]
        if r_u < epsilon * degrees[u]:
            continue
        mass[u] += alpha * r_u
        residual[u] = 0.0
        if alpha >= 1.0:
            continue
        share = (1.0 - alpha) * r_u / degrees[u]
        for s in range(offsets[u], offsets[u + 1]):
            v = targets[s]
            residual[v] += share
            if residual[v] >= epsilon * degrees[v] and not in_queue[v]:
                queue[tail] = v
                tail = (tail + 1) % n if n > 1 else 0
                size += 1
                in_queue[v] = True
    return mass


@njit(cache=True)
def csr_dense_matmul(offsets, targets, values, dense):
    n = offsets.shape[0] - 1
    d = dense.shape[1]
    out = np.zeros((n, d))
    for u in range(n):
        for s in range(offsets[u], offsets[u + 1]):
            v = targets[s]
            w = values[s]
            for c in range(d):
                out[u, c] += w * dense[v, c]
    return out
