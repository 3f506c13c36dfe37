"""Hot-loop kernels with a numba fast path and a pure-numpy fallback.

Backend selection happens once at import time via ``SSTAG_KERNELS``:

* ``auto`` (default) — numba when importable, numpy otherwise
* ``numba``          — require the jit backend, raise if unavailable
* ``numpy``          — force the fallback

``SSTAG_THREADS`` caps numba's thread pool when the jit backend is live.
``bench/bench_kernels.py`` times the two backends against each other.
"""

import os

_REQUESTED = os.environ.get("SSTAG_KERNELS", "auto").strip().lower()
if _REQUESTED not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"SSTAG_KERNELS must be auto|numba|numpy, got {_REQUESTED!r}"
    )

if _REQUESTED == "numpy":
    from . import pure as _impl

    BACKEND = "numpy"
else:
    try:
        from . import jit as _impl

        BACKEND = "numba"
    except ImportError:
        if _REQUESTED == "numba":
            raise
        from . import pure as _impl

        BACKEND = "numpy"

if BACKEND == "numba":
    _threads = os.environ.get("SSTAG_THREADS")
    if _threads:
        import numba

        try:
            numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))
        except ValueError:
            raise RuntimeError(f"SSTAG_THREADS must be an integer, got {_threads!r}")

push_ppr = _impl.push_ppr
csr_dense_matmul = _impl.csr_dense_matmul

__all__ = ["BACKEND", "push_ppr", "csr_dense_matmul"]
