"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``REGIONATTN_KERNELS=numpy`` to force the fallback. Both paths accumulate
every dot product left to right over the inner index, one output row per
worker, so results do not depend on the thread count and the two matmul
paths agree bit for bit.
"""
import os

import numpy as np

# Rows whose maximum is at or below this are treated as fully masked.
MASKED_ROW_FLOOR = -1e29

_requested = os.environ.get("REGIONATTN_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"REGIONATTN_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

try:
    if _requested == "numpy":
        raise ImportError
    import numba
    from numba import njit, prange
except ImportError:
    numba = None
    BACKEND = "numpy"
else:
    BACKEND = "numba"


def set_num_threads(n):
    """Set the worker count for parallel kernels (no-op on the numpy path)."""
    if numba is not None:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def get_num_threads():
    return numba.get_num_threads() if numba is not None else 1


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def _matmul_np(a, b):
    out = a[:, 0:1] * b[0]
    for p in range(1, a.shape[1]):
        out += a[:, p:p + 1] * b[p]
    return out


def _bmm_np(a, b):
    out = a[:, :, 0:1] * b[:, 0:1, :]
    for p in range(1, a.shape[2]):
        out += a[:, :, p:p + 1] * b[:, p:p + 1, :]
    return out


def _softmax_np(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = np.cumsum(e, axis=1)[:, -1:]
    out = e / s
    out[m[:, 0] <= MASKED_ROW_FLOOR] = 0.0
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if numba is not None:

    @njit(parallel=True, cache=True)
    def _matmul_nb(a, b):
        m, k = a.shape
        n = b.shape[1]
        out = np.zeros((m, n))
        nblk = (m + 3) // 4
        for blk in prange(nblk):
            i = blk * 4
            if i + 4 <= m:
                c0 = out[i]
                c1 = out[i + 1]
                c2 = out[i + 2]
                c3 = out[i + 3]
                for p in range(k):
                    a0 = a[i, p]
                    a1 = a[i + 1, p]
                    a2 = a[i + 2, p]
                    a3 = a[i + 3, p]
                    bp = b[p]
                    for j in range(n):
                        bj = bp[j]
                        c0[j] += a0 * bj
                        c1[j] += a1 * bj
                        c2[j] += a2 * bj
                        c3[j] += a3 * bj
            else:
                for r in range(i, m):
                    c = out[r]
                    for p in range(k):
                        ap = a[r, p]
                        bp = b[p]
                        for j in range(n):
                            c[j] += ap * bp[j]
        return out

    @njit(parallel=True, cache=True)
    def _bmm_nb(a, b):
        nb_, m, k = a.shape
        n = b.shape[2]
        out = np.zeros((nb_, m, n))
        for idx in prange(nb_ * m):
            q = idx // m
            i = idx - q * m
            c = out[q, i]
            for p in range(k):
                ap = a[q, i, p]
                bp = b[q, p]
                for j in range(n):
                    c[j] += ap * bp[j]
        return out

    @njit(parallel=True, cache=True)
    def _softmax_nb(x):
        rows, cols = x.shape
        out = np.zeros_like(x)
        for r in prange(rows):
            m = x[r, 0]
            for j in range(1, cols):
                if x[r, j] > m:
                    m = x[r, j]
            if m <= MASKED_ROW_FLOOR:
                continue
            s = 0.0
            for j in range(cols):
                e = np.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            for j in range(cols):
                out[r, j] = out[r, j] / s
        return out


def matmul2d(a, b):
    """Dense (m, k) @ (k, n)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    if BACKEND == "numba":
        return _matmul_nb(a, b)
    return _matmul_np(a, b)


def bmm(a, b):
    """Batched (P, m, k) @ (P, k, n)."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[2] == 0:
        return np.zeros((a.shape[0], a.shape[1], b.shape[2]))
    if BACKEND == "numba":
        return _bmm_nb(a, b)
    return _bmm_np(a, b)


def softmax_rows(x):
    """Stabilised softmax over the rows of a 2-D array; masked rows give zeros."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if BACKEND == "numba":
        return _softmax_nb(x)
    return _softmax_np(x)
