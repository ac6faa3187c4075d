"""Row gather / scatter-add kernels behind embedding lookups.

Each kernel has a numba implementation and a pure-numpy one. The numba path is
used when numba imports cleanly and ``METAREC_DISABLE_NUMBA`` is unset (or
``0``). Both paths touch rows in the same order, so results are bit-identical.
Row index ``pad_row`` reads zeros and is skipped on scatter.
"""
from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("METAREC_DISABLE_NUMBA", "0").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by METAREC_DISABLE_NUMBA")
    from numba import njit
except ImportError:
    njit = None

USE_NUMBA = njit is not None
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------- numpy


def gather_rows_np(table, rows, pad_row):
    out = table[rows]
    out[rows == pad_row] = 0.0
    return out


def scatter_add_rows_np(grad, rows, n_rows, pad_row):
    out = np.zeros((n_rows, grad.shape[1]), dtype=np.float64)
    keep = rows != pad_row
    np.add.at(out, rows[keep], grad[keep])
    return out


def sigmoid_np(x):
    # tanh form never overflows and gives exactly 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


# --------------------------------------------------------------------------- numba

if USE_NUMBA:

    @njit(cache=True)
    def _gather_rows_nb(table, rows, pad_row):
        n = rows.shape[0]
        d = table.shape[1]
        out = np.empty((n, d), dtype=np.float64)
        for i in range(n):
            r = rows[i]
            if r == pad_row:
                for j in range(d):
                    out[i, j] = 0.0
            else:
                for j in range(d):
                    out[i, j] = table[r, j]
        return out

    @njit(cache=True)
    def _scatter_add_rows_nb(grad, rows, n_rows, pad_row):
        d = grad.shape[1]
        out = np.zeros((n_rows, d), dtype=np.float64)
        for i in range(rows.shape[0]):
            r = rows[i]
            if r == pad_row:
                continue
            for j in range(d):
                out[r, j] += grad[i, j]
        return out

    def gather_rows(table, rows, pad_row):
        return _gather_rows_nb(
            np.ascontiguousarray(table), np.ascontiguousarray(rows, dtype=np.int64), pad_row
        )

    def scatter_add_rows(grad, rows, n_rows, pad_row):
        return _scatter_add_rows_nb(
            np.ascontiguousarray(grad), np.ascontiguousarray(rows, dtype=np.int64), n_rows, pad_row
        )

else:
    gather_rows = gather_rows_np
    scatter_add_rows = scatter_add_rows_np


# Elementwise transcendentals stay on numpy: its SIMD exp/tanh beat a scalar
# numba loop at every array size this package produces.
sigmoid = sigmoid_np
softplus = softplus_np
