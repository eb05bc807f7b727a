"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or forced via
CVTRACK_FORCE_FALLBACK=1).  The compiled twin in `_core.pyx` implements the
same functions with identical semantics; `tests/test_kernels.py` holds the
two backends to each other.
"""

import numpy as np

BACKEND = "fallback"

_INF = np.inf


def hungarian(cost):
    """Minimum-cost bipartite assignment of the smaller side of `cost`.

    Returns (rows, cols) index arrays of length min(m, n), sorted by row.
    Potential-based shortest augmenting path, O(n^2 m) with n <= m.
    """
    a = np.ascontiguousarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"cost must be a non-empty 2-d matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("cost matrix contains non-finite entries")
    transposed = a.shape[0] > a.shape[1]
    if transposed:
        a = np.ascontiguousarray(a.T)
    n, m = a.shape

    u = np.zeros(n)
    v = np.zeros(m + 1)
    # col_row[j] = row currently assigned to column j; column m is the
    # virtual root holding the row being inserted.
    col_row = np.full(m + 1, -1, dtype=np.int64)
    way = np.zeros(m, dtype=np.int64)

    for i in range(n):
        col_row[m] = i
        j0 = m
        minv = np.full(m, _INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            delta = _INF
            j1 = -1
            for j in range(m):
                if not used[j]:
                    cur = a[i0, j] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                elif j < m:
                    minv[j] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1

    rows = col_row[:m]
    cols = np.nonzero(rows >= 0)[0]
    rows = rows[cols]
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def attn_forward(q, k, v, scale):
    """Per-head scaled dot-product attention.

    q: (h, nq, dh); k, v: (h, nk, dh).  Returns (out, weights) with
    out (h, nq, dh) and weights (h, nq, nk); softmax uses row-max
    subtraction so large logits cannot overflow.
    """
    s = scale * (q @ k.transpose(0, 2, 1))
    s -= s.max(axis=2, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=2, keepdims=True)
    return s @ v, s


def attn_backward(q, k, v, weights, d_out, scale):
    """Gradients of attn_forward w.r.t. q, k, v given d_out (h, nq, dh)."""
    dv = weights.transpose(0, 2, 1) @ d_out
    dw = d_out @ v.transpose(0, 2, 1)
    ds = weights * (dw - (dw * weights).sum(axis=2, keepdims=True))
    dq = scale * (ds @ k)
    dk = scale * (ds.transpose(0, 2, 1) @ q)
    return dq, dk, dv
