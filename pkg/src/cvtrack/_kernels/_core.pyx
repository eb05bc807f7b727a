# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels (see _fallback.py for the contract)."""

import numpy as np

from libc.math cimport exp, INFINITY

BACKEND = "compiled"


def hungarian(cost):
    a = np.ascontiguousarray(cost, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"cost must be a non-empty 2-d matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("cost matrix contains non-finite entries")
    transposed = a.shape[0] > a.shape[1]
    if transposed:
        a = np.ascontiguousarray(a.T)

    cdef double[:, ::1] am = a
    cdef Py_ssize_t n = am.shape[0]
    cdef Py_ssize_t m = am.shape[1]
    u_arr = np.zeros(n)
    v_arr = np.zeros(m + 1)
    col_row_arr = np.full(m + 1, -1, dtype=np.int64)
    way_arr = np.zeros(m, dtype=np.int64)
    minv_arr = np.empty(m)
    used_arr = np.zeros(m + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef long long[::1] col_row = col_row_arr
    cdef long long[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr

    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur

    for i in range(n):
        col_row[m] = i
        j0 = m
        for j in range(m):
            minv[j] = INFINITY
        for j in range(m + 1):
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = col_row[j0]
            delta = INFINITY
            j1 = -1
            for j in range(m):
                if not used[j]:
                    cur = am[i0, j] - u[i0] - v[j]
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

    rows = col_row_arr[:m]
    cols = np.nonzero(rows >= 0)[0]
    rows = rows[cols]
    if transposed:
        rows, cols = cols, rows
    order = np.argsort(rows, kind="stable")
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def attn_forward(q, k, v, double scale):
    cdef double[:, :, ::1] qm = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, :, ::1] km = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, :, ::1] vm = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t h = qm.shape[0], nq = qm.shape[1], dh = qm.shape[2]
    cdef Py_ssize_t nk = km.shape[1]
    out_arr = np.zeros((h, nq, dh))
    w_arr = np.empty((h, nq, nk))
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    cdef Py_ssize_t a, i, j, c
    cdef double s, mx, tot

    for a in range(h):
        for i in range(nq):
            mx = -INFINITY
            for j in range(nk):
                s = 0.0
                for c in range(dh):
                    s += qm[a, i, c] * km[a, j, c]
                s *= scale
                w[a, i, j] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for j in range(nk):
                s = exp(w[a, i, j] - mx)
                w[a, i, j] = s
                tot += s
            for j in range(nk):
                w[a, i, j] /= tot
                for c in range(dh):
                    out[a, i, c] += w[a, i, j] * vm[a, j, c]
    return out_arr, w_arr


def attn_backward(q, k, v, weights, d_out, double scale):
    cdef double[:, :, ::1] qm = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, :, ::1] km = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, :, ::1] vm = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, :, ::1] wm = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, :, ::1] gm = np.ascontiguousarray(d_out, dtype=np.float64)
    cdef Py_ssize_t h = qm.shape[0], nq = qm.shape[1], dh = qm.shape[2]
    cdef Py_ssize_t nk = km.shape[1]
    dq_arr = np.zeros((h, nq, dh))
    dk_arr = np.zeros((h, nk, dh))
    dv_arr = np.zeros((h, nk, dh))
    ds_arr = np.empty(nk)
    cdef double[:, :, ::1] dq = dq_arr
    cdef double[:, :, ::1] dk = dk_arr
    cdef double[:, :, ::1] dv = dv_arr
    cdef double[::1] ds = ds_arr
    cdef Py_ssize_t a, i, j, c
    cdef double dw, dot

    for a in range(h):
        for i in range(nq):
            dot = 0.0
            for j in range(nk):
                dw = 0.0
                for c in range(dh):
                    dw += gm[a, i, c] * vm[a, j, c]
                ds[j] = dw
                dot += dw * wm[a, i, j]
            for j in range(nk):
                dw = wm[a, i, j] * (ds[j] - dot)
                for c in range(dh):
                    dv[a, j, c] += wm[a, i, j] * gm[a, i, c]
                    dq[a, i, c] += scale * dw * km[a, j, c]
                    dk[a, j, c] += scale * dw * qm[a, i, c]
    return dq_arr, dk_arr, dv_arr
