# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: Elman recurrence, row-wise L1-ball projection and
trailing-window statistics.  Mirrors ``tsadv._fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, sqrt, fabs
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def elman_forward(double[:, :, ::1] x, double[:, ::1] w, double[:, ::1] u, double[::1] b):
    cdef int batch = x.shape[0], steps = x.shape[1], in_dim = x.shape[2]
    cdef int hidden = w.shape[1]
    cdef int ld = steps * hidden
    cdef double one = 1.0, zero = 0.0
    cdef char* nn = b"N"
    out_arr = np.empty((batch, steps, hidden))
    cdef double[:, :, ::1] h = out_arr
    cdef int rows = batch * steps
    cdef Py_ssize_t i, j, t, k
    if rows == 0 or hidden == 0:
        return out_arr
    # all input projections at once: (rows x in) @ (in x hidden)
    dgemm(nn, nn, &hidden, &rows, &in_dim, &one, &w[0, 0], &hidden,
          &x[0, 0, 0], &in_dim, &zero, &h[0, 0, 0], &hidden)
    # libm tanh is scalar; numpy's ufunc is vectorized, so squash one step at a time
    np.add(out_arr[:, 0], b, out=out_arr[:, 0])
    np.tanh(out_arr[:, 0], out=out_arr[:, 0])
    for t in range(1, steps):
        with nogil:
            dgemm(nn, nn, &hidden, &batch, &hidden, &one, &u[0, 0], &hidden,
                  &h[0, t - 1, 0], &ld, &one, &h[0, t, 0], &ld)
        step = out_arr[:, t]
        np.add(step, b, out=step)
        np.tanh(step, out=step)
    return out_arr


def elman_backward(x, h, w, u, dh):
    cdef double[:, :, ::1] hv = h
    cdef double[:, ::1] uv = u
    cdef int batch = hv.shape[0], steps = hv.shape[1], hidden = hv.shape[2]
    cdef int ld = steps * hidden
    cdef double one = 1.0
    cdef char* nn = b"N"
    cdef char* tn = b"T"
    da_arr = np.array(dh, dtype=np.float64, order="C", copy=True)
    cdef double[:, :, ::1] da = da_arr
    cdef Py_ssize_t i, j, t
    cdef double hij
    if batch == 0 or steps == 0:
        return np.zeros_like(x), np.zeros_like(w), np.zeros_like(u), np.zeros(w.shape[1])
    with nogil:
        for t in range(steps - 1, -1, -1):
            if t < steps - 1:
                dgemm(tn, nn, &hidden, &batch, &hidden, &one, &uv[0, 0], &hidden,
                      &da[0, t + 1, 0], &ld, &one, &da[0, t, 0], &ld)
            for i in range(batch):
                for j in range(hidden):
                    hij = hv[i, t, j]
                    da[i, t, j] = da[i, t, j] * (1.0 - hij * hij)
    in_dim = x.shape[2]
    flat = da_arr.reshape(-1, hidden)
    dw = x.reshape(-1, in_dim).T @ flat
    db = flat.sum(axis=0)
    dx = da_arr @ w.T
    du_arr = np.zeros((hidden, hidden))
    cdef double[:, ::1] du = du_arr
    cdef int k = steps - 1
    if k > 0:
        # du += h[i, :-1].T @ da[i, 1:], both contiguous per batch row
        with nogil:
            for i in range(batch):
                dgemm(nn, tn, &hidden, &hidden, &k, &one, &da[i, 1, 0], &hidden,
                      &hv[i, 0, 0], &hidden, &one, &du[0, 0], &hidden)
    return dx, dw, du_arr, db


def project_l1_rows(v, double radius):
    out_arr = np.array(v, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t n = out.shape[0], d = out.shape[1]
    cdef Py_ssize_t i, j
    cdef double total, css, theta, m
    cdef Py_ssize_t cnt, kept
    cdef double* buf = <double*>malloc(max(d, 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                total = 0.0
                for j in range(d):
                    buf[j] = fabs(out[i, j])
                    total += buf[j]
                if total <= radius:
                    continue
                # Michelot: drop entries at or below the running threshold until none remain
                cnt = d
                theta = (total - radius) / cnt
                while True:
                    css = 0.0
                    kept = 0
                    for j in range(d):
                        if buf[j] > theta:
                            css += buf[j]
                            kept += 1
                    if kept == cnt or kept == 0:
                        break
                    cnt = kept
                    # monotone in exact arithmetic; max() keeps rounding from re-admitting entries
                    theta = max(theta, (css - radius) / cnt)
                for j in range(d):
                    m = fabs(out[i, j]) - theta
                    if m <= 0.0:
                        out[i, j] = 0.0
                    elif out[i, j] > 0.0:
                        out[i, j] = m
                    else:
                        out[i, j] = -m
    finally:
        free(buf)
    return out_arr


def rolling_mean_std(x, Py_ssize_t window):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0] - window + 1
    if n < 1:
        return np.empty(0), np.empty(0)
    mean_arr = np.empty(n)
    std_arr = np.empty(n)
    cdef double[::1] mv = mean_arr, sv = std_arr
    cdef Py_ssize_t i, j
    cdef double s, dev, q
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(i, i + window):
                s += xv[j]
            s = s / window
            q = 0.0
            for j in range(i, i + window):
                dev = xv[j] - s
                q += dev * dev
            mv[i] = s
            sv[i] = sqrt(q / window)
    return mean_arr, std_arr
