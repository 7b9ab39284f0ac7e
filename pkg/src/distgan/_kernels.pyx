# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense-layer kernels.

Every reduction runs in a fixed order (bias first, then ascending input
index for the forward pass; ascending batch row for parameter gradients;
ascending output index for input gradients). ``_pykernels`` reproduces the
same order with numpy, so both backends agree bit for bit.
"""
import numpy as np


def affine_forward(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_in = x.shape[1]
    cdef Py_ssize_t n_out = w.shape[1]
    if w.shape[0] != n_in or b.shape[0] != n_out:
        raise ValueError("affine_forward: shape mismatch")
    out = np.empty((n, n_out), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j, k
    cdef double xik
    with nogil:
        for i in range(n):
            for j in range(n_out):
                o[i, j] = b[j]
            for k in range(n_in):
                xik = x[i, k]
                for j in range(n_out):
                    o[i, j] = o[i, j] + xik * w[k, j]
    return out


def affine_backward(const double[:, ::1] x, const double[:, ::1] w,
                    const double[:, ::1] g, bint need_dx=True):
    """Return ``(dw, db, dx)`` for ``y = x @ w + b`` given ``g = dL/dy``.

    ``dx`` is ``None`` when ``need_dx`` is false.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t n_in = x.shape[1]
    cdef Py_ssize_t n_out = w.shape[1]
    if w.shape[0] != n_in or g.shape[0] != n or g.shape[1] != n_out:
        raise ValueError("affine_backward: shape mismatch")
    dw_arr = np.zeros((n_in, n_out), dtype=np.float64)
    db_arr = np.zeros(n_out, dtype=np.float64)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t i, j, k
    cdef double xik, acc
    with nogil:
        for i in range(n):
            for k in range(n_in):
                xik = x[i, k]
                for j in range(n_out):
                    dw[k, j] = dw[k, j] + xik * g[i, j]
            for j in range(n_out):
                db[j] = db[j] + g[i, j]
    if not need_dx:
        return dw_arr, db_arr, None
    dx_arr = np.empty((n, n_in), dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    with nogil:
        for i in range(n):
            for k in range(n_in):
                acc = 0.0
                for j in range(n_out):
                    acc = acc + g[i, j] * w[k, j]
                dx[i, k] = acc
    return dw_arr, db_arr, dx_arr
