"""Pure-numpy dense-layer kernels.

Reduction order mirrors ``_kernels.pyx`` exactly, which rules out ``@`` and
``sum``: BLAS and numpy's pairwise summation both reorder additions.
"""
import numpy as np


def affine_forward(x, w, b):
    n, n_in = x.shape
    if w.shape[0] != n_in or b.shape[0] != w.shape[1]:
        raise ValueError("affine_forward: shape mismatch")
    out = np.empty((n, w.shape[1]), dtype=np.float64)
    out[:] = b
    for k in range(n_in):
        out += x[:, k : k + 1] * w[k]
    return out


def affine_backward(x, w, g, need_dx=True):
    n, n_in = x.shape
    n_out = w.shape[1]
    if w.shape[0] != n_in or g.shape != (n, n_out):
        raise ValueError("affine_backward: shape mismatch")
    dw = np.zeros((n_in, n_out), dtype=np.float64)
    db = np.zeros(n_out, dtype=np.float64)
    for i in range(n):
        dw += np.multiply.outer(x[i], g[i])
        db += g[i]
    if not need_dx:
        return dw, db, None
    dx = np.zeros((n, n_in), dtype=np.float64)
    for j in range(n_out):
        dx += g[:, j : j + 1] * w[:, j]
    return dw, db, dx
