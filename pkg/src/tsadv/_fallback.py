"""Pure numpy versions of the hot kernels.

Same signatures and semantics as the compiled ``_ext`` module; used when the
extension is not built or ``TSADV_PURE=1`` is set.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def elman_forward(x, w, u, b):
    batch, steps, _ = x.shape
    hidden = w.shape[1]
    pre = x @ w + b
    h = np.empty((batch, steps, hidden))
    prev = np.zeros((batch, hidden))
    for t in range(steps):
        prev = np.tanh(pre[:, t] + prev @ u)
        h[:, t] = prev
    return h


def elman_backward(x, h, w, u, dh):
    batch, steps, in_dim = x.shape
    hidden = w.shape[1]
    da = np.empty_like(h)
    carry = np.zeros((batch, hidden))
    du = np.zeros_like(u)
    for t in range(steps - 1, -1, -1):
        ht = h[:, t]
        a = (dh[:, t] + carry) * (1.0 - ht * ht)
        da[:, t] = a
        if t > 0:
            du += h[:, t - 1].T @ a
        carry = a @ u.T
    flat = da.reshape(-1, hidden)
    dw = x.reshape(-1, in_dim).T @ flat
    db = flat.sum(axis=0)
    dx = da @ w.T
    return dx, dw, du, db


def project_l1_rows(v, radius):
    """Euclidean projection of every row of ``v`` onto the L1 ball of ``radius``."""
    v = np.asarray(v, dtype=np.float64)
    out = v.copy()
    mag = np.abs(v)
    inside = mag.sum(axis=1) <= radius
    for i in np.flatnonzero(~inside):
        u = np.sort(mag[i])[::-1]
        css = np.cumsum(u)
        k = np.arange(1, u.size + 1)
        rho = np.flatnonzero(u * k > css - radius)[-1]
        theta = (css[rho] - radius) / (rho + 1.0)
        out[i] = np.sign(v[i]) * np.maximum(mag[i] - theta, 0.0)
    return out


def rolling_mean_std(x, window):
    """Mean and population std of ``x[i-window:i]`` for i = window..len(x)."""
    x = np.asarray(x, dtype=np.float64)
    view = sliding_window_view(x, window)
    mean = view.mean(axis=1)
    std = np.sqrt(np.maximum(((view - mean[:, None]) ** 2).mean(axis=1), 0.0))
    return mean, std
