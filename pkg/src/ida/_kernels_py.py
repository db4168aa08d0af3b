"""NumPy implementations of the dense float64 kernels.

This module mirrors the API of the compiled extension ``ida._kernels``;
either one can back the autodiff layer (see ``ida.backend``). All inputs
are C-contiguous float64 arrays and all outputs are freshly allocated.
"""

import numpy as np

IMPL = "py"


# ---------------------------------------------------------------- matmul

def matmul(a, b):
    return a @ b


def matmul_grads(g, a, b):
    da = g @ b.T
    db = a.T @ g
    return np.ascontiguousarray(da), np.ascontiguousarray(db)


# ----------------------------------------------------------- elementwise

def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


def affine(a, scale, shift):
    return a * scale + shift


def add_bias(a, b):
    return a + b[None, :]


def bias_grad(g):
    return np.ascontiguousarray(g.sum(axis=0))


def relu(x):
    return np.maximum(x, 0.0)


def relu_grad(g, x):
    return np.where(x > 0.0, g, 0.0)


def sigmoid(x):
    # Split form keeps exp() off the overflowing side.
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(g, y):
    return g * y * (1.0 - y)


def exp(x):
    return np.exp(x)


def log_clamped(x, eps):
    return np.log(np.maximum(x, eps))


def log_clamped_grad(g, x, eps):
    return np.where(x > eps, g / x, 0.0)


def hinge(x, t):
    return np.maximum(0.0, t - x)


def hinge_grad(g, x, t):
    return np.where(t - x > 0.0, -g, 0.0)


# -------------------------------------------------------------- rowwise

def softmax_rows(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_grad(g, y):
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def norm_rows(x, q):
    if q == 2:
        return np.sqrt((x * x).sum(axis=1))
    return np.abs(x).sum(axis=1)


def norm_rows_grad(g, x, norms, q, eps):
    if q == 2:
        denom = np.maximum(norms, eps)[:, None]
        return g[:, None] * x / denom
    return g[:, None] * np.sign(x)


# ------------------------------------------------------------ reductions

def sum_all(x):
    return float(x.sum())


def mean_all(x):
    return float(x.mean())


# -------------------------------------------------------------- indexing

def take_rows(x, idx):
    return np.ascontiguousarray(x[idx])


def take_rows_grad(g, idx, n_rows):
    out = np.zeros((n_rows, g.shape[1]), dtype=np.float64)
    np.add.at(out, idx, g)
    return out
