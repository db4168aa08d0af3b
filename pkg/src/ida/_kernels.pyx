# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled float64 kernels for the autodiff layer.

Same API as ``ida._kernels_py``: fused elementwise loops plus BLAS-backed
matrix products (dgemm via SciPy's Cython bindings). Selection between the
two implementations happens in ``ida.backend``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, fabs, log as c_log, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

IMPL = "ext"


# ---------------------------------------------------------------- matmul

cdef void _dgemm_cc(double[:, ::1] a, double[:, ::1] b, double[:, ::1] c,
                    int case) noexcept nogil:
    # All operands are C-order; dgemm is column-major, so each case passes
    # the transposed problem. case 0: c=a@b, 1: c=a@b.T, 2: c=a.T@b.
    cdef int m, n, k, lda, ldb, ldc
    cdef double one = 1.0, zero = 0.0
    cdef char N = b'N', T = b'T'
    if case == 0:
        m = <int>b.shape[1]; n = <int>a.shape[0]; k = <int>a.shape[1]
        lda = <int>b.shape[1]; ldb = <int>a.shape[1]; ldc = <int>b.shape[1]
        dgemm(&N, &N, &m, &n, &k, &one, &b[0, 0], &lda, &a[0, 0], &ldb,
              &zero, &c[0, 0], &ldc)
    elif case == 1:
        m = <int>b.shape[0]; n = <int>a.shape[0]; k = <int>a.shape[1]
        lda = <int>b.shape[1]; ldb = <int>a.shape[1]; ldc = <int>b.shape[0]
        dgemm(&T, &N, &m, &n, &k, &one, &b[0, 0], &lda, &a[0, 0], &ldb,
              &zero, &c[0, 0], &ldc)
    else:
        m = <int>b.shape[1]; n = <int>a.shape[1]; k = <int>a.shape[0]
        lda = <int>b.shape[1]; ldb = <int>a.shape[1]; ldc = <int>b.shape[1]
        dgemm(&N, &T, &m, &n, &k, &one, &b[0, 0], &lda, &a[0, 0], &ldb,
              &zero, &c[0, 0], &ldc)


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef cnp.ndarray out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    cdef double[:, ::1] c = out
    if a.shape[0] and b.shape[1]:
        if a.shape[1] == 0:
            out[...] = 0.0
        else:
            _dgemm_cc(a, b, c, 0)
    return out


def matmul_grads(double[:, ::1] g, double[:, ::1] a, double[:, ::1] b):
    # da = g @ b.T, db = a.T @ g
    cdef cnp.ndarray da = np.empty((a.shape[0], a.shape[1]), dtype=np.float64)
    cdef cnp.ndarray db = np.empty((b.shape[0], b.shape[1]), dtype=np.float64)
    cdef double[:, ::1] dav = da, dbv = db
    if a.shape[0] and a.shape[1]:
        if g.shape[1] == 0:
            da[...] = 0.0
        else:
            _dgemm_cc(g, b, dav, 1)
    if b.shape[0] and b.shape[1]:
        if g.shape[0] == 0:
            db[...] = 0.0
        else:
            _dgemm_cc(a, g, dbv, 2)
    return da, db


# ----------------------------------------------------------- elementwise

cdef inline tuple _flat(object x):
    # np.ascontiguousarray would promote 0-d scalars to 1-d; keep shapes.
    cdef cnp.ndarray arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    cdef cnp.ndarray out = np.empty_like(arr)
    return arr.ravel(), out.ravel(), out, arr


def add(x, y):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] ys = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = xs[i] + ys[i]
    return out


def sub(x, y):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] ys = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = xs[i] - ys[i]
    return out


def mul(x, y):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] ys = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = xs[i] * ys[i]
    return out


def affine(x, double scale, double shift):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = xs[i] * scale + shift
    return out


def add_bias(double[:, ::1] a, double[::1] b):
    cdef cnp.ndarray out = np.empty((a.shape[0], a.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            o[i, j] = a[i, j] + b[j]
    return out


def bias_grad(double[:, ::1] g):
    cdef cnp.ndarray out = np.zeros(g.shape[1], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            o[j] += g[i, j]
    return out


def relu(x):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = xs[i] if xs[i] > 0.0 else 0.0
    return out


def relu_grad(g, x):
    ga, oa, out, _ = _flat(g)
    cdef double[::1] gs = ga
    cdef double[::1] xs = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(gs.shape[0]):
        os[i] = gs[i] if xs[i] > 0.0 else 0.0
    return out


def sigmoid(x):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    cdef double e
    for i in range(xs.shape[0]):
        if xs[i] >= 0.0:
            os[i] = 1.0 / (1.0 + c_exp(-xs[i]))
        else:
            e = c_exp(xs[i])
            os[i] = e / (1.0 + e)
    return out


def sigmoid_grad(g, y):
    ga, oa, out, _ = _flat(g)
    cdef double[::1] gs = ga
    cdef double[::1] ys = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(gs.shape[0]):
        os[i] = gs[i] * ys[i] * (1.0 - ys[i])
    return out


def exp(x):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = c_exp(xs[i])
    return out


def log_clamped(x, double eps):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        os[i] = c_log(xs[i] if xs[i] > eps else eps)
    return out


def log_clamped_grad(g, x, double eps):
    ga, oa, out, _ = _flat(g)
    cdef double[::1] gs = ga
    cdef double[::1] xs = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(gs.shape[0]):
        os[i] = gs[i] / xs[i] if xs[i] > eps else 0.0
    return out


def hinge(x, double t):
    xa, oa, out, _ = _flat(x)
    cdef double[::1] xs = xa
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    cdef double v
    for i in range(xs.shape[0]):
        v = t - xs[i]
        os[i] = v if v > 0.0 else 0.0
    return out


def hinge_grad(g, x, double t):
    ga, oa, out, _ = _flat(g)
    cdef double[::1] gs = ga
    cdef double[::1] xs = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] os = oa
    cdef Py_ssize_t i
    for i in range(gs.shape[0]):
        os[i] = -gs[i] if t - xs[i] > 0.0 else 0.0
    return out


# -------------------------------------------------------------- rowwise

def softmax_rows(double[:, ::1] x):
    cdef cnp.ndarray out = np.empty((x.shape[0], x.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(x.shape[0]):
        mx = x[i, 0]
        for j in range(1, x.shape[1]):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(x.shape[1]):
            o[i, j] = c_exp(x[i, j] - mx)
            s += o[i, j]
        for j in range(x.shape[1]):
            o[i, j] /= s
    return out


def softmax_rows_grad(double[:, ::1] g, double[:, ::1] y):
    cdef cnp.ndarray out = np.empty((g.shape[0], g.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(g.shape[0]):
        dot = 0.0
        for j in range(g.shape[1]):
            dot += g[i, j] * y[i, j]
        for j in range(g.shape[1]):
            o[i, j] = y[i, j] * (g[i, j] - dot)
    return out


def norm_rows(double[:, ::1] x, int q):
    cdef cnp.ndarray out = np.empty(x.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(x.shape[0]):
        s = 0.0
        if q == 2:
            for j in range(x.shape[1]):
                s += x[i, j] * x[i, j]
            o[i] = sqrt(s)
        else:
            for j in range(x.shape[1]):
                s += fabs(x[i, j])
            o[i] = s
    return out


def norm_rows_grad(double[::1] g, double[:, ::1] x, double[::1] norms,
                   int q, double eps):
    cdef cnp.ndarray out = np.empty((x.shape[0], x.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double scale
    for i in range(x.shape[0]):
        if q == 2:
            scale = g[i] / (norms[i] if norms[i] > eps else eps)
            for j in range(x.shape[1]):
                o[i, j] = scale * x[i, j]
        else:
            for j in range(x.shape[1]):
                if x[i, j] > 0.0:
                    o[i, j] = g[i]
                elif x[i, j] < 0.0:
                    o[i, j] = -g[i]
                else:
                    o[i, j] = 0.0
    return out


# ------------------------------------------------------------ reductions

def sum_all(x):
    cdef double[::1] xs = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        s += xs[i]
    return s


def mean_all(x):
    cdef double[::1] xs = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double s = 0.0
    cdef Py_ssize_t i
    for i in range(xs.shape[0]):
        s += xs[i]
    return s / xs.shape[0]


# -------------------------------------------------------------- indexing

def take_rows(double[:, ::1] x, idx):
    cdef Py_ssize_t[::1] rows = np.ascontiguousarray(idx, dtype=np.intp)
    cdef cnp.ndarray out = np.empty((rows.shape[0], x.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(rows.shape[0]):
        for j in range(x.shape[1]):
            o[i, j] = x[rows[i], j]
    return out


def take_rows_grad(double[:, ::1] g, idx, Py_ssize_t n_rows):
    cdef Py_ssize_t[::1] rows = np.ascontiguousarray(idx, dtype=np.intp)
    cdef cnp.ndarray out = np.zeros((n_rows, g.shape[1]), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t i, j
    for i in range(rows.shape[0]):
        for j in range(g.shape[1]):
            o[rows[i], j] += g[i, j]
    return out
