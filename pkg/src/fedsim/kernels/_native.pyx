# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused kernels for the hot per-minibatch training loop.

Semantics mirror fedsim.kernels.reference; reduction order differs, so
agreement with the reference backend is to roundoff, not bitwise. Each
backend is individually deterministic.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

NAME = "native"


def logistic_loss_grad(const double[:, ::1] W, const double[::1] b,
                       const double[:, ::1] X, const cnp.int64_t[::1] y):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t c = W.shape[0]
    grad_W_arr = np.zeros((c, d), dtype=np.float64)
    grad_b_arr = np.zeros(c, dtype=np.float64)
    scores_arr = np.empty(c, dtype=np.float64)
    cdef double[:, ::1] grad_W = grad_W_arr
    cdef double[::1] grad_b = grad_b_arr
    cdef double[::1] scores = scores_arr
    cdef double loss = 0.0, s, m, acc, lse, err, inv_n
    cdef Py_ssize_t i, j, k

    for i in range(n):
        for k in range(c):
            s = b[k]
            for j in range(d):
                s += W[k, j] * X[i, j]
            scores[k] = s
        m = scores[0]
        for k in range(1, c):
            if scores[k] > m:
                m = scores[k]
        acc = 0.0
        for k in range(c):
            acc += exp(scores[k] - m)
        lse = m + log(acc)
        loss += lse - scores[y[i]]
        for k in range(c):
            err = exp(scores[k] - lse)
            if k == y[i]:
                err -= 1.0
            grad_b[k] += err
            for j in range(d):
                grad_W[k, j] += err * X[i, j]

    inv_n = 1.0 / n
    loss *= inv_n
    for k in range(c):
        grad_b[k] *= inv_n
        for j in range(d):
            grad_W[k, j] *= inv_n
    return loss, grad_W_arr, grad_b_arr


def mlp_hidden(const double[:, ::1] W1, const double[::1] b1,
               const double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0]
    hidden_arr = np.empty((n, h), dtype=np.float64)
    cdef double[:, ::1] hidden = hidden_arr
    cdef double s
    cdef Py_ssize_t i, j, k

    for i in range(n):
        for k in range(h):
            s = b1[k]
            for j in range(d):
                s += W1[k, j] * X[i, j]
            hidden[i, k] = s if s > 0.0 else 0.0
    return hidden_arr


def mlp_loss_grad(const double[:, ::1] W1, const double[::1] b1,
                  const double[:, ::1] W2, const double[::1] b2,
                  const double[:, ::1] X, const cnp.int64_t[::1] y):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0]
    cdef Py_ssize_t c = W2.shape[0]
    grad_W1_arr = np.zeros((h, d), dtype=np.float64)
    grad_b1_arr = np.zeros(h, dtype=np.float64)
    grad_W2_arr = np.zeros((c, h), dtype=np.float64)
    grad_b2_arr = np.zeros(c, dtype=np.float64)
    pre_arr = np.empty(h, dtype=np.float64)
    hid_arr = np.empty(h, dtype=np.float64)
    scores_arr = np.empty(c, dtype=np.float64)
    err_arr = np.empty(c, dtype=np.float64)
    cdef double[:, ::1] grad_W1 = grad_W1_arr
    cdef double[::1] grad_b1 = grad_b1_arr
    cdef double[:, ::1] grad_W2 = grad_W2_arr
    cdef double[::1] grad_b2 = grad_b2_arr
    cdef double[::1] pre = pre_arr
    cdef double[::1] hid = hid_arr
    cdef double[::1] scores = scores_arr
    cdef double[::1] err = err_arr
    cdef double loss = 0.0, s, m, acc, lse, back, inv_n
    cdef Py_ssize_t i, j, k, q

    for i in range(n):
        for k in range(h):
            s = b1[k]
            for j in range(d):
                s += W1[k, j] * X[i, j]
            pre[k] = s
            hid[k] = s if s > 0.0 else 0.0
        for q in range(c):
            s = b2[q]
            for k in range(h):
                s += W2[q, k] * hid[k]
            scores[q] = s
        m = scores[0]
        for q in range(1, c):
            if scores[q] > m:
                m = scores[q]
        acc = 0.0
        for q in range(c):
            acc += exp(scores[q] - m)
        lse = m + log(acc)
        loss += lse - scores[y[i]]
        for q in range(c):
            err[q] = exp(scores[q] - lse)
            if q == y[i]:
                err[q] -= 1.0
            grad_b2[q] += err[q]
            for k in range(h):
                grad_W2[q, k] += err[q] * hid[k]
        for k in range(h):
            if pre[k] > 0.0:
                back = 0.0
                for q in range(c):
                    back += err[q] * W2[q, k]
                grad_b1[k] += back
                for j in range(d):
                    grad_W1[k, j] += back * X[i, j]

    inv_n = 1.0 / n
    loss *= inv_n
    for k in range(h):
        grad_b1[k] *= inv_n
        for j in range(d):
            grad_W1[k, j] *= inv_n
    for q in range(c):
        grad_b2[q] *= inv_n
        for k in range(h):
            grad_W2[q, k] *= inv_n
    return loss, grad_W1_arr, grad_b1_arr, grad_W2_arr, grad_b2_arr
