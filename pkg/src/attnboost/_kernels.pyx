# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused minibatch kernel for attention training.

Same contract as attnboost._kernels_py.fused_batch_step: one call does
the masked forward pass, softmax cross-entropy, backprop to the mask,
and the top-1 hit count, with the two matrix products routed through
BLAS and everything else fused into tight loops.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


cdef void _forward_linear(double[:, ::1] x, double[:, ::1] w, double[::1] b,
                          double[:, ::1] out) noexcept nogil:
    # out (batch, n_out) = x (batch, n_in) @ w.T + b, via column-major BLAS
    cdef int m = <int> w.shape[0]
    cdef int n = <int> x.shape[0]
    cdef int k = <int> w.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char* ct = 'T'
    cdef char* cn = 'N'
    dgemm(ct, cn, &m, &n, &k, &one, &w[0, 0], &k, &x[0, 0], &k, &zero, &out[0, 0], &m)
    cdef Py_ssize_t i, j
    for i in range(n):
        for j in range(m):
            out[i, j] += b[j]


cdef void _backward_linear(double[:, ::1] delta, double[:, ::1] w,
                           double[:, ::1] out) noexcept nogil:
    # out (batch, n_in) = delta (batch, n_out) @ w (n_out, n_in)
    cdef int m = <int> w.shape[1]
    cdef int n = <int> delta.shape[0]
    cdef int k = <int> w.shape[0]
    cdef double one = 1.0, zero = 0.0
    cdef char* cn = 'N'
    dgemm(cn, cn, &m, &n, &k, &one, &w[0, 0], &m, &delta[0, 0], &k, &zero, &out[0, 0], &m)


def fused_batch_step(list weights, list biases, list acts, double[::1] mask,
                     double[:, ::1] x, i64[::1] labels):
    cdef Py_ssize_t batch = x.shape[0]
    cdef Py_ssize_t dim = x.shape[1]
    cdef int n_layers = len(weights)
    cdef Py_ssize_t i, j, l

    z_arr = np.empty((batch, dim))
    cdef double[:, ::1] z = z_arr
    for i in range(batch):
        for j in range(dim):
            z[i, j] = x[i, j] * mask[j]

    # forward, keeping pre-activations for the relu derivative
    pres = []
    posts = [z_arr]
    cdef double[:, ::1] h = z
    cdef double[:, ::1] pre
    cdef double[:, ::1] post
    for l in range(n_layers):
        w_l = weights[l]
        b_l = biases[l]
        pre_arr = np.empty((batch, w_l.shape[0]))
        pre = pre_arr
        _forward_linear(h, w_l, b_l, pre)
        pres.append(pre_arr)
        if acts[l] == 1:
            post_arr = np.maximum(pre_arr, 0.0)
            posts.append(post_arr)
            h = post_arr
        else:
            posts.append(pre_arr)
            h = pre_arr

    cdef double[:, ::1] logits = pres[n_layers - 1]
    cdef Py_ssize_t n_out = logits.shape[1]
    delta_arr = np.empty((batch, n_out))
    cdef double[:, ::1] delta = delta_arr
    cdef double loss = 0.0
    cdef double row_max, denom, val
    cdef Py_ssize_t best
    cdef long n_correct = 0
    cdef i64 label
    for i in range(batch):
        label = labels[i]
        row_max = logits[i, 0]
        best = 0
        for j in range(1, n_out):
            if logits[i, j] > row_max:
                row_max = logits[i, j]
                best = j
        if best == label:
            n_correct += 1
        denom = 0.0
        for j in range(n_out):
            val = exp(logits[i, j] - row_max)
            delta[i, j] = val
            denom += val
        loss += log(denom) - (logits[i, label] - row_max)
        for j in range(n_out):
            delta[i, j] /= denom
        delta[i, label] -= 1.0
        for j in range(n_out):
            delta[i, j] /= batch
    loss /= batch

    # backprop to the mask input
    cdef double[:, ::1] cur = delta
    cdef double[:, ::1] nxt
    cdef double[:, ::1] pre_prev
    for l in range(n_layers - 1, -1, -1):
        w_l = weights[l]
        nxt_arr = np.empty((batch, w_l.shape[1]))
        nxt = nxt_arr
        _backward_linear(cur, w_l, nxt)
        if l > 0 and acts[l - 1] == 1:
            pre_prev = pres[l - 1]
            for i in range(batch):
                for j in range(nxt.shape[1]):
                    if pre_prev[i, j] <= 0.0:
                        nxt[i, j] = 0.0
        cur = nxt

    grad_arr = np.empty(dim)
    cdef double[::1] grad = grad_arr
    cdef double acc
    for j in range(dim):
        grad[j] = 0.0
    for i in range(batch):
        for j in range(dim):
            grad[j] += cur[i, j] * x[i, j]

    return loss, grad_arr, int(n_correct)
