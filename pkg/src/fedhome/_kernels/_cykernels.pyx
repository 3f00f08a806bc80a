# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels; same contracts as the NumPy backend.

Fused per-layer loops avoid the temporaries the vectorized fallback builds,
which pays off at this model's tiny matrix sizes.
"""

from libc.math cimport exp, log, sqrt

import numpy as np

BACKEND = "cy"

cdef double _LOG_FLOOR = 1e-300


cdef void _layer_forward(const double[:, ::1] a_in, const double[:, ::1] w,
                         const double[:] b, double[:, ::1] out,
                         bint is_last) noexcept nogil:
    cdef Py_ssize_t n = a_in.shape[0]
    cdef Py_ssize_t d_in = a_in.shape[1]
    cdef Py_ssize_t d_out = w.shape[0]
    cdef Py_ssize_t i, j, o
    cdef double z, m, s
    for i in range(n):
        for o in range(d_out):
            z = b[o]
            for j in range(d_in):
                z += a_in[i, j] * w[o, j]
            out[i, o] = z
        if is_last:
            m = out[i, 0]
            for o in range(1, d_out):
                if out[i, o] > m:
                    m = out[i, o]
            s = 0.0
            for o in range(d_out):
                out[i, o] = exp(out[i, o] - m)
                s += out[i, o]
            for o in range(d_out):
                out[i, o] /= s
        else:
            for o in range(d_out):
                if out[i, o] < 0.0:
                    out[i, o] = 0.0


cdef void _grad_accum(const double[:, ::1] delta, const double[:, ::1] a_prev,
                      double[:, ::1] gw, double[:] gb) noexcept nogil:
    cdef Py_ssize_t n = delta.shape[0]
    cdef Py_ssize_t d_out = delta.shape[1]
    cdef Py_ssize_t d_in = a_prev.shape[1]
    cdef Py_ssize_t i, j, o
    cdef double d
    for i in range(n):
        for o in range(d_out):
            d = delta[i, o]
            gb[o] += d
            for j in range(d_in):
                gw[o, j] += d * a_prev[i, j]


cdef void _backprop_delta(const double[:, ::1] delta, const double[:, ::1] w,
                          const double[:, ::1] a_prev,
                          double[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t n = delta.shape[0]
    cdef Py_ssize_t d_out = delta.shape[1]
    cdef Py_ssize_t d_in = a_prev.shape[1]
    cdef Py_ssize_t i, j, o
    cdef double s
    for i in range(n):
        for j in range(d_in):
            if a_prev[i, j] > 0.0:
                s = 0.0
                for o in range(d_out):
                    s += delta[i, o] * w[o, j]
                out[i, j] = s
            else:
                out[i, j] = 0.0


def _forward_all(weights, biases, x):
    acts = []
    a = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t l
    for l in range(n_layers):
        w = np.ascontiguousarray(weights[l], dtype=np.float64)
        b = np.ascontiguousarray(biases[l], dtype=np.float64)
        out = np.empty((a.shape[0], w.shape[0]))
        _layer_forward(a, w, b, out, l == n_layers - 1)
        acts.append(out)
        a = out
    return acts


def forward_probs(weights, biases, x):
    """Softmax class probabilities, shape (n, classes)."""
    acts = _forward_all(weights, biases, x)
    # wraparound is off in this module: no negative list indices.
    return acts[len(acts) - 1]


cdef double _nll_mean(const double[:, ::1] probs, const long long[::1] y) noexcept nogil:
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t i
    cdef double p, total = 0.0
    for i in range(n):
        p = probs[i, y[i]]
        if p < _LOG_FLOOR:
            p = _LOG_FLOOR
        total -= log(p)
    return total / n


cdef void _softmax_delta(const double[:, ::1] probs, const long long[::1] y,
                         double[:, ::1] delta, double inv_scale) noexcept nogil:
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t k = probs.shape[1]
    cdef Py_ssize_t i, o
    for i in range(n):
        for o in range(k):
            delta[i, o] = probs[i, o] * inv_scale
        delta[i, y[i]] -= inv_scale


def loss_and_grad(weights, biases, x, y):
    """Mean cross-entropy over the batch and its gradient."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    yv = np.ascontiguousarray(y, dtype=np.longlong)
    acts = _forward_all(weights, biases, x)
    cdef Py_ssize_t n_layers = len(weights)
    probs = acts[n_layers - 1]
    cdef Py_ssize_t n = x.shape[0]
    cdef double loss = _nll_mean(probs, yv)
    cdef Py_ssize_t l
    gws = [None] * n_layers
    gbs = [None] * n_layers
    delta = np.empty_like(probs)
    _softmax_delta(probs, yv, delta, 1.0 / n)
    for l in range(n_layers - 1, -1, -1):
        a_prev = x if l == 0 else acts[l - 1]
        w = np.ascontiguousarray(weights[l], dtype=np.float64)
        gw = np.zeros_like(w)
        gb = np.zeros(w.shape[0])
        _grad_accum(delta, a_prev, gw, gb)
        gws[l] = gw
        gbs[l] = gb
        if l > 0:
            nxt = np.empty_like(a_prev)
            _backprop_delta(delta, w, a_prev, nxt)
            delta = nxt
    return loss, gws, gbs


cdef double _sq_sum(const double[:, ::1] gw, const double[:] gb) noexcept nogil:
    cdef Py_ssize_t r = gw.shape[0]
    cdef Py_ssize_t c = gw.shape[1]
    cdef Py_ssize_t i, j
    cdef double s = 0.0
    for i in range(r):
        for j in range(c):
            s += gw[i, j] * gw[i, j]
        s += gb[i] * gb[i]
    return s


cdef void _axpy(double factor, const double[:, ::1] gw, const double[:] gb,
                double[:, ::1] ow, double[:] ob) noexcept nogil:
    cdef Py_ssize_t r = gw.shape[0]
    cdef Py_ssize_t c = gw.shape[1]
    cdef Py_ssize_t i, j
    for i in range(r):
        for j in range(c):
            ow[i, j] += factor * gw[i, j]
        ob[i] += factor * gb[i]


def clipped_grad_sum(weights, biases, x, y, clip, num_microbatches):
    """Sum of per-microbatch gradients, each L2-clipped to ``clip``.

    Same contract as the NumPy backend: chunk gradients are gradients of the
    chunk-mean cross-entropy; returns the clipped sum, the batch mean loss,
    and the largest post-clip chunk norm.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    yv = np.ascontiguousarray(y, dtype=np.longlong)
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = num_microbatches
    if n % m != 0:
        raise ValueError(f"batch size {n} not divisible by {m} microbatches")
    cdef Py_ssize_t k = n // m
    cdef double cclip = clip

    acts = _forward_all(weights, biases, x)
    cdef Py_ssize_t n_layers = len(weights)
    probs = acts[n_layers - 1]
    cdef double loss = _nll_mean(probs, yv)

    cdef Py_ssize_t l, mb
    ws = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
    gw_sums = [np.zeros_like(w) for w in ws]
    gb_sums = [np.zeros(w.shape[0]) for w in ws]
    gw_bufs = [np.empty_like(w) for w in ws]
    gb_bufs = [np.empty(w.shape[0]) for w in ws]
    delta_bufs = [np.empty((k, w.shape[0])) for w in ws]

    cdef double sq, norm, factor, clipped, max_clipped = 0.0
    for mb in range(m):
        rows = slice(mb * k, (mb + 1) * k)
        _softmax_delta(probs[rows], yv[rows], delta_bufs[n_layers - 1], 1.0 / k)
        sq = 0.0
        for l in range(n_layers - 1, -1, -1):
            a_prev = x[rows] if l == 0 else acts[l - 1][rows]
            gw = gw_bufs[l]
            gb = gb_bufs[l]
            gw[...] = 0.0
            gb[...] = 0.0
            _grad_accum(delta_bufs[l], a_prev, gw, gb)
            sq += _sq_sum(gw, gb)
            if l > 0:
                _backprop_delta(delta_bufs[l], ws[l], a_prev, delta_bufs[l - 1])
        norm = sqrt(sq)
        factor = 1.0
        if norm > cclip:
            factor = cclip / norm
        clipped = norm if norm < cclip else cclip
        if clipped > max_clipped:
            max_clipped = clipped
        for l in range(n_layers):
            _axpy(factor, gw_bufs[l], gb_bufs[l], gw_sums[l], gb_sums[l])
    return gw_sums, gb_sums, loss, max_clipped
