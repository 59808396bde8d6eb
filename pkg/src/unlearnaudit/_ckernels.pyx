# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled SGD / DP-SGD step loops for small ReLU MLPs.

Same flat parameter layout and update rules as ``_npkernels``; the work is
done one sample at a time, which avoids per-call numpy overhead on the tiny
matrices this harness trains.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


cdef struct Net:
    int n_layers
    Py_ssize_t *sizes      # n_layers + 1 widths
    Py_ssize_t *w_off      # start of each weight block
    Py_ssize_t *b_off      # start of each bias block
    Py_ssize_t *a_off      # start of each activation block in the scratch buffer


cdef void _sample_grad(
    const double[::1] p,
    const double[:, ::1] X,
    Py_ssize_t row,
    Py_ssize_t label,
    Net* net,
    double* act,
    double* dcur,
    double* dnext,
    double* g,
    double weight,
) noexcept nogil:
    """Add ``weight * grad`` of one sample's cross-entropy into ``g``."""
    cdef int L = net.n_layers
    cdef int l
    cdef Py_ssize_t i, j, fi, fo
    cdef double z, m, s
    cdef double *a_in
    cdef double *a_out
    cdef double *tmp

    fi = net.sizes[0]
    for i in range(fi):
        act[i] = X[row, i]

    for l in range(L):
        fi = net.sizes[l]
        fo = net.sizes[l + 1]
        a_in = act + net.a_off[l]
        a_out = act + net.a_off[l + 1]
        for j in range(fo):
            a_out[j] = p[net.b_off[l] + j]
        for i in range(fi):
            z = a_in[i]
            if z != 0.0:
                for j in range(fo):
                    a_out[j] += z * p[net.w_off[l] + i * fo + j]
        if l < L - 1:
            for j in range(fo):
                if a_out[j] < 0.0:
                    a_out[j] = 0.0

    # softmax cross-entropy delta at the output
    fo = net.sizes[L]
    a_out = act + net.a_off[L]
    m = a_out[0]
    for j in range(1, fo):
        if a_out[j] > m:
            m = a_out[j]
    s = 0.0
    for j in range(fo):
        dcur[j] = exp(a_out[j] - m)
        s += dcur[j]
    for j in range(fo):
        dcur[j] /= s
    dcur[label] -= 1.0

    for l in range(L - 1, -1, -1):
        fi = net.sizes[l]
        fo = net.sizes[l + 1]
        a_in = act + net.a_off[l]
        for j in range(fo):
            g[net.b_off[l] + j] += weight * dcur[j]
        for i in range(fi):
            z = a_in[i]
            if z != 0.0:
                for j in range(fo):
                    g[net.w_off[l] + i * fo + j] += weight * z * dcur[j]
        if l > 0:
            for i in range(fi):
                if a_in[i] > 0.0:
                    s = 0.0
                    for j in range(fo):
                        s += p[net.w_off[l] + i * fo + j] * dcur[j]
                    dnext[i] = s
                else:
                    dnext[i] = 0.0
            tmp = dcur
            dcur = dnext
            dnext = tmp


cdef class _NetBuffers:
    cdef Net net
    cdef Py_ssize_t[::1] sizes, w_off, b_off, a_off
    cdef double[::1] act, d1, d2

    def __init__(self, arch):
        cdef int L = len(arch) - 1
        cdef int l
        self.sizes = np.asarray(arch, dtype=np.intp)
        self.w_off = np.zeros(L, dtype=np.intp)
        self.b_off = np.zeros(L, dtype=np.intp)
        self.a_off = np.zeros(L + 1, dtype=np.intp)
        pos = 0
        apos = 0
        for l in range(L):
            self.w_off[l] = pos
            pos += arch[l] * arch[l + 1]
            self.b_off[l] = pos
            pos += arch[l + 1]
            self.a_off[l] = apos
            apos += arch[l]
        self.a_off[L] = apos
        apos += arch[L]
        width = max(arch)
        self.act = np.zeros(apos)
        self.d1 = np.zeros(width)
        self.d2 = np.zeros(width)
        self.net.n_layers = L
        self.net.sizes = &self.sizes[0]
        self.net.w_off = &self.w_off[0]
        self.net.b_off = &self.b_off[0]
        self.net.a_off = &self.a_off[0]


def sgd_steps(double[::1] params, arch, const double[:, ::1] X, const cnp.int64_t[::1] y,
              const cnp.int64_t[::1] idx, const cnp.int64_t[::1] offsets, double lr,
              const double[::1] decay, const double[::1] update_mask, double sign):
    cdef _NetBuffers nb = _NetBuffers(arch)
    cdef Py_ssize_t P = params.shape[0]
    cdef double[::1] g = np.zeros(P)
    cdef Py_ssize_t s, k, r, q, n_steps = offsets.shape[0] - 1
    cdef double inv
    with nogil:
        for s in range(n_steps):
            for q in range(P):
                g[q] = 0.0
            inv = 1.0 / (offsets[s + 1] - offsets[s])
            for k in range(offsets[s], offsets[s + 1]):
                r = idx[k]
                _sample_grad(params, X, r, y[r], &nb.net, &nb.act[0], &nb.d1[0], &nb.d2[0], &g[0], inv)
            for q in range(P):
                params[q] -= lr * (sign * g[q] + decay[q] * params[q]) * update_mask[q]


def dp_sgd_steps(double[::1] params, arch, const double[:, ::1] X, const cnp.int64_t[::1] y,
                 const cnp.int64_t[::1] idx, const cnp.int64_t[::1] offsets, double lr,
                 const double[::1] decay, double clip, const double[:, ::1] noise):
    cdef _NetBuffers nb = _NetBuffers(arch)
    cdef Py_ssize_t P = params.shape[0]
    cdef double[::1] g = np.zeros(P)
    cdef double[::1] gs = np.zeros(P)
    cdef Py_ssize_t s, k, r, q, n_steps = offsets.shape[0] - 1
    cdef double norm, scale, inv
    with nogil:
        for s in range(n_steps):
            for q in range(P):
                g[q] = 0.0
            for k in range(offsets[s], offsets[s + 1]):
                r = idx[k]
                for q in range(P):
                    gs[q] = 0.0
                _sample_grad(params, X, r, y[r], &nb.net, &nb.act[0], &nb.d1[0], &nb.d2[0], &gs[0], 1.0)
                norm = 0.0
                for q in range(P):
                    norm += gs[q] * gs[q]
                norm = sqrt(norm)
                scale = 1.0
                if norm > clip:
                    scale = clip / norm
                for q in range(P):
                    g[q] += scale * gs[q]
            inv = 1.0 / (offsets[s + 1] - offsets[s])
            for q in range(P):
                params[q] -= lr * ((g[q] + noise[s, q]) * inv + decay[q] * params[q])
