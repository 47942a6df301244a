# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled attention and matmul kernels.

All reductions run in ascending index order so results are reproducible
bit-for-bit. Each inner loop adds its trip count to a multiply-accumulate counter that
is returned to the caller.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    """Return (a @ b, macs) with out[i, j] accumulated over k ascending."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1], p = b.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double aik
    cdef double *orow
    cdef const double *brow
    cdef long long macs = 0
    if b.shape[0] != m:
        raise ValueError("inner dimensions differ")
    out = np.zeros((n, p), dtype=np.float64)
    cdef double[:, ::1] o = out
    if n == 0 or m == 0 or p == 0:
        return out, macs
    with nogil:
        for i in range(n):
            orow = &o[i, 0]
            for k in range(m):
                aik = a[i, k]
                brow = &b[k, 0]
                # independent outputs along j: vectorizable without reassociation
                for j in range(p):
                    orow[j] += aik * brow[j]
                macs += p
    return out, macs


def attention_forward(const double[:, :, ::1] q, const double[:, :, ::1] k,
                      const double[:, :, ::1] v, double scale):
    """Scaled dot-product attention over a batch of independent groups.

    q: [B, Tq, d], k and v: [B, Tk, d]. Returns (out [B, Tq, d],
    probs [B, Tq, Tk], macs). Each score accumulates over the feature axis
    in ascending order; the loop runs over keys innermost.
    """
    cdef Py_ssize_t nb = q.shape[0], tq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t tk = k.shape[1]
    cdef Py_ssize_t b, i, j, c
    cdef double qic, mx, tot, pij
    cdef double *prow
    cdef double *orow
    cdef const double *krow
    cdef const double *vrow
    cdef long long macs = 0
    if tk == 0:
        raise ValueError("empty key axis")
    out = np.zeros((nb, tq, d), dtype=np.float64)
    probs = np.zeros((nb, tq, tk), dtype=np.float64)
    kt_arr = np.ascontiguousarray(np.transpose(k, (0, 2, 1)))
    cdef double[:, :, ::1] kt = kt_arr
    cdef double[:, :, ::1] o = out
    cdef double[:, :, ::1] p = probs
    if tq == 0 or d == 0:
        return out, probs, macs
    with nogil:
        for b in range(nb):
            for i in range(tq):
                prow = &p[b, i, 0]
                orow = &o[b, i, 0]
                for c in range(d):
                    qic = q[b, i, c]
                    krow = &kt[b, c, 0]
                    for j in range(tk):
                        prow[j] += qic * krow[j]
                    macs += tk
                mx = prow[0] * scale
                for j in range(tk):
                    prow[j] = prow[j] * scale
                    if prow[j] > mx:
                        mx = prow[j]
                tot = 0.0
                for j in range(tk):
                    prow[j] = exp(prow[j] - mx)
                    tot += prow[j]
                for j in range(tk):
                    prow[j] = prow[j] / tot
                for j in range(tk):
                    pij = prow[j]
                    vrow = &v[b, j, 0]
                    for c in range(d):
                        orow[c] += pij * vrow[c]
                    macs += d
    return out, probs, macs


def attention_backward(const double[:, :, ::1] dout, const double[:, :, ::1] q,
                       const double[:, :, ::1] k, const double[:, :, ::1] v,
                       const double[:, :, ::1] probs, double scale):
    cdef Py_ssize_t nb = q.shape[0], tq = q.shape[1], d = q.shape[2]
    cdef Py_ssize_t tk = k.shape[1]
    cdef Py_ssize_t b, i, j, c
    cdef double acc, dot, ds
    dq = np.zeros((nb, tq, d), dtype=np.float64)
    dk = np.zeros((nb, tk, d), dtype=np.float64)
    dv = np.zeros((nb, tk, d), dtype=np.float64)
    dp = np.empty(tk, dtype=np.float64)
    cdef double[:, :, ::1] gq = dq
    cdef double[:, :, ::1] gk = dk
    cdef double[:, :, ::1] gv = dv
    cdef double[::1] gp = dp
    with nogil:
        for b in range(nb):
            for i in range(tq):
                dot = 0.0
                for j in range(tk):
                    acc = 0.0
                    for c in range(d):
                        acc += dout[b, i, c] * v[b, j, c]
                        gv[b, j, c] += probs[b, i, j] * dout[b, i, c]
                    gp[j] = acc
                    dot += acc * probs[b, i, j]
                for j in range(tk):
                    ds = probs[b, i, j] * (gp[j] - dot) * scale
                    for c in range(d):
                        gq[b, i, c] += ds * k[b, j, c]
                        gk[b, j, c] += ds * q[b, i, c]
    return dq, dk, dv
