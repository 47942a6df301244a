"""Pure numpy versions of the compiled kernels (same signatures).

MAC counts are derived from the operand shapes of each matmul call.
"""

import numpy as np


def matmul(a, b):
    dtype = np.result_type(a, b, np.float64)      # float64, or wider under extended precision
    a = np.ascontiguousarray(a, dtype=dtype)
    b = np.ascontiguousarray(b, dtype=dtype)
    if a.shape[1] != b.shape[0]:
        raise ValueError("inner dimensions differ")
    return a @ b, a.shape[0] * a.shape[1] * b.shape[1]


def attention_forward(q, k, v, scale):
    nb, tq, d = q.shape
    tk = k.shape[1]
    if tk == 0:
        raise ValueError("empty key axis")
    scores = np.matmul(q, k.transpose(0, 2, 1)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.matmul(probs, v)
    macs = nb * tq * tk * d + nb * tq * tk * v.shape[2]
    return out, probs, macs


def attention_backward(dout, q, k, v, probs, scale):
    dv = np.matmul(probs.transpose(0, 2, 1), dout)
    dp = np.matmul(dout, v.transpose(0, 2, 1))
    ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True)) * scale
    dq = np.matmul(ds, k)
    dk = np.matmul(ds.transpose(0, 2, 1), q)
    return dq, dk, dv
