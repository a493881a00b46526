"""Plain-numpy recomputations of the neural blocks, used as step-by-step
oracles against the tensor implementations. Heads are split by slicing
projection columns and looped one at a time on purpose: no code shared with
the batched implementation."""

import numpy as np


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_mha(q, k, v, p, mask=None):
    heads = p.n_heads
    d = q.shape[1]
    dh = d // heads
    parts = []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        qh = q @ p.w_q.data[:, cols]
        kh = k @ p.w_k.data[:, cols]
        vh = v @ p.w_v.data[:, cols]
        scores = qh @ kh.T / np.sqrt(dh)
        if mask is not None:
            scores = np.where(mask, scores, -1e9)
        parts.append(np_softmax(scores) @ vh)
    return np.concatenate(parts, axis=1) @ p.w_o.data


def np_ln(x, p, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p.gain.data + p.bias.data


def np_ffn(x, p):
    return np.maximum(x @ p.w1.data + p.b1.data, 0.0) @ p.w2.data + p.b2.data
