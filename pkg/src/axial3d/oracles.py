"""Slow, loop-based reference computations.

These share no code with the vectorized kernels: scores, softmax and sums
are written out with Python loops over plain floats.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def naive_fiber(f: np.ndarray) -> np.ndarray:
    """Attention of one ``D x L`` fiber: column l of the result mixes all columns."""
    d, length = f.shape
    out = np.zeros((d, length))
    for l in range(length):
        scores = [sum(f[k, l] * f[k, m] for k in range(d)) for m in range(length)]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        tot = sum(ex)
        for m in range(length):
            w = ex[m] / tot
            for k in range(d):
                out[k, l] += w * f[k, m]
    return out


def naive_axis_attention(t: np.ndarray) -> np.ndarray:
    """Apply :func:`naive_fiber` to every last-axis fiber of a ``D x ... x L`` tensor."""
    out = np.empty_like(t, dtype=np.float64)
    for idx in itertools.product(*(range(n) for n in t.shape[1:-1])):
        sl = (slice(None),) + idx + (slice(None),)
        out[sl] = naive_fiber(np.asarray(t[sl], dtype=np.float64))
    return out


def naive_nonlocal(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Full attention on ``D x N`` embeddings by explicit loops."""
    d, n = q.shape
    out = np.zeros((v.shape[0], n))
    for i in range(n):
        scores = [sum(q[c, i] * k[c, j] for c in range(d)) for j in range(n)]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        tot = sum(ex)
        for j in range(n):
            out[:, i] += (ex[j] / tot) * v[:, j]
    return out


def brute_force_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
