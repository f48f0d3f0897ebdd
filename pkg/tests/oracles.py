"""Brute-force reference computations, deliberately loop-based and separate
from the library's vectorised code paths."""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np


def bayes_posterior_marginals(z, t, kind, initial, transition, mask_id=None):
    """Enumerate every clean sequence; return (S, V) posterior marginals."""
    V = len(initial)
    S = len(z)
    a = 1.0 - t
    marg = np.zeros((S, V))
    for w in itertools.product(range(V), repeat=S):
        prior = initial[w[0]]
        for j in range(1, S):
            prior *= transition[w[j - 1]][w[j]]
        like = 1.0
        for j in range(S):
            if kind == "mdlm":
                like *= 1.0 if z[j] == mask_id else float(z[j] == w[j])
            else:
                like *= a * (z[j] == w[j]) + (1 - a) / V
        for j in range(S):
            marg[j, w[j]] += prior * like
    return marg / marg.sum(axis=1, keepdims=True)


def usdm_posterior_bayes(z_t, w, a_s, a_t, V):
    """q(z_s | z_t, w) by enumerating z_s with the product rule."""
    a_ts = a_t / a_s
    out = []
    for v in range(V):
        q_s = a_s * (v == w) + (1 - a_s) / V
        q_t = a_ts * (z_t == v) + (1 - a_ts) / V
        out.append(q_s * q_t)
    total = sum(out)
    return np.array([x / total for x in out])


def ctc_collapse(path, blank):
    out = []
    prev = None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return tuple(out)


def ctc_path_sum(probs, labels, blank):
    """P(labels | x) by summing over every frame-label path."""
    T, C = probs.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if ctc_collapse(path, blank) == tuple(labels):
            total += math.prod(probs[t, c] for t, c in enumerate(path))
    return total


def ctc_label_distribution(probs, blank):
    """Map every reachable label sequence to its total probability."""
    T, C = probs.shape
    dist: dict = {}
    for path in itertools.product(range(C), repeat=T):
        key = ctc_collapse(path, blank)
        dist[key] = dist.get(key, 0.0) + math.prod(probs[t, c] for t, c in enumerate(path))
    return dist


def levenshtein(a, b):
    @lru_cache(maxsize=None)
    def go(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(go(i - 1, j) + 1, go(i, j - 1) + 1, go(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return go(len(a), len(b))
