"""Loop-based reference implementations.

Plain Python loops over numpy float64 arrays, written straight from the
per-element definitions. They share no code with the vectorized torch path
and exist only to check it.
"""

import math

import numpy as np


def _softmax(logits, allowed):
    out = np.zeros(len(logits))
    top = max(v for v, ok in zip(logits, allowed) if ok)
    total = 0.0
    for k, (v, ok) in enumerate(zip(logits, allowed)):
        if ok:
            out[k] = math.exp(v - top)
            total += out[k]
    return out / total


def _dot(u, v):
    return sum(float(a) * float(b) for a, b in zip(u, v))


def commonality(A, W, masks=None):
    """A: list of n (m, d) arrays; W: (d, d) or (n, n, d, d)."""
    n = len(A)
    m, d = A[0].shape
    if masks is None:
        masks = [np.ones(m, dtype=bool) for _ in range(n)]
    C = np.zeros((m, d))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            Wij = W if W.ndim == 2 else W[i, j]
            for r in range(m):
                if not masks[i][r]:
                    continue
                left = [_dot(A[i][r], Wij[:, e]) for e in range(d)]
                logits = [_dot(left, A[j][s]) for s in range(m)]
                s_row = _softmax(logits, masks[j])
                for s in range(m):
                    for e in range(d):
                        C[r, e] += s_row[s] * A[j][s, e]
    return C / n


def layer_normalize(X, gain=None, bias=None, eps=1e-6):
    l, d = X.shape
    out = np.zeros((l, d))
    for r in range(l):
        mean = sum(X[r]) / d
        var = sum((x - mean) ** 2 for x in X[r]) / d
        for e in range(d):
            y = (X[r, e] - mean) / math.sqrt(var + eps)
            if gain is not None:
                y *= gain[e]
            if bias is not None:
                y += bias[e]
            out[r, e] = y
    return out


def max_pool(X, mask=None):
    l, d = X.shape
    mask = np.ones(l, dtype=bool) if mask is None else mask
    out = []
    for e in range(d):
        out.append(max(X[r, e] for r in range(l) if mask[r]))
    return np.array(out)


def cross_attention(T, Cx, W_I, tmask=None, cmask=None, gain=None, bias=None, eps=1e-6):
    l, d = T.shape
    m = Cx.shape[0]
    tmask = np.ones(l, dtype=bool) if tmask is None else tmask
    cmask = np.ones(m, dtype=bool) if cmask is None else cmask
    I_t = np.array([_softmax([_dot(Cx[s], T[r]) for r in range(l)], tmask) for s in range(m)])
    I_c = np.array([_softmax([_dot(T[r], Cx[s]) for s in range(m)], cmask) for r in range(l)])
    # rows of [I_t T ; C], one per context position
    stacked = np.zeros((m, 2 * d))
    for s in range(m):
        for e in range(d):
            stacked[s, e] = sum(I_t[s, r] * T[r, e] for r in range(l))
            stacked[s, d + e] = Cx[s, e]
    pre = np.zeros((l, d))
    for r in range(l):
        mixed = [sum(I_c[r, s] * stacked[s, f] for s in range(m)) for f in range(2 * d)]
        for e in range(d):
            pre[r, e] = T[r, e] + sum(mixed[f] * W_I[f, e] for f in range(2 * d))
    enhanced = layer_normalize(pre, gain, bias, eps)
    for r in range(l):
        if not tmask[r]:
            enhanced[r] = 0.0
    return enhanced, max_pool(enhanced, tmask)


def refine(Qa, qa, Qc, qc):
    out = np.zeros_like(Qa)
    for idx in np.ndindex(Qa.shape):
        out[idx] = Qa[idx] - Qc[idx]
    vec = np.array([qa[e] - qc[e] for e in range(len(qa))])
    return out, vec


def mlp_logit(q, a, W1, b1, W2, b2):
    """tanh hidden layer over [q ; a], scalar output. W1: (h, 2d), W2: (1, h)."""
    x = list(q) + list(a)
    hidden = [math.tanh(_dot(W1[k], x) + b1[k]) for k in range(len(b1))]
    return _dot(W2[0], hidden) + b2[0]


def token_weights(Q, A, qmask=None, amasks=None):
    """Per-choice percentage weight of each real question token."""
    l = Q.shape[0]
    qmask = np.ones(l, dtype=bool) if qmask is None else qmask
    rows, degenerate = [], []
    for i, Ai in enumerate(A):
        am = np.ones(Ai.shape[0], dtype=bool) if amasks is None else amasks[i]
        raw = []
        for r in range(l):
            if not qmask[r]:
                continue
            weights = _softmax([_dot(Q[r], Ai[s]) for s in range(Ai.shape[0])], am)
            raw.append(max(w for w, ok in zip(weights, am) if ok))
        lo, hi = min(raw), max(raw)
        if hi == lo:
            rows.append([0.0] * len(raw))
            degenerate.append(True)
        else:
            rows.append([100.0 * ((x - lo) / (hi - lo)) for x in raw])
            degenerate.append(False)
    return np.array(rows), degenerate
