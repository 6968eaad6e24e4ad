"""Independent straight-line reference implementations used by the tests.

Nothing here imports the package; every formula is written out with plain
loops over Python floats (or mpmath numbers for the high-precision checks).
"""

from __future__ import annotations

import math

import mpmath

OBJECTIVES = ("relevance", "exposure", "click", "purchase")


def clipped_objective_loss(scores, labels, tau, exclusive, exp=math.exp, log=math.log):
    """-sum_k y_k log(min(p_k * |o+|, 1)) with p_k normalized over either all
    candidates or the negatives plus k."""
    n = len(scores)
    pos = [k for k in range(n) if labels[k] > 0]
    if not pos:
        return 0 * scores[0]
    neg = [j for j in range(n) if labels[j] == 0]
    total = 0 * scores[0]
    for k in pos:
        denom_ids = (neg + [k]) if exclusive else list(range(n))
        top = max(scores[j] / tau for j in denom_ids)
        z = sum(exp(scores[j] / tau - top) for j in denom_ids)
        p = exp(scores[k] / tau - top) / z
        clipped = min(p * len(pos), 1)
        total -= labels[k] * log(clipped)
    return total


def weighted_loss(scores, labels, tau, weights, exclusive, exp=math.exp, log=math.log):
    return sum(
        weights[i] * clipped_objective_loss(scores, labels[i], tau, exclusive, exp, log) for i in range(len(OBJECTIVES))
    )


def mp_weighted_loss(scores, labels, tau, weights, exclusive, dps=50):
    with mpmath.workdps(dps):
        s = [mpmath.mpf(float(x)) for x in scores]
        return weighted_loss(s, labels, mpmath.mpf(float(tau)), [mpmath.mpf(w) for w in weights], exclusive, mpmath.exp, mpmath.log)


def _mp_weighted_loss(scores, labels, tau, weights, exclusive):
    """The same loss with each exponential taken once.  mpmath's exponent range
    is unbounded, so no max shift is needed."""
    e = [mpmath.exp(x / tau) for x in scores]
    everything = mpmath.fsum(e)
    total = mpmath.mpf(0)
    for w, row in zip(weights, labels):
        pos = [k for k, y in enumerate(row) if y > 0]
        if not pos:
            continue
        negatives = mpmath.fsum(e[j] for j, y in enumerate(row) if y == 0)
        for k in pos:
            p = e[k] / (negatives + e[k] if exclusive else everything)
            total -= w * row[k] * mpmath.log(min(p * len(pos), 1))
    return total


def mp_central_difference(scores, labels, tau, weights, exclusive, eps=1e-5, dps=30):
    """Central differences evaluated in extended precision, so only the
    O(eps^2) truncation error remains."""
    out = []
    with mpmath.workdps(dps):
        h = mpmath.mpf(eps)
        t = mpmath.mpf(float(tau))
        w = [mpmath.mpf(x) for x in weights]
        base = [mpmath.mpf(float(x)) for x in scores]
        for i in range(len(scores)):
            up = list(base)
            dn = list(base)
            up[i] += h
            dn[i] -= h
            f_up = _mp_weighted_loss(up, labels, t, w, exclusive)
            f_dn = _mp_weighted_loss(dn, labels, t, w, exclusive)
            out.append(float((f_up - f_dn) / (2 * h)))
    return out


def log_sum_exp(xs):
    top = max(xs)
    return top + math.log(sum(math.exp(x - top) for x in xs))


def cosine(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def attention_aggregate(h, neighbors, w_self, w_neigh):
    """W_self h + sum_j softmax_j(<h, h_j>/sqrt(d)) W_neigh h_j."""
    d = len(h)

    def matvec(w, v):
        return [sum(w[r][c] * v[c] for c in range(d)) for r in range(d)]

    out = matvec(w_self, h)
    if not neighbors:
        return out
    logits = [sum(a * b for a, b in zip(h, hj)) / math.sqrt(d) for hj in neighbors]
    top = max(logits)
    e = [math.exp(x - top) for x in logits]
    z = sum(e)
    for wj, hj in zip(e, neighbors):
        m = matvec(w_neigh, hj)
        out = [o + (wj / z) * x for o, x in zip(out, m)]
    return out


def brute_force_topk(vectors, category, topk, restricted=True):
    """O(n^2) scan: cosine neighbors sorted by (-score, id), self excluded.

    Scores are rounded to 12 decimals before ranking."""
    n = len(vectors)
    out = {}
    for i in range(n):
        cands = []
        for j in range(n):
            if j == i or (restricted and category[j] != category[i]):
                continue
            cands.append((-round(cosine(vectors[i], vectors[j]), 12), j))
        cands.sort()
        out[i] = [(j, -s) for s, j in cands[:topk]]
    return out


def zipf(n, skew):
    raw = [1.0 / (r + 1) ** skew for r in range(n)]
    z = sum(raw)
    return [x / z for x in raw]
