"""Brute-force reference implementations used as test oracles.

These deliberately avoid numpy vectorisation and the package's own helpers so
that agreement is meaningful.
"""

import math


def pr_re(gt, pred, num_phases):
    """Per-phase precision and recall by explicit frame-set intersection."""
    out = []
    for z in range(num_phases):
        gt_set = {i for i, g in enumerate(gt) if g == z}
        p_set = {i for i, p in enumerate(pred) if p == z}
        both = gt_set & p_set
        pr = len(both) / len(p_set) if p_set else None
        re = len(both) / len(gt_set) if gt_set else None
        out.append((pr, re))
    return out


def accuracy(gt, pred):
    correct = 0
    for g, p in zip(gt, pred):
        if g == p:
            correct += 1
    return correct / len(gt)


def average_precision(scores, labels):
    """Enumerate every ranked prefix and average precision at positive ranks."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for y in labels if y)
    if n_pos == 0:
        return None
    terms = []
    for k in range(1, len(ranked) + 1):
        if labels[ranked[k - 1]]:
            hits = sum(1 for i in ranked[:k] if labels[i])
            terms.append(float(hits) / float(k))
    return math.fsum(terms) / n_pos


def confusion(gt, pred, num_phases):
    counts = [[0] * num_phases for _ in range(num_phases)]
    for g, p in zip(gt, pred):
        counts[g][p] += 1
    rows = []
    for row in counts:
        s = sum(row)
        rows.append([c / s if s else 0.0 for c in row])
    return rows


def cooccurrence_counts(phases, tools, num_phases):
    nc = len(tools[0])
    out = [[0] * num_phases for _ in range(nc + 1)]
    for z, t in zip(phases, tools):
        for c in range(nc):
            if t[c]:
                out[c][z] += 1
        if not any(t):
            out[nc][z] += 1
    return out
