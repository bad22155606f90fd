"""Independent brute-force reimplementations used as test oracles.

Deliberately written with plain Python loops and without importing the code
under test (apart from the box container).
"""

import math

import numpy as np


def box_iou(a, b):
    ax2, ay2 = a.x + a.w, a.y + a.h
    bx2, by2 = b.x + b.w, b.y + b.h
    iw = min(ax2, bx2) - max(a.x, b.x)
    ih = min(ay2, by2) - max(a.y, b.y)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    # roundoff can push identical boxes a hair above 1
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))


def centre_distance(a, b):
    return math.hypot((a.x + a.w / 2) - (b.x + b.w / 2), (a.y + a.h / 2) - (b.y + b.h / 2))


def score_frames(seq, preds):
    """(prc, auc, success@0.5) by counting frames threshold by threshold."""
    dists, ious = [], []
    for f, p in zip(seq.frames, preds):
        if f.absent:
            continue
        dists.append(centre_distance(f.box, p))
        ious.append(box_iou(f.box, p))
    n = len(dists)
    prc = sum(1 for d in dists if d <= 20.0) / n
    succ = []
    for k in range(21):
        tau = k / 20
        succ.append(sum(1 for v in ious if v > tau) / n)
    auc = math.fsum(succ) / 21
    half = sum(1 for v in ious if v > 0.5) / n
    return prc, auc, half


def dataset_scores(seqs, results):
    per = {s.name: score_frames(s, results[s.name]) for s in seqs}
    agg = tuple(math.fsum(v[i] for v in per.values()) / len(per) for i in range(3))
    return per, agg


def dense_sinkhorn(scores, alpha, iters):
    """Probability-domain Sinkhorn on the dustbin-augmented matrix."""
    n, m = scores.shape
    z = np.full((n + 1, m + 1), float(alpha))
    z[:n, :m] = scores
    k = np.exp(z - z.max())
    r = np.concatenate([np.ones(n), [m]])
    c = np.concatenate([np.ones(m), [n]])
    u, v = np.ones(n + 1), np.ones(m + 1)
    for _ in range(iters):
        u = r / (k @ v)
        v = c / (k.T @ u)
    return u[:, None] * k * v[None, :]
