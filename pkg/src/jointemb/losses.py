"""Metric-learning objectives and tuple miners.

All losses take embeddings as float arrays and return ``(loss, grads)`` where
the gradients are w.r.t. the embeddings passed in. Labels are joint class
indices, so "same class" means same subject *and* same sensor.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
import logging
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

ONLINE_STRATEGIES = ("random_negative", "semi_hard", "hardest")
NPAIR_MODES = ("all_positive_pairs", "hard_negative_pairs")


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


class NPairTuple(NamedTuple):
    anchor: int
    positive: int
    negatives: tuple


@dataclass(frozen=True)
class MarginConfig:
    contrastive: float = 1.0
    double_pos: float = 0.5
    double_neg: float = 0.5
    triplet: float = 1.0

    def __post_init__(self):
        for name in ("contrastive", "double_pos", "double_neg", "triplet"):
            if not getattr(self, name) > 0:
                raise ValueError(f"margin {name} must be > 0, got {getattr(self, name)}")


# -- pairwise and tuple losses ------------------------------------------------------

def _diff_and_dist(x1, x2):
    diff = np.asarray(x1, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return diff, float(np.sqrt(diff @ diff))


def contrastive_sm(x1, x2, y, margin=1.0):
    """Single-margin contrastive loss ``y d^2 + (1-y) max(0, m-d)^2``."""
    diff, d = _diff_and_dist(x1, x2)
    if y:
        g = 2.0 * diff
        return d * d, (g, -g)
    gap = margin - d
    if gap <= 0:
        return 0.0, (np.zeros_like(diff), np.zeros_like(diff))
    # at d == 0 the direction is undefined; take the zero subgradient
    g = -2.0 * gap * diff / d if d > 0 else np.zeros_like(diff)
    return gap * gap, (g, -g)


def contrastive_dm(x1, x2, y, m_pos=0.5, m_neg=0.5):
    """Double-margin contrastive loss ``y max(0, d-m1)^2 + (1-y) max(0, m2-d)^2``."""
    diff, d = _diff_and_dist(x1, x2)
    gap = (d - m_pos) if y else (m_neg - d)
    if gap <= 0 or d == 0:
        loss = gap * gap if gap > 0 else 0.0
        return loss, (np.zeros_like(diff), np.zeros_like(diff))
    sign = 1.0 if y else -1.0
    g = sign * 2.0 * gap * diff / d
    return gap * gap, (g, -g)


def triplet_loss(a, p, n, margin=1.0):
    """``max(0, |a-p|^2 - |a-n|^2 + margin)`` with gradients for a, p, n."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (a, p, n))
    dap, dan = a - p, a - n
    loss = dap @ dap - dan @ dan + margin
    if loss <= 0:
        z = np.zeros_like(a)
        return 0.0, (z, z.copy(), z.copy())
    return float(loss), (2.0 * (n - p), -2.0 * dap, 2.0 * dan)


def npair_loss(a, p, negatives):
    """Multi-class N-pair loss ``log(1 + sum_n exp(a.n - a.p))``.

    ``negatives`` is an (M, k) array. Returns ``(loss, (ga, gp, gneg))``.
    """
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    negs = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negs.shape[0] == 0 or negs.size == 0:
        raise ValueError("npair_loss needs at least one negative")
    x = negs @ a - a @ p
    top = max(0.0, float(x.max()))
    e0 = np.exp(-top)
    ex = np.exp(x - top)
    z = e0 + ex.sum()
    loss = top + np.log(z)
    w = ex / z
    ga = w @ negs - w.sum() * p
    gp = -w.sum() * a
    gneg = w[:, None] * a[None, :]
    return float(loss), (ga, gp, gneg)


# -- batch objectives -----------------------------------------------------------

def pair_batch_loss(emb, labels, kind="smcl", margins=MarginConfig()):
    """Mean contrastive loss over all unordered pairs in the batch."""
    labels = np.asarray(labels)
    grad = np.zeros_like(emb)
    total = 0.0
    pairs = list(combinations(range(len(emb)), 2))
    for i, j in pairs:
        y = labels[i] == labels[j]
        if kind == "smcl":
            loss, (gi, gj) = contrastive_sm(emb[i], emb[j], y, margins.contrastive)
        elif kind == "dmcl":
            loss, (gi, gj) = contrastive_dm(emb[i], emb[j], y, margins.double_pos,
                                            margins.double_neg)
        else:
            raise ValueError(f"unknown pair loss {kind!r}")
        total += loss
        grad[i] += gi
        grad[j] += gj
    n = max(len(pairs), 1)
    return total / n, grad / n


def triplet_batch_loss(emb, triplets, margin=1.0):
    grad = np.zeros_like(emb)
    if not triplets:
        return 0.0, grad
    total = 0.0
    for a, p, n in triplets:
        loss, (ga, gp, gn) = triplet_loss(emb[a], emb[p], emb[n], margin)
        total += loss
        grad[a] += ga
        grad[p] += gp
        grad[n] += gn
    return total / len(triplets), grad / len(triplets)


def npair_batch_loss(emb, tuples):
    grad = np.zeros_like(emb)
    if not tuples:
        return 0.0, grad
    total = 0.0
    for a, p, negs in tuples:
        negs = list(negs)
        loss, (ga, gp, gn) = npair_loss(emb[a], emb[p], emb[negs])
        total += loss
        grad[a] += ga
        grad[p] += gp
        np.add.at(grad, negs, gn)
    return total / len(tuples), grad / len(tuples)


# -- miners ---------------------------------------------------------------------

def sq_distances(emb):
    emb = np.asarray(emb, dtype=np.float64)
    diff = emb[:, None, :] - emb[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _positive_pairs(labels):
    labels = np.asarray(labels)
    return [(a, p) for a in range(len(labels)) for p in range(len(labels))
            if a != p and labels[a] == labels[p]]


def mine_offline_triplets(labels, seed, count):
    """``count`` uniformly drawn valid triplets of sample indices.

    The anchor is uniform over samples whose class has at least two members,
    the positive uniform over the rest of its class and the negative uniform
    over all other samples.
    """
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < 2]
    if small.size:
        log.warning("classes %s have fewer than 2 samples; not used as anchors", small.tolist())
    if len(classes) < 2:
        raise ValueError("offline triplet mining needs at least two classes")
    order = np.argsort(labels, kind="stable")
    start = dict(zip(classes.tolist(), np.searchsorted(labels[order], classes).tolist()))
    size = dict(zip(classes.tolist(), counts.tolist()))
    rank = np.empty(len(labels), dtype=int)
    rank[order] = np.arange(len(labels))

    eligible = np.flatnonzero(np.isin(labels, classes[counts >= 2]))
    if eligible.size == 0:
        raise ValueError("no class has two samples; no triplet can be formed")
    rng = np.random.default_rng(seed)
    anchors = eligible[rng.integers(0, eligible.size, size=count)]
    a_cls = labels[anchors]
    a_start = np.array([start[c] for c in a_cls.tolist()], dtype=int)
    a_size = np.array([size[c] for c in a_cls.tolist()], dtype=int)
    offset = rng.integers(1, a_size)
    pos = order[a_start + (rank[anchors] - a_start + offset) % a_size]
    r = rng.integers(0, len(labels) - a_size)
    neg = order[np.where(r < a_start, r, r + a_size)]
    return [Triplet(int(a), int(p), int(n)) for a, p, n in zip(anchors, pos, neg)]


def mine_online(emb, labels, strategy, margin=1.0, rng=None):
    """Pick one negative per (anchor, positive) pair in the batch.

    ``random_negative``: uniform among negatives with positive loss; pairs
    with none are dropped. ``semi_hard``: uniform among negatives with
    ``d_ap^2 < d_an^2 < d_ap^2 + margin``, falling back to the hardest.
    ``hardest``: the closest negative (lowest index on ties).
    """
    if strategy not in ONLINE_STRATEGIES:
        raise ValueError(f"unknown online mining strategy {strategy!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    labels = np.asarray(labels)
    pairs = _positive_pairs(labels)
    if not pairs or len(np.unique(labels)) < 2:
        log.warning("batch has no usable (anchor, positive, negative) combination")
        return []
    d2 = sq_distances(emb)
    out = []
    for a, p in pairs:
        negs = np.flatnonzero(labels != labels[a])
        dan = d2[a, negs]
        dap = d2[a, p]
        if strategy == "hardest":
            pick = negs[np.argmin(dan)]
        elif strategy == "random_negative":
            cand = negs[dap - dan + margin > 0]
            if cand.size == 0:
                continue
            pick = cand[rng.integers(cand.size)]
        else:
            cand = negs[(dan > dap) & (dan < dap + margin)]
            pick = cand[rng.integers(cand.size)] if cand.size else negs[np.argmin(dan)]
        out.append(Triplet(a, p, int(pick)))
    return out


def is_semi_hard(emb, t, margin):
    d2 = sq_distances(emb)
    return d2[t.anchor, t.positive] < d2[t.anchor, t.negative] < d2[t.anchor, t.positive] + margin


def mine_npair(emb, labels, mode):
    """N-pair tuples: every ordered positive pair with its negatives.

    ``all_positive_pairs`` uses every other-class batch member as a negative;
    ``hard_negative_pairs`` keeps only the member of each negative class with
    the highest similarity to the anchor.
    """
    if mode not in NPAIR_MODES:
        raise ValueError(f"unknown N-pair mining mode {mode!r}")
    labels = np.asarray(labels)
    pairs = _positive_pairs(labels)
    if not pairs or len(np.unique(labels)) < 2:
        log.warning("batch has no usable N-pair tuple")
        return []
    emb = np.asarray(emb, dtype=np.float64)
    sim = emb @ emb.T
    out = []
    for a, p in pairs:
        if mode == "all_positive_pairs":
            negs = np.flatnonzero(labels != labels[a])
        else:
            negs = []
            for c in np.unique(labels):
                if c == labels[a]:
                    continue
                members = np.flatnonzero(labels == c)
                negs.append(members[np.argmax(sim[a, members])])
        out.append(NPairTuple(a, p, tuple(int(n) for n in negs)))
    return out


def sample_pk_batch(labels, rng, p=2, k=2):
    """Indices of ``p`` random classes with ``k`` random samples each."""
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    usable = classes[counts >= k]
    if usable.size < p:
        raise ValueError(f"need {p} classes with >= {k} samples, have {usable.size}")
    chosen = rng.choice(usable, size=p, replace=False)
    idx = []
    for c in chosen:
        members = np.flatnonzero(labels == c)
        idx.extend(rng.choice(members, size=k, replace=False).tolist())
    return np.array(idx)
