"""Training loop for the three mutually exclusive modes.

classical  random batches, classifier head + cross-entropy over joint classes
siamese    P x K class-balanced batches, contrastive loss over all batch pairs
triplet    offline triplets fixed per epoch, or online / N-pair mining inside
           P x K batches
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
import math
import warnings

import numpy as np

from . import embedder as E
from . import kernels as K
from . import losses as L

log = logging.getLogger(__name__)

# sub-seed tags for the independent random streams of one run
_INIT, _HEAD, _BATCHES, _MINING = 11, 12, 13, 14

ONLINE = {"triplet-random": "random_negative", "triplet-semihard": "semi_hard",
          "triplet-hardest": "hardest"}
NPAIR = {"npair-all": "all_positive_pairs", "npair-hard": "hard_negative_pairs"}


@dataclass
class TrainResult:
    params: E.ModelParams
    history: list = field(default_factory=list)


def _batch_loss(cfg, emb, labels, rng, margins):
    if cfg.loss in ("smcl", "dmcl"):
        return L.pair_batch_loss(emb, labels, cfg.loss, margins)
    if cfg.loss in ONLINE:
        tr = L.mine_online(emb, labels, ONLINE[cfg.loss], margins.triplet, rng)
        return L.triplet_batch_loss(emb, tr, margins.triplet)
    if cfg.loss in NPAIR:
        return L.npair_batch_loss(emb, L.mine_npair(emb, labels, NPAIR[cfg.loss]))
    raise ValueError(f"no batch objective for loss {cfg.loss!r}")


def _check_finite(loss, grads):
    if not math.isfinite(loss):
        raise K.NonFiniteError(f"loss became {loss}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise K.NonFiniteError(f"non-finite gradient for {name!r}")


def train(images, labels, cfg, n_classes=None, log_path=None):
    """Train an embedder on ``images`` (N, 48, 48) with joint class ``labels``.

    Returns a :class:`TrainResult`; one history record per epoch is also
    appended to ``log_path`` as a JSON line when given.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(images)
    if n == 0:
        raise ValueError("training split is empty")
    margins = L.MarginConfig(cfg.margin, cfg.margin_pos, cfg.margin_neg, cfg.triplet_margin)
    sched = K.LrSchedule(cfg.lr, cfg.gamma, cfg.step_epochs)
    params = E.init_params(cfg.k, seed=[cfg.seed, _INIT])
    if cfg.mode == "classical":
        if n_classes is None:
            n_classes = int(labels.max()) + 1
        params.head = E.init_head(cfg.k, n_classes, seed=[cfg.seed, _HEAD])
    state = K.AdamState()
    batch_rng = np.random.default_rng([cfg.seed, _BATCHES])
    mine_rng = np.random.default_rng([cfg.seed, _MINING])
    steps = math.ceil(n / cfg.batch)
    if cfg.epochs == 0:
        warnings.warn("epochs=0: returning the initial parameters unchanged", stacklevel=2)

    history = []
    logf = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = sched.lr(epoch)
            if cfg.loss == "triplet-offline":
                epoch_steps = _offline_batches(labels, cfg, epoch)
            else:
                epoch_steps = range(steps)
            total, count = 0.0, 0
            for item in epoch_steps:
                if cfg.mode == "classical":
                    if item == 0:
                        perm = batch_rng.permutation(n)
                    idx = perm[item * cfg.batch:(item + 1) * cfg.batch]
                    loss, grads = _classical_step(params, images[idx], labels[idx])
                elif cfg.loss == "triplet-offline":
                    loss, grads = _offline_step(params, images, item, margins.triplet)
                else:
                    idx = L.sample_pk_batch(labels, batch_rng, p=cfg.batch // 2, k=2)
                    emb, cache = E.forward(params, images[idx])
                    loss, demb = _batch_loss(cfg, emb, labels[idx], mine_rng, margins)
                    grads = E.backward(params, cache, demb)
                _check_finite(loss, grads)
                K.adam_step(params.arrays(), grads, state, lr)
                total += loss
                count += 1
            rec = {"epoch": epoch, "lr": lr, "loss": total / max(count, 1), "steps": count,
                   "mode": cfg.mode, "objective": cfg.loss}
            history.append(rec)
            log.info("epoch %d lr %.1e loss %.5f", epoch, lr, rec["loss"])
            if logf:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
    finally:
        if logf:
            logf.close()
    return TrainResult(params, history)


def _classical_step(params, x, y):
    emb, cache = E.forward(params, x)
    logits = E.head_logits(params.head, emb)
    loss, dlogits = K.softmax_xent(logits, y)
    demb, hgrads = E.head_backward(params.head, emb, dlogits)
    grads = E.backward(params, cache, demb)
    grads.update(hgrads)
    return loss, grads


def _offline_batches(labels, cfg, epoch):
    # roughly one pass over the training images per epoch: n/3 triplets
    count = max(cfg.batch, len(labels) // 3)
    triplets = L.mine_offline_triplets(labels, [cfg.seed, _MINING, epoch], count)
    return [triplets[i:i + cfg.batch] for i in range(0, len(triplets), cfg.batch)]


def _offline_step(params, images, triplets, margin):
    flat = np.array([i for t in triplets for i in t])
    uniq, inv = np.unique(flat, return_inverse=True)
    emb, cache = E.forward(params, images[uniq])
    local = [L.Triplet(*inv[3 * j:3 * j + 3]) for j in range(len(triplets))]
    loss, demb = L.triplet_batch_loss(emb, local, margin)
    return loss, E.backward(params, cache, demb)
