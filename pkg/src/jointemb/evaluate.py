"""Joint identification (CMC) and joint verification (ROC) protocols.

A match is correct only when subject *and* sensor agree. Distances are
standardized Euclidean (each dimension divided by its standard deviation
over the evaluated embeddings) or cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging

import numpy as np

log = logging.getLogger(__name__)

STD_FLOOR = 1e-12
IMPOSTOR_CASES = ("same_subject_diff_sensor", "diff_subject_same_sensor", "diff_both")


class EvalError(ValueError):
    pass


@dataclass
class EmbeddingSet:
    values: np.ndarray  # (n, k)
    subject_ids: list
    sensor_ids: list
    sample_ids: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        n = len(self.values)
        if not (len(self.subject_ids) == len(self.sensor_ids) == len(self.sample_ids) == n):
            raise EvalError("embedding values and label lists differ in length")

    @property
    def k(self):
        return self.values.shape[1]

    def __len__(self):
        return len(self.values)

    def class_indices(self):
        """Dense joint class index per embedding, sorted (subject, sensor) order."""
        pairs = list(zip(self.subject_ids, self.sensor_ids))
        index = {p: i for i, p in enumerate(sorted(set(pairs)))}
        return np.array([index[p] for p in pairs], dtype=int)

    def subset(self, idx):
        idx = list(idx)
        return EmbeddingSet(self.values[idx], [self.subject_ids[i] for i in idx],
                            [self.sensor_ids[i] for i in idx],
                            [self.sample_ids[i] for i in idx], dict(self.provenance))


def write_embeddings(es, path):
    """JSON-lines store, one record per sample."""
    with open(path, "w") as fh:
        for i in range(len(es)):
            rec = {"sample_id": es.sample_ids[i], "subject_id": es.subject_ids[i],
                   "sensor_id": es.sensor_ids[i], "k": es.k,
                   "values": [float(v) for v in es.values[i]]}
            fh.write(json.dumps(rec) + "\n")


def read_embeddings(path):
    recs = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    recs.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise EvalError(f"{path}:{n}: bad JSON line") from exc
    if not recs:
        raise EvalError(f"{path}: no embeddings")
    ks = {r["k"] for r in recs}
    if len(ks) != 1 or any(len(r["values"]) != r["k"] for r in recs):
        raise EvalError(f"{path}: inconsistent embedding dimension")
    digest = hashlib.sha256(open(path, "rb").read()).hexdigest()
    return EmbeddingSet(np.array([r["values"] for r in recs]),
                        [r["subject_id"] for r in recs], [r["sensor_id"] for r in recs],
                        [r["sample_id"] for r in recs], {"embeddings_sha256": digest})


# -- metrics ----------------------------------------------------------------------

def standardized_euclidean(probe, gallery, scale=None):
    """Pairwise ``sqrt(sum_j (x_j - y_j)^2 / s_j^2)``.

    ``s_j`` defaults to the population standard deviation of dimension j over
    probe and gallery together, floored at 1e-12.
    """
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if probe.size == 0 or gallery.size == 0:
        raise EvalError("standardized_euclidean needs nonempty probe and gallery sets")
    if probe.shape[1] != gallery.shape[1]:
        raise EvalError(f"dimension mismatch: {probe.shape[1]} vs {gallery.shape[1]}")
    if scale is None:
        scale = np.vstack([probe, gallery]).std(axis=0)
    scale = np.maximum(np.asarray(scale, dtype=np.float64), STD_FLOOR)
    p, g = probe / scale, gallery / scale
    d2 = (p * p).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * p @ g.T
    return np.sqrt(np.maximum(d2, 0.0))


def cosine_matrix(probe, gallery):
    probe = np.atleast_2d(np.asarray(probe, dtype=np.float64))
    gallery = np.atleast_2d(np.asarray(gallery, dtype=np.float64))
    if probe.size == 0 or gallery.size == 0:
        raise EvalError("cosine_matrix needs nonempty probe and gallery sets")
    pn = np.linalg.norm(probe, axis=1)
    gn = np.linalg.norm(gallery, axis=1)
    bad = [f"probe {i}" for i in np.flatnonzero(pn == 0)]
    bad += [f"gallery {i}" for i in np.flatnonzero(gn == 0)]
    if bad:
        raise EvalError(f"cosine undefined for zero vectors: {', '.join(bad)}")
    return np.clip((probe / pn[:, None]) @ (gallery / gn[:, None]).T, -1.0, 1.0)


def score_matrix(probe, gallery, metric):
    """``(scores, higher_is_better)`` for the named metric."""
    if metric == "seuclidean":
        return standardized_euclidean(probe, gallery), False
    if metric == "cosine":
        return cosine_matrix(probe, gallery), True
    raise EvalError(f"unknown metric {metric!r}")


# -- identification ---------------------------------------------------------------

@dataclass
class CmcReport:
    ranks: list
    rates: list
    metric: str
    gallery_rule: str
    n_probes: int
    n_classes: int
    excluded_classes: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def rate(self, r):
        return self.rates[r - 1]

    def to_dict(self):
        return asdict(self)


def true_class_ranks(scores, true_cols, higher_is_better):
    """1-based rank of each probe's true gallery column; ties favour lower columns."""
    s = scores if higher_is_better else -scores
    rows = np.arange(len(s))
    t = s[rows, true_cols][:, None]
    cols = np.arange(s.shape[1])[None, :]
    better = (s > t) | ((s == t) & (cols < np.asarray(true_cols)[:, None]))
    return better.sum(axis=1) + 1


def joint_identification(es, metric="seuclidean", max_rank=3, gallery_rule="first", seed=None):
    """CMC at ranks 1..max_rank with a one-per-class gallery.

    ``gallery_rule="first"`` takes each class's smallest sample id;
    ``"random"`` draws one per class with ``seed``. Every other embedding of
    the class is a probe. Classes with a single embedding are dropped.
    """
    labels = es.class_indices()
    pairs = sorted(set(zip(es.subject_ids, es.sensor_ids)))
    rng = np.random.default_rng(seed) if gallery_rule == "random" else None
    gallery_idx, probe_idx, excluded = [], [], []
    for c, pair in enumerate(pairs):
        members = sorted(np.flatnonzero(labels == c).tolist(), key=lambda i: es.sample_ids[i])
        if len(members) < 2:
            excluded.append(list(pair))
            continue
        if gallery_rule == "first":
            g = members[0]
        elif gallery_rule == "random":
            g = members[int(rng.integers(len(members)))]
        else:
            raise EvalError(f"unknown gallery rule {gallery_rule!r}")
        gallery_idx.append(g)
        probe_idx.extend(i for i in members if i != g)
    if excluded:
        log.warning("excluded %d single-embedding classes from identification", len(excluded))
    if not gallery_idx:
        raise EvalError("no class has both a gallery and a probe embedding")
    col_of = {labels[g]: j for j, g in enumerate(gallery_idx)}
    true_cols = np.array([col_of[labels[i]] for i in probe_idx])
    scores, hib = score_matrix(es.values[probe_idx], es.values[gallery_idx], metric)
    ranks = true_class_ranks(scores, true_cols, hib)
    n_cols = len(gallery_idx)
    rates = [float(np.mean(ranks <= r)) for r in range(1, max_rank + 1)]
    return CmcReport(list(range(1, max_rank + 1)), rates, metric, gallery_rule,
                     len(probe_idx), n_cols, excluded, dict(es.provenance))


# -- verification -----------------------------------------------------------------

@dataclass
class RocReport:
    fmr: list
    tmr: list
    thresholds: list
    metric: str
    n_genuine: int
    n_impostor: int
    tmr_at_1: float
    tmr_at_5: float
    provenance: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def pair_scores(es, metric):
    """Scores of all unordered pairs ``i < j`` plus their pair kinds.

    Returns ``(scores, higher_is_better, same_subject, same_sensor)``.
    """
    n = len(es)
    if n < 2:
        raise EvalError("verification needs at least two embeddings")
    iu, ju = np.triu_indices(n, k=1)
    full, hib = score_matrix(es.values, es.values, metric)
    subj = np.asarray(es.subject_ids)
    sens = np.asarray(es.sensor_ids)
    return full[iu, ju], hib, subj[iu] == subj[ju], sens[iu] == sens[ju]


def roc_points(genuine, impostor):
    """Operating points for "accept if score >= t", t swept over observed scores.

    Returns ``(fmr, tmr, thresholds)`` starting from the (0, 0) corner at
    t = +inf; both rates are nondecreasing along the sweep.
    """
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    thr = np.unique(np.concatenate([genuine, impostor]))[::-1]
    tmr = (len(genuine) - np.searchsorted(genuine, thr, side="left")) / len(genuine)
    fmr = (len(impostor) - np.searchsorted(impostor, thr, side="left")) / len(impostor)
    return (np.concatenate([[0.0], fmr]), np.concatenate([[0.0], tmr]),
            np.concatenate([[np.inf], thr]))


def tmr_at_fmr(fmr, tmr, target):
    """TMR at ``target`` FMR by linear interpolation between operating points."""
    fmr = np.asarray(fmr)
    tmr = np.asarray(tmr)
    i = int(np.searchsorted(fmr, target, side="right")) - 1
    if fmr[i] == target or i == len(fmr) - 1:
        return float(tmr[i])
    f0, f1 = fmr[i], fmr[i + 1]
    return float(tmr[i] + (tmr[i + 1] - tmr[i]) * (target - f0) / (f1 - f0))


def joint_verification(es, metric="seuclidean"):
    """ROC over all unordered test pairs; genuine iff same subject and sensor."""
    scores, hib, same_sub, same_sen = pair_scores(es, metric)
    genuine = same_sub & same_sen
    if not genuine.any():
        raise EvalError("no genuine pairs: every joint class has a single embedding")
    if genuine.all():
        raise EvalError("no impostor pairs: only one joint class present")
    s = scores if hib else -scores
    fmr, tmr, thr = roc_points(s[genuine], s[~genuine])
    if not hib:
        thr = -thr
    return RocReport(fmr.tolist(), tmr.tolist(), [float(t) for t in thr], metric,
                     int(genuine.sum()), int((~genuine).sum()),
                     tmr_at_fmr(fmr, tmr, 0.01), tmr_at_fmr(fmr, tmr, 0.05),
                     dict(es.provenance))


def impostor_breakdown(es, metric, threshold):
    """False-match rate per impostor category at ``threshold``.

    A pair is declared a match when its distance is <= threshold (or its
    similarity >= threshold). Categories with no pairs map to None.
    """
    scores, hib, same_sub, same_sen = pair_scores(es, metric)
    accepted = scores >= threshold if hib else scores <= threshold
    cases = {
        "same_subject_diff_sensor": same_sub & ~same_sen,
        "diff_subject_same_sensor": ~same_sub & same_sen,
        "diff_both": ~same_sub & ~same_sen,
    }
    out = {}
    for name, mask in cases.items():
        n = int(mask.sum())
        out[name] = {"pairs": n, "false_matches": int((accepted & mask).sum()),
                     "fmr": float(accepted[mask].mean()) if n else None}
    return out


# -- dimensionality sweep -----------------------------------------------------------

def sweep_dimension(images, subject_ids, sensor_ids, sample_ids, cfg, dims=(4, 8, 16, 32),
                    val_fraction=0.3, log_dir=None):
    """Train one model per embedding size and score it on held-out validation data.

    The inputs are the training split. Each class is split again (70:30 rule,
    seeded by ``cfg.seed``) into a fitting part and a validation part. Returns
    one row per k with TMR@5%FMR as the summary accuracy, plus the selected k.
    """
    from dataclasses import replace
    from . import data as D
    from . import embedder as E
    from .train import train

    samples = [D.ImageSample(sid, s, c) for sid, s, c in zip(sample_ids, subject_ids, sensor_ids)]
    D.split_70_30(samples, cfg.seed)
    fit = [i for i, s in enumerate(samples) if s.split == "train"]
    val = [i for i, s in enumerate(samples) if s.split == "test"]
    images = np.asarray(images)
    labels = np.array([s.class_index for s in samples])
    n_classes = int(labels.max()) + 1
    rows = []
    for k in dims:
        run = replace(cfg, k=int(k))
        lp = None if log_dir is None else f"{log_dir}/sweep_k{k}.log.jsonl"
        params = train(images[fit], labels[fit], run, n_classes=n_classes, log_path=lp).params
        emb = E.embed_batch(images[val], params)
        es = EmbeddingSet(emb, [subject_ids[i] for i in val], [sensor_ids[i] for i in val],
                          [sample_ids[i] for i in val])
        roc = joint_verification(es, cfg.metric)
        cmc = joint_identification(es, cfg.metric)
        rows.append({"k": int(k), "tmr_at_5": roc.tmr_at_5, "tmr_at_1": roc.tmr_at_1,
                     "rank1": cmc.rates[0], "n_val": len(val)})
    best = max(rows, key=lambda r: (r["tmr_at_5"], -r["k"]))
    return {"rows": rows, "selected_k": best["k"], "accuracy_measure": "tmr_at_5",
            "metric": cfg.metric}
