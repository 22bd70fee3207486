"""Downstream evaluation: a deterministic linear probe plus classification,
regression and ranking metrics.

The probe standardizes its inputs, then minimizes a logistic or
least-squares objective (L2 penalty 1e-4 on the weights, not the bias) with
Adam running on the autodiff core, so probe quality reflects only the
representation it is fed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CaseError, LabelError, SchemaMismatch
from .pretrain import TrainConfig, adam_step

PROBE_L2 = 1e-4
PROBE_STEPS = 600
PROBE_LR = 0.05


@dataclass
class LinearProbe:
    task: str                # binary | regression
    w: np.ndarray            # weights in standardized feature space
    b: float
    feat_mean: np.ndarray
    feat_std: np.ndarray

    def scores(self, features):
        x = (np.asarray(features, dtype=np.float64) - self.feat_mean) / self.feat_std
        return x @ self.w + self.b

    def coefficients(self):
        """Slope/intercept in the original (unstandardized) feature units."""
        coef = self.w / self.feat_std
        intercept = self.b - float((self.w * self.feat_mean / self.feat_std).sum())
        return coef, intercept


class _ProbeParams:
    """Minimal parameter holder compatible with adam_step."""

    def __init__(self, params):
        self.params = params

    def items(self):
        return self.params.items()


def train_linear_probe(features, labels, task, seed=0):
    """Fit the probe by full-batch Adam on the autodiff graph."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise LabelError(f"features {x.shape} and labels {y.shape} are misaligned")
    if len(x) < 2:
        raise LabelError("probe needs at least 2 examples")
    if task not in ("binary", "regression"):
        raise LabelError(f"unknown probe task {task!r}")
    if task == "binary":
        classes = np.unique(y)
        if not np.isin(classes, (0.0, 1.0)).all() or len(classes) < 2:
            raise LabelError("binary probe requires labels {0,1} with both classes present")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    xs = (x - mean) / std

    n, d = xs.shape
    w = Tensor(np.zeros((d, 1)), dtype="f64", requires_grad=True)
    b = Tensor(np.zeros(1), dtype="f64", requires_grad=True)
    params = _ProbeParams({"w": w, "b": b})
    moments = {k: (np.zeros_like(p.data), np.zeros_like(p.data)) for k, p in params.items()}
    opt = TrainConfig(lr=PROBE_LR, epochs=1, seed=seed, batch_size=max(2, n))
    xt = Tensor(xs)
    yt = y.reshape(-1, 1)

    for step in range(1, PROBE_STEPS + 1):
        z = ad.add(ad.matmul(xt, w), b)
        if task == "binary":
            # logistic loss as 2-class cross-entropy on logits [0, z]
            logits = ad.concat([ad.mul(z, 0.0), z], axis=1)
            lsm = ad.log_softmax(logits, axis=1)
            onehot = np.column_stack([1.0 - yt[:, 0], yt[:, 0]])
            data_loss = ad.mul(ad.sum_(ad.mul(lsm, Tensor(onehot))), -1.0 / n)
        else:
            diff = ad.sub(z, Tensor(yt))
            data_loss = ad.mul(ad.sum_(ad.mul(diff, diff)), 1.0 / n)
        penalty = ad.mul(ad.sum_(ad.mul(w, w)), PROBE_L2)
        loss = ad.add(data_loss, penalty)
        w.grad = None
        b.grad = None
        ad.backward(loss)
        adam_step(params, {"w": w.grad, "b": b.grad}, moments, opt, step)

    return LinearProbe(task=task, w=w.data[:, 0].copy(), b=float(b.data[0]),
                       feat_mean=mean, feat_std=std)


def auroc(scores, labels):
    """Mann-Whitney AUROC: P(score_pos > score_neg), ties counted 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise LabelError("auroc requires both classes present")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):  # average ranks over tie groups
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def f1_positive(scores, labels, threshold=0.5):
    """F1 of class 1 at a score threshold; empty denominators give 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores >= threshold
    tp = int((pred & (labels == 1)).sum())
    fp = int((pred & (labels == 0)).sum())
    fn = int((~pred & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rmse(preds, targets):
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise LabelError(f"rmse: shapes {preds.shape} and {targets.shape} differ")
    return float(np.sqrt(((preds - targets) ** 2).mean()))


@dataclass
class RankingCase:
    ranked_items: list[str]   # descending score order
    relevant: set[str]


def _average_precision(flags):
    hits = 0
    total = 0.0
    for i, rel in enumerate(flags, start=1):
        if rel:
            hits += 1
            total += hits / i
    return total / hits if hits else 0.0


def _dcg(flags, k):
    return sum(rel / np.log2(i + 1) for i, rel in enumerate(flags[:k], start=1))


def ranking_metrics(cases):
    """MAP over the full ranking, Prec@1, Success@5 (count and hit-rate
    readings) and binary-gain NDCG@3, each averaged across cases."""
    if not cases:
        raise CaseError("ranking_metrics needs at least one case")
    ap, p1, s5_count, s5_hit, ndcg3 = [], [], [], [], []
    for case in cases:
        if not case.relevant:
            raise CaseError("ranking case with empty relevant set")
        flags = [1.0 if item in case.relevant else 0.0 for item in case.ranked_items]
        ap.append(_average_precision(flags))
        p1.append(flags[0] if flags else 0.0)
        top5 = sum(flags[:5])
        s5_count.append(top5)
        s5_hit.append(1.0 if top5 > 0 else 0.0)
        ideal = _dcg([1.0] * min(3, len(case.relevant)), 3)
        ndcg3.append(_dcg(flags, 3) / ideal if ideal else 0.0)
    return {
        "map": float(np.mean(ap)),
        "prec_at_1": float(np.mean(p1)),
        "success5_count": float(np.mean(s5_count)),
        "success5_hit": float(np.mean(s5_hit)),
        "ndcg_at_3": float(np.mean(ndcg3)),
    }


def fit_item_projection(item_vectors, entity_vectors):
    """Least-squares map from item space to entity space over aligned pairs."""
    items = np.asarray(item_vectors, dtype=np.float64)
    entities = np.asarray(entity_vectors, dtype=np.float64)
    if len(items) != len(entities):
        raise SchemaMismatch("projection fit needs aligned (item, entity) pairs")
    proj, *_ = np.linalg.lstsq(items, entities, rcond=None)
    return proj


def rank_items(entity_vectors, item_ids, item_vectors, relevant_by_entity, projection=None):
    """Dot-product ranking of items per entity; ties break by item id.

    entity_vectors: dict entity -> vector. Items whose vectors are narrower
    or wider than the entity space need a fitted projection.
    """
    items = np.asarray(item_vectors, dtype=np.float64)
    sample = next(iter(entity_vectors.values()))
    if items.shape[1] != len(sample):
        if projection is None:
            raise SchemaMismatch(
                f"item width {items.shape[1]} != entity width {len(sample)} and no projection fitted")
        items = items @ projection
        if items.shape[1] != len(sample):
            raise SchemaMismatch("projection output width does not match entity vectors")
    cases = []
    for entity in sorted(relevant_by_entity):
        if entity not in entity_vectors:
            raise SchemaMismatch(f"no embedding for entity {entity!r}")
        scores = items @ np.asarray(entity_vectors[entity], dtype=np.float64)
        order = sorted(range(len(item_ids)), key=lambda i: (-scores[i], item_ids[i]))
        cases.append(RankingCase(ranked_items=[item_ids[i] for i in order],
                                 relevant=set(relevant_by_entity[entity])))
    return cases


def write_report_csv(report, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in report.items():
            writer.writerow([name, repr(float(value))])


def format_report(report):
    width = max(len(k) for k in report)
    lines = [f"{name.ljust(width)}  {value:.6f}" for name, value in report.items()]
    return "\n".join(lines)
