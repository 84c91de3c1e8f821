"""Objective, training loop, data splits, metrics and ablations."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .faat import AttentionTrace, EdgePlan, forward, init_params
from .graph import UNLABELED, FeatureSet, HeteroGraph
from .homoaug import KNN_RELATION, MlpConfig, homo_aug, random_edges

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_aug", "random_edges", "no_freq_adaptive", "mean_pooling", "no_wegl")


@dataclass
class SplitSet:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        for name in ("train", "val", "test"):
            setattr(self, name, np.sort(np.asarray(getattr(self, name), dtype=np.int64)))
        union = np.concatenate([self.train, self.val, self.test])
        if len(np.unique(union)) != len(union):
            raise ValueError("splits overlap")


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    balanced_accuracy: float
    confusion: tuple  # (tp, fp, fn, tn), bot = positive

    def as_dict(self) -> dict:
        tp, fp, fn, tn = self.confusion
        return {"accuracy": self.accuracy, "f1": self.f1,
                "balanced_accuracy": self.balanced_accuracy,
                "confusion": {"tp": tp, "fp": fp, "fn": fn, "tn": tn}}


class TrainResult(NamedTuple):
    params: dict
    metrics: MetricsReport
    trace: AttentionTrace
    epochs_ran: int
    best_epoch: int
    val_accuracy: float


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def training_pairs(plan: EdgePlan, labels, train_set):
    """Indices into ``plan.pairs`` with both endpoints in the training set, and their ±1 targets."""
    labels = np.asarray(labels)
    in_train = np.zeros(plan.num_nodes, dtype=bool)
    in_train[np.asarray(train_set, dtype=np.int64)] = True
    pairs = plan.pairs
    idx = np.flatnonzero(in_train[pairs[:, 0]] & in_train[pairs[:, 1]])
    y = np.where(labels[pairs[idx, 0]] == labels[pairs[idx, 1]], 1.0, -1.0)
    return idx, y


def weight_guidance_loss(trace: AttentionTrace, labels, train_set) -> nc.Tensor:
    """Hinge ``mean(max(0, 1 - alpha_bar * y_uv))`` over training edges."""
    idx, y = training_pairs(trace.plan, labels, train_set)
    if idx.size == 0:
        warnings.warn("no edge has both endpoints in the training set; weight guidance loss is 0")
        return nc.Tensor(0.0)
    margin = nc.add(1.0, nc.neg(nc.mul(nc.gather(trace.alpha_bar, idx), y)))
    return nc.mean(nc.relu(margin))


def total_loss(logits: nc.Tensor, labels, train_set, params: dict, trace: AttentionTrace,
               cfg: TrainConfig) -> nc.Tensor:
    loss = nc.cross_entropy_logits(logits, labels, np.asarray(train_set, dtype=np.int64))
    if cfg.lambda1:
        loss = nc.add(loss, nc.mul(nc.sum_squares(params.values()), cfg.lambda1))
    if cfg.lambda2:
        loss = nc.add(loss, nc.mul(weight_guidance_loss(trace, labels, train_set), cfg.lambda2))
    return loss


# ---------------------------------------------------------------------------
# splits / metrics
# ---------------------------------------------------------------------------

def make_splits(labels, ratios=(0.1, 0.1, 0.8), seed: int = 0) -> SplitSet:
    """Class-stratified random train/val/test split of the labeled nodes."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    labels = np.asarray(labels)
    classes = np.unique(labels[labels != UNLABELED])
    if classes.size == 0:
        raise ValueError("no labeled nodes to split")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in classes:
        members = rng.permutation(np.flatnonzero(labels == c))
        n = len(members)
        n_train = min(n, int(np.ceil(ratios[0] * n - 1e-9)))
        n_val = min(n - n_train, int(round(ratios[1] * n)))
        train.append(members[:n_train])
        val.append(members[n_train:n_train + n_val])
        test.append(members[n_train + n_val:])
    return SplitSet(np.concatenate(train), np.concatenate(val), np.concatenate(test))


def metrics_from_confusion(tp: int, fp: int, fn: int, tn: int) -> MetricsReport:
    total = tp + fp + fn + tn
    if total == 0:
        raise ValueError("empty node set")
    acc = (tp + tn) / total
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    recalls = []
    if tp + fn:
        recalls.append(tp / (tp + fn))
    if tn + fp:
        recalls.append(tn / (tn + fp))
    return MetricsReport(acc, f1, float(np.mean(recalls)), (tp, fp, fn, tn))


def evaluate(logits, labels, node_set) -> MetricsReport:
    logits = logits.data if isinstance(logits, nc.Tensor) else np.asarray(logits)
    nodes = np.asarray(node_set, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("empty node set")
    y = np.asarray(labels)[nodes]
    if np.any(y == UNLABELED):
        raise ValueError("evaluation nodes must be labeled")
    pred = np.argmax(logits[nodes], axis=1)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    return metrics_from_confusion(tp, fp, fn, tn)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_model(graph: HeteroGraph, features, labels, splits: SplitSet,
                cfg: TrainConfig, callback=None) -> TrainResult:
    """Full-batch Adam on the combined objective with early stopping on validation accuracy.

    Ties in validation accuracy are broken by lower validation cross-entropy.
    The best-validation parameters are restored before test evaluation.
    ``callback(epoch, train_trace, eval_trace)`` is invoked after every epoch.
    """
    x = features.fused() if isinstance(features, FeatureSet) else np.asarray(features, float)
    labels = np.asarray(labels)
    params = init_params(cfg, x.shape[1], graph.relations, cfg.seed)
    plan = EdgePlan(graph)
    opt = nc.Adam(params.values(), lr=cfg.lr)
    drop_rng = np.random.default_rng([cfg.seed, 1])
    watch = splits.val if splits.val.size else splits.train

    best = (-1.0, np.inf)
    best_state, best_epoch, stale, epoch = None, -1, 0, -1
    for epoch in range(cfg.max_epochs):
        opt.zero_grad()
        logits, trace = forward(graph, x, params, cfg, "train", drop_rng, plan)
        loss = total_loss(logits, labels, splits.train, params, trace, cfg)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")
        loss.backward()
        opt.step()

        logits, eval_trace = forward(graph, x, params, cfg, "eval", plan=plan)
        if callback is not None:
            callback(epoch, trace, eval_trace)
        val_acc = evaluate(logits, labels, watch).accuracy
        val_ce = nc.cross_entropy_logits(logits, labels, watch).item()
        if val_acc > best[0] or (val_acc == best[0] and val_ce < best[1]):
            best, best_epoch, stale = (val_acc, val_ce), epoch, 0
            best_state = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    log.debug("stopped after %d epochs, best epoch %d (val acc %.4f)", epoch + 1, best_epoch, best[0])

    for k, p in params.items():
        p.data = best_state[k]
        p.zero_grad()
    logits, trace = forward(graph, x, params, cfg, "eval", plan=plan)
    test_nodes = splits.test if splits.test.size else watch
    return TrainResult(params, evaluate(logits, labels, test_nodes), trace, epoch + 1,
                       best_epoch, best[0])


def mlp_config(cfg: TrainConfig) -> MlpConfig:
    return MlpConfig(hidden=cfg.hidden, lr=cfg.mlp_lr, max_epochs=cfg.mlp_epochs,
                     patience=cfg.mlp_patience, slope=cfg.slope, seed=cfg.seed)


def prepare_graph(graph: HeteroGraph, features, labels, splits: SplitSet, cfg: TrainConfig,
                  variant: str = "full") -> HeteroGraph:
    """Apply the augmentation stage the given variant calls for."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if KNN_RELATION in graph.relations:
        # already augmented upstream (e.g. by the ``augment`` command)
        base = graph.without_relation(KNN_RELATION)
        n_knn = len(graph.edges[KNN_RELATION])
        aug = graph
    else:
        base, aug, n_knn = graph, None, 0
    if variant == "no_aug":
        return base
    if aug is None:
        aug, knn, _ = homo_aug(base, features, labels, splits.train, cfg.k, mlp_config(cfg),
                               val_mask=splits.val)
        n_knn = len(knn.pairs())
    if variant == "random_edges":
        return random_edges(base, n_knn, seed=cfg.seed)
    return aug


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant == "no_freq_adaptive":
        return cfg.replace(attention="sigmoid")
    if variant == "mean_pooling":
        return cfg.replace(attention="constant")
    if variant == "no_wegl":
        return cfg.replace(lambda2=0.0)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return cfg


def ablation_run(variant: str, graph: HeteroGraph, features, labels, splits: SplitSet,
                 cfg: TrainConfig, callback=None) -> TrainResult:
    aug = prepare_graph(graph, features, labels, splits, cfg, variant)
    return train_model(aug, features, labels, splits, variant_config(cfg, variant), callback)
