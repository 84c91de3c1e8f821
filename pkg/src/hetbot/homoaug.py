"""Homophily-oriented augmentation.

A two-layer MLP is fit on node features alone, its first-layer projections
``W1 x`` serve as representations, and a cosine k-NN graph over them is
injected into the heterogeneous graph as its own relation.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .graph import FeatureSet, HeteroGraph

log = logging.getLogger(__name__)

KNN_RELATION = "knn"
SIM_DECIMALS = 12


@dataclass
class MlpConfig:
    hidden: int = 128
    lr: float = 0.01
    max_epochs: int = 200
    patience: int = 20
    slope: float = 0.01
    seed: int = 0


@dataclass
class MlpModel:
    W1: nc.Parameter
    W2: nc.Parameter
    slope: float = 0.01
    constant_class: int | None = None

    def logits(self, x) -> nc.Tensor:
        h = nc.leaky_relu(nc.matmul(nc.as_tensor(x), self.W1), self.slope)
        return nc.matmul(h, self.W2)

    def predict(self, x) -> np.ndarray:
        if self.constant_class is not None:
            return np.full(len(x), self.constant_class, dtype=np.int64)
        return np.argmax(self.logits(x).data, axis=1)


@dataclass
class KnnResult:
    k: int
    neighbor_lists: np.ndarray  # N x k, most similar first
    injected_relation: str = KNN_RELATION

    def pairs(self) -> np.ndarray:
        """Symmetrized undirected edge set, rows ``(u, v)`` with ``u < v``."""
        n, k = self.neighbor_lists.shape
        if k == 0:
            return np.zeros((0, 2), dtype=np.int64)
        src = np.repeat(np.arange(n), k)
        dst = self.neighbor_lists.ravel()
        pairs = np.sort(np.stack([src, dst], axis=1), axis=1)
        return np.unique(pairs, axis=0)


def _as_matrix(features) -> np.ndarray:
    return features.fused() if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)


def train_mlp(features, labels, train_mask, cfg: MlpConfig | None = None,
              val_mask=None, num_classes: int = 2) -> MlpModel:
    """Fit ``softmax(leaky_relu(X W1) W2)`` with Adam and cross-entropy.

    Early stopping watches validation loss (training loss when no
    validation nodes are given) and restores the best weights.
    """
    cfg = cfg or MlpConfig()
    x = _as_matrix(features)
    labels = np.asarray(labels)
    train_idx = _indices(train_mask)
    if train_idx.size == 0:
        raise ValueError("no supervised nodes")
    rng = np.random.default_rng(cfg.seed)
    model = MlpModel(nc.glorot(rng, (x.shape[1], cfg.hidden), "mlp.W1"),
                     nc.glorot(rng, (cfg.hidden, num_classes), "mlp.W2"), cfg.slope)

    present = np.unique(labels[train_idx])
    if present.size == 1:
        warnings.warn(f"training nodes all have class {present[0]}; using a constant classifier")
        model.constant_class = int(present[0])
        return model

    val_idx = _indices(val_mask) if val_mask is not None else np.zeros(0, dtype=np.int64)
    watch = val_idx if val_idx.size else train_idx
    opt = nc.Adam([model.W1, model.W2], lr=cfg.lr)
    best_loss, best_state, stale = np.inf, None, 0
    xt = nc.Tensor(x)
    for epoch in range(cfg.max_epochs):
        opt.zero_grad()
        logits = model.logits(xt)
        nc.cross_entropy_logits(logits, labels, train_idx).backward()
        opt.step()
        watched = nc.cross_entropy_logits(model.logits(xt), labels, watch).item()
        if watched < best_loss - 1e-12:
            best_loss, stale = watched, 0
            best_state = (model.W1.data.copy(), model.W2.data.copy())
        else:
            stale += 1
            if stale >= cfg.patience:
                log.debug("mlp early stop at epoch %d", epoch)
                break
    if best_state is not None:
        model.W1.data, model.W2.data = best_state
    return model


def _indices(mask) -> np.ndarray:
    mask = np.asarray(mask)
    return np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)


def hidden_reps(model: MlpModel, features) -> np.ndarray:
    # pre-activation, no bias
    return _as_matrix(features) @ model.W1.data


def cosine_matrix(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    norms = np.linalg.norm(h, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = h / safe[:, None]
    sim = unit @ unit.T
    zero = norms == 0
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    return sim


def knn_graph(h: np.ndarray, k: int, relation: str = KNN_RELATION) -> KnnResult:
    """Exact cosine top-k per node, self excluded.

    Order is similarity descending, node id ascending on ties; similarities
    equal to 12 decimals count as ties so BLAS rounding cannot reorder them.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(h)
    if k > n - 1:
        warnings.warn(f"k={k} exceeds N-1={n - 1}; clamping")
        k = n - 1
    if k == 0:
        return KnnResult(0, np.zeros((n, 0), dtype=np.int64), relation)
    sim = np.round(cosine_matrix(h), SIM_DECIMALS)
    np.fill_diagonal(sim, -np.inf)
    # stable sort on -sim keeps ascending id among equal similarities
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    return KnnResult(k, order.astype(np.int64), relation)


def augment(g: HeteroGraph, knn: KnnResult) -> HeteroGraph:
    if knn.neighbor_lists.size and knn.neighbor_lists.max() >= g.num_nodes:
        raise ValueError("k-NN node id exceeds graph size")
    return g.with_relation(knn.injected_relation, knn.pairs())


def homo_aug(g: HeteroGraph, features, labels, train_mask, k: int = 1,
             cfg: MlpConfig | None = None, val_mask=None):
    """Full two-stage augmentation; returns ``(augmented_graph, knn, mlp)``."""
    mlp = train_mlp(features, labels, train_mask, cfg, val_mask=val_mask)
    knn = knn_graph(hidden_reps(mlp, features), k)
    return augment(g, knn), knn, mlp


def random_edges(g: HeteroGraph, count: int, seed: int, relation: str = "random") -> HeteroGraph:
    """Inject ``count`` uniformly random new pairs (the random-edge ablation)."""
    rng = np.random.default_rng(seed)
    existing = {tuple(p) for p in g.edges.get(relation, np.zeros((0, 2), int)).tolist()}
    chosen: list[tuple[int, int]] = []
    max_pairs = g.num_nodes * (g.num_nodes - 1) // 2
    count = min(count, max_pairs)
    while len(chosen) < count:
        u, v = (int(t) for t in rng.integers(0, g.num_nodes, size=2))
        if u == v:
            continue
        key = (min(u, v), max(u, v))
        if key in existing:
            continue
        existing.add(key)
        chosen.append(key)
    return g.with_relation(relation, chosen)
