"""Frequency-adaptive attention network.

Layer ``l`` computes, for every directed edge slot ``v -> u`` and head ``k``::

    q_u   = lrelu(x_u Wq)          k_v = lrelu(x_v Wk)        (per-head column blocks)
    a_hat = tanh(g_k . [q_u || k_v])
    a     = (1 - beta) a_hat + beta a_prev                    (a = a_hat in layer 1)
    z_u   = ||_k  sum_r sum_{v in N_r(u)} a / sqrt(d_ur d_vr) * x_v W_rk
    x_u   = lrelu(x_u Wres + z_u)        or   lrelu(eps x0_u + (1 - eps) z_u)

Per-head matrices are stored as column blocks of one ``D x D`` parameter,
so head ``k`` owns columns ``k*D/K:(k+1)*D/K``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .graph import FeatureSet, HeteroGraph


class EdgePlan:
    """Directed edge slots over the union of relations plus per-relation views.

    Undirected pair ``i = (a, b)`` (a < b) owns slots ``2i`` (b -> a, centre a)
    and ``2i + 1`` (a -> b, centre b).
    """

    def __init__(self, g: HeteroGraph):
        self.num_nodes = g.num_nodes
        self.pairs = g.merged_pairs()
        a, b = self.pairs[:, 0], self.pairs[:, 1]
        self.dst = np.stack([a, b], axis=1).ravel()
        self.src = np.stack([b, a], axis=1).ravel()
        key = self.pairs[:, 0] * g.num_nodes + self.pairs[:, 1]
        self.relations = {}
        for rel in relation_order(g):
            e = g.edges[rel]
            if len(e) == 0:
                continue
            idx = np.searchsorted(key, e[:, 0] * g.num_nodes + e[:, 1])
            slots = np.stack([2 * idx, 2 * idx + 1], axis=1).ravel()
            deg = g.degree[rel].astype(float)
            src, dst = self.src[slots], self.dst[slots]
            norm = 1.0 / np.sqrt(deg[src] * deg[dst])
            self.relations[rel] = (slots, src, dst, norm)

    @property
    def num_slots(self) -> int:
        return len(self.dst)


def relation_order(g: HeteroGraph) -> list[str]:
    # Summation order keyed on edge content, not names, so renaming or
    # reordering relations cannot change floating-point results.
    return sorted(g.relations, key=lambda r: (len(g.edges[r]), g.edges[r].tobytes(), r))


@dataclass
class AttentionTrace:
    """Coefficients per layer, shape ``(num_slots, heads)`` each, in EdgePlan slot order."""

    plan: EdgePlan
    alpha: list
    alpha_bar: nc.Tensor  # one value per undirected pair of plan.pairs

    def alpha_bar_values(self, layer: int | None = None) -> np.ndarray:
        if layer is None:
            return self.alpha_bar.data
        a = self.alpha[layer].mean(axis=1)
        return a.reshape(-1, 2).mean(axis=1)

    def rows(self, g: HeteroGraph, layer: int | None = None):
        """Yield ``(src, dst, relation, alpha_bar)`` for every edge of every relation."""
        values = self.alpha_bar_values(layer)
        n = self.plan.num_nodes
        key = self.plan.pairs[:, 0] * n + self.plan.pairs[:, 1]
        for rel in g.relations:
            e = g.edges[rel]
            idx = np.searchsorted(key, e[:, 0] * n + e[:, 1])
            for (u, v), val in zip(e.tolist(), values[idx].tolist()):
                yield u, v, rel, val


def init_params(cfg: TrainConfig, in_dim: int, relations, seed: int) -> dict[str, nc.Parameter]:
    rng = np.random.default_rng(seed)
    D, K = cfg.hidden, cfg.heads
    dh = D // K
    p = {"fusion.W0": nc.glorot(rng, (in_dim, D), "fusion.W0")}
    for l in range(cfg.layers):
        pre = f"layer{l}."
        p[pre + "Wq"] = nc.glorot(rng, (D, D), pre + "Wq")
        p[pre + "Wk"] = nc.glorot(rng, (D, D), pre + "Wk")
        p[pre + "g"] = nc.glorot(rng, (K, 2 * dh), pre + "g")
        for rel in relations:
            p[pre + "W_r." + rel] = nc.glorot(rng, (D, D), pre + "W_r." + rel)
        if cfg.residual_variant == "transform":
            p[pre + "Wres"] = nc.glorot(rng, (D, D), pre + "Wres")
    p["out.Wo"] = nc.glorot(rng, (D, 2), "out.Wo")
    p["out.bo"] = nc.zeros((2,), "out.bo")
    return p


def fuse_features(features, W0, slope: float = 0.01) -> nc.Tensor:
    x = features.fused() if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ValueError("no feature family present")
    return nc.leaky_relu(nc.matmul(nc.Tensor(x), W0), slope)


def attention_coeff(x_u, x_v, Wq, Wk, g, slope: float = 0.01) -> float:
    """Single-edge, single-head coefficient; mirrors the vectorised path for inspection."""
    q = np.asarray(x_u, float) @ np.asarray(Wq, float)
    k = np.asarray(x_v, float) @ np.asarray(Wk, float)
    q = np.where(q >= 0, q, slope * q)
    k = np.where(k >= 0, k, slope * k)
    return float(np.tanh(np.concatenate([q, k]) @ np.asarray(g, float)))


def edge_residual(alpha_hat, alpha_prev, beta: float):
    return (1.0 - beta) * alpha_hat + beta * alpha_prev


def _head_scores(x: nc.Tensor, W: nc.Parameter, gpart: nc.Tensor, K: int, slope: float) -> nc.Tensor:
    n, D = x.shape
    h = nc.leaky_relu(nc.matmul(x, W), slope)
    h = nc.reshape(h, (n, K, D // K))
    return nc.sum_(nc.mul(h, gpart), axis=2)  # n x K


def attention_layer(x: nc.Tensor, plan: EdgePlan, params, l: int, cfg: TrainConfig) -> nc.Tensor:
    """Raw coefficients ``alpha_hat`` for every slot, shape ``(num_slots, K)``."""
    K = cfg.heads
    dh = cfg.hidden // K
    pre = f"layer{l}."
    g = params[pre + "g"]
    sq = _head_scores(x, params[pre + "Wq"], nc.take(g, (slice(None), slice(0, dh))), K, cfg.slope)
    sk = _head_scores(x, params[pre + "Wk"], nc.take(g, (slice(None), slice(dh, 2 * dh))), K,
                      cfg.slope)
    score = nc.add(nc.gather(sq, plan.dst), nc.gather(sk, plan.src))
    if cfg.attention == "sigmoid":
        return nc.sigmoid(score)
    return nc.tanh(score)


def aggregate(x: nc.Tensor, plan: EdgePlan, alpha: nc.Tensor, weights: dict, heads: int) -> nc.Tensor:
    """Relation-aware, symmetric-degree-normalised, attention-weighted neighbor sum."""
    n, D = x.shape
    z = nc.Tensor(np.zeros((n, D)))
    for rel, (slots, src, dst, norm) in plan.relations.items():
        coef = nc.mul(nc.gather(alpha, slots), norm[:, None])  # E_r x K
        z = nc.add(z, nc.edge_aggregate(nc.matmul(x, weights[rel]), coef, src, dst, n))
    return z


def node_residual(x_prev: nc.Tensor, x0: nc.Tensor, z: nc.Tensor, variant: str,
                  Wres=None, epsilon: float = 0.5, slope: float = 0.01) -> nc.Tensor:
    if variant == "transform":
        return nc.leaky_relu(nc.add(nc.matmul(x_prev, Wres), z), slope)
    if variant == "initial":
        return nc.leaky_relu(nc.add(nc.mul(x0, epsilon), nc.mul(z, 1.0 - epsilon)), slope)
    raise ValueError(f"unknown residual variant {variant!r}")


def forward(g: HeteroGraph, features, params: dict, cfg: TrainConfig, mode: str = "eval",
            rng: np.random.Generator | None = None, plan: EdgePlan | None = None):
    """Run fusion, ``cfg.layers`` FaAt layers and the output head.

    Returns ``(logits, trace)``.  Dropout is active only when
    ``mode == "train"`` and an ``rng`` is supplied.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x_in = features.fused() if isinstance(features, FeatureSet) else np.asarray(features, float)
    if g.num_nodes == 0 or x_in.shape[0] != g.num_nodes:
        raise ValueError(f"features have {x_in.shape[0]} rows for a graph of {g.num_nodes} nodes")
    plan = plan or EdgePlan(g)
    drop_rng = rng if mode == "train" else None

    x0 = nc.dropout(fuse_features(x_in, params["fusion.W0"], cfg.slope), cfg.dropout, drop_rng)
    x = x0
    alphas: list[nc.Tensor] = []
    prev = None
    for l in range(cfg.layers):
        if cfg.attention == "constant":
            alpha = nc.Tensor(np.ones((plan.num_slots, cfg.heads)))
        else:
            alpha_hat = attention_layer(x, plan, params, l, cfg)
            alpha = alpha_hat if prev is None else nc.add(nc.mul(alpha_hat, 1.0 - cfg.beta),
                                                          nc.mul(prev, cfg.beta))
        weights = {rel: params[f"layer{l}.W_r.{rel}"] for rel in plan.relations}
        z = aggregate(x, plan, alpha, weights, cfg.heads)
        x = node_residual(x, x0, z, cfg.residual_variant, params.get(f"layer{l}.Wres"),
                          cfg.epsilon, cfg.slope)
        if not np.isfinite(x.data).all():
            raise FloatingPointError(f"non-finite activations in layer {l}")
        x = nc.dropout(x, cfg.dropout, drop_rng)
        alphas.append(alpha)
        prev = alpha

    logits = nc.add(nc.matmul(x, params["out.Wo"]), params["out.bo"])
    trace = AttentionTrace(plan, [a.data for a in alphas], _alpha_bar(alphas, plan))
    return logits, trace


def _alpha_bar(alphas: list, plan: EdgePlan) -> nc.Tensor:
    # mean over layers, heads and both directed slots of each undirected pair
    total = alphas[0]
    for a in alphas[1:]:
        total = nc.add(total, a)
    per_slot = nc.sum_(total, axis=1)
    n_pairs = len(plan.pairs)
    scale = 1.0 / (2 * len(alphas) * (alphas[0].shape[1] if alphas else 1))
    return nc.mul(nc.sum_(nc.reshape(per_slot, (n_pairs, 2)), axis=1), scale)
