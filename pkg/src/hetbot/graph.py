"""Relation-typed undirected graphs, homophily measures, perturbation and synthetic data."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

UNLABELED = -1
HISTOGRAM_EDGES = (0.0, 0.25, 0.5, 0.75, 1.0)
FAMILY_ORDER = ("description", "numerical", "categorical")


def _canonical_pairs(pairs, num_nodes: int, relation: str) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.min() < 0 or arr.max() >= num_nodes:
        raise ValueError(f"relation {relation!r}: node id out of range for {num_nodes} nodes")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise ValueError(f"relation {relation!r}: self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    uniq = np.unique(arr, axis=0)
    if len(uniq) != len(arr):
        raise ValueError(f"relation {relation!r}: duplicate pairs")
    return uniq


class HeteroGraph:
    """Undirected multi-relation graph.

    Each relation holds a sorted array of unique pairs ``(u, v)`` with
    ``u < v``.  Instances are treated as immutable; the edge arrays are
    flagged read-only.
    """

    def __init__(self, num_nodes: int, edges: Mapping[str, object]):
        if num_nodes <= 0:
            raise ValueError("graph needs at least one node")
        self.num_nodes = int(num_nodes)
        self.edges: dict[str, np.ndarray] = {}
        for rel, pairs in edges.items():
            arr = _canonical_pairs(pairs, self.num_nodes, rel)
            arr.setflags(write=False)
            self.edges[rel] = arr
        self.relations: tuple[str, ...] = tuple(self.edges)
        self.degree: dict[str, np.ndarray] = {}
        for rel, arr in self.edges.items():
            deg = np.bincount(arr.ravel(), minlength=self.num_nodes)
            deg.setflags(write=False)
            self.degree[rel] = deg

    def __repr__(self) -> str:
        counts = ", ".join(f"{r}={len(e)}" for r, e in self.edges.items())
        return f"HeteroGraph(num_nodes={self.num_nodes}, {counts})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (self.num_nodes == other.num_nodes and self.relations == other.relations
                and all(np.array_equal(self.edges[r], other.edges[r]) for r in self.relations))

    @property
    def num_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    def merged_pairs(self) -> np.ndarray:
        """Unique undirected pairs over the union of all relations."""
        if not self.edges:
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(np.concatenate(list(self.edges.values())), axis=0)

    def with_relation(self, name: str, pairs) -> "HeteroGraph":
        if name in self.edges:
            raise ValueError(f"relation {name!r} already exists")
        edges = dict(self.edges)
        edges[name] = pairs
        return HeteroGraph(self.num_nodes, edges)

    def without_relation(self, name: str) -> "HeteroGraph":
        return HeteroGraph(self.num_nodes, {r: e for r, e in self.edges.items() if r != name})

    def renamed(self, mapping: Mapping[str, str]) -> "HeteroGraph":
        return HeteroGraph(self.num_nodes, {mapping.get(r, r): e for r, e in self.edges.items()})


@dataclass
class FeatureSet:
    """Per-user feature families (description / numerical / categorical), each N x F_f."""

    families: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.families = {k: np.asarray(v, dtype=np.float64) for k, v in self.families.items()}
        rows = {v.shape[0] for v in self.families.values()}
        if len(rows) > 1:
            raise ValueError(f"feature families disagree on row count: {sorted(rows)}")

    @property
    def num_nodes(self) -> int:
        return next(iter(self.families.values())).shape[0] if self.families else 0

    def ordered_names(self) -> list[str]:
        known = [f for f in FAMILY_ORDER if f in self.families]
        return known + sorted(f for f in self.families if f not in FAMILY_ORDER)

    def fused(self) -> np.ndarray:
        if not self.families:
            raise ValueError("no feature family present")
        return np.concatenate([self.families[f] for f in self.ordered_names()], axis=1)

    @property
    def width(self) -> int:
        return sum(v.shape[1] for v in self.families.values())


# ---------------------------------------------------------------------------
# homophily
# ---------------------------------------------------------------------------

def _labeled_pairs(g: HeteroGraph, labels: np.ndarray) -> np.ndarray:
    # Restrict to edges whose endpoints are both labeled.
    pairs = g.merged_pairs()
    if len(pairs) == 0:
        return pairs
    keep = (labels[pairs[:, 0]] != UNLABELED) & (labels[pairs[:, 1]] != UNLABELED)
    return pairs[keep]


def _same_and_degree(g: HeteroGraph, labels: np.ndarray):
    pairs = _labeled_pairs(g, labels)
    same = (labels[pairs[:, 0]] == labels[pairs[:, 1]]).astype(np.int64)
    deg = np.bincount(pairs.ravel(), minlength=g.num_nodes)
    same_cnt = (np.bincount(pairs[:, 0], weights=same, minlength=g.num_nodes)
                + np.bincount(pairs[:, 1], weights=same, minlength=g.num_nodes))
    return pairs, same, deg, same_cnt


def node_homophily(g: HeteroGraph, labels) -> float:
    labels = np.asarray(labels)
    _, _, deg, same_cnt = _same_and_degree(g, labels)
    active = deg > 0
    if not active.any():
        raise ValueError("node homophily needs at least one labeled node with a neighbor")
    return float(np.mean(same_cnt[active] / deg[active]))


def edge_homophily(g: HeteroGraph, labels) -> float:
    labels = np.asarray(labels)
    pairs = _labeled_pairs(g, labels)
    if len(pairs) == 0:
        raise ValueError("edge homophily needs at least one labeled edge")
    return float(np.mean(labels[pairs[:, 0]] == labels[pairs[:, 1]]))


def class_insensitive_homophily(g: HeteroGraph, labels, num_classes: int = 2) -> float:
    """Class-insensitive edge homophily.

    ``h_k`` is degree-weighted per class: same-label neighbor counts summed over
    nodes of class k, divided by their summed degree.  A class with zero total
    degree gets ``h_k = 0``.
    """
    if num_classes < 2:
        raise ValueError("class-insensitive homophily needs at least two classes")
    labels = np.asarray(labels)
    pairs, _, deg, same_cnt = _same_and_degree(g, labels)
    if len(pairs) == 0:
        raise ValueError("class-insensitive homophily needs at least one labeled edge")
    labeled = labels != UNLABELED
    n_labeled = int(labeled.sum())
    total = 0.0
    for k in range(num_classes):
        members = labels == k
        d = deg[members].sum()
        h_k = same_cnt[members].sum() / d if d > 0 else 0.0
        total += max(0.0, h_k - members.sum() / n_labeled)
    return float(total / (num_classes - 1))


def homophily_report(g: HeteroGraph, labels, num_classes: int = 2) -> dict:
    return {
        "node_homophily": node_homophily(g, labels),
        "edge_homophily": edge_homophily(g, labels),
        "class_insensitive_homophily": class_insensitive_homophily(g, labels, num_classes),
    }


def per_node_homophily(g: HeteroGraph, labels, nodes=None):
    """Same-label neighbor fraction per non-isolated labeled node.

    Returns ``(fractions, counts)`` where ``counts`` bins the fractions into
    [0, .25), [.25, .5), [.5, .75), [.75, 1].  ``nodes`` optionally restricts
    the output (e.g. to bots only).
    """
    labels = np.asarray(labels)
    _, _, deg, same_cnt = _same_and_degree(g, labels)
    candidates = np.arange(g.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
    fractions = {int(u): float(same_cnt[u] / deg[u]) for u in candidates
                 if deg[u] > 0 and labels[u] != UNLABELED}
    counts, _ = np.histogram(list(fractions.values()), bins=HISTOGRAM_EDGES)
    return fractions, counts


# ---------------------------------------------------------------------------
# perturbation
# ---------------------------------------------------------------------------

def perturb_to_homophily(g: HeteroGraph, labels, target: float, seed: int,
                         relation: str = "perturb") -> HeteroGraph:
    """Add uniformly sampled cross-class pairs until edge homophily <= target.

    Homophilic edges are never touched, so the homophilic count stays fixed.
    The number of added pairs is the smallest one reaching the target.
    """
    labels = np.asarray(labels)
    if np.any(labels == UNLABELED):
        raise ValueError("perturbation needs every node labeled")
    pairs = g.merged_pairs()
    n_total = len(pairs)
    n_same = int(np.sum(labels[pairs[:, 0]] == labels[pairs[:, 1]]))
    current = n_same / n_total
    if target > current + 1e-12:
        raise ValueError(f"target {target} exceeds current edge homophily {current:.4f}")
    if target <= 0.0:
        raise ValueError("target 0 is unreachable while homophilic edges exist" if n_same
                         else "graph is already fully heterophilic")
    needed = max(0, int(np.ceil(n_same / target - n_total - 1e-9)))
    if needed == 0:
        return g

    existing = {(int(u), int(v)) for u, v in pairs}
    classes = np.unique(labels)
    members = {c: np.flatnonzero(labels == c) for c in classes}
    cross_possible = sum(len(members[a]) * len(members[b])
                         for i, a in enumerate(classes) for b in classes[i + 1:])
    cross_existing = n_total - n_same
    available = cross_possible - cross_existing
    if needed > available:
        raise ValueError(f"target {target} unreachable: needs {needed} cross pairs, "
                         f"only {available} remain")

    rng = np.random.default_rng(seed)
    added: list[tuple[int, int]] = []
    if needed * 2 > available:
        cand = [(min(u, v), max(u, v)) for u in range(g.num_nodes) for v in range(u + 1, g.num_nodes)
                if labels[u] != labels[v] and (u, v) not in existing]
        pick = rng.choice(len(cand), size=needed, replace=False)
        added = [cand[i] for i in np.sort(pick)]
    else:
        chosen: set[tuple[int, int]] = set()
        while len(added) < needed:
            u, v = rng.integers(0, g.num_nodes, size=2)
            if labels[u] == labels[v]:
                continue
            key = (int(min(u, v)), int(max(u, v)))
            if key in existing or key in chosen:
                continue
            chosen.add(key)
            added.append(key)
    if relation in g.edges:
        merged = np.concatenate([g.edges[relation], np.asarray(added)])
        edges = dict(g.edges)
        edges[relation] = merged
        return HeteroGraph(g.num_nodes, edges)
    return g.with_relation(relation, added)


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    n_per_class: int = 500
    target_edge_homophily: float = 0.5
    mean_degree: float = 8.0
    feature_dims: dict = field(default_factory=lambda: {"description": 16, "numerical": 8,
                                                         "categorical": 4})
    class_mean_separation: float = 2.0
    degree_spread: float = 0.5
    human_same_share: float = 0.5  # fraction of same-class edges inside class 0
    relations: tuple = ("follower", "friend")
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.target_edge_homophily <= 1.0:
            raise ValueError("target_edge_homophily must lie in [0, 1]")
        if self.mean_degree <= 0:
            raise ValueError("mean_degree must be positive")
        if self.class_mean_separation < 0:
            raise ValueError("class_mean_separation must be non-negative")
        if not 0.0 <= self.human_same_share <= 1.0:
            raise ValueError("human_same_share must lie in [0, 1]")
        if self.n_per_class < 2:
            raise ValueError("n_per_class must be at least 2")
        self.relations = tuple(self.relations)


def _sample_pairs(rng, count, left, right, w_left, w_right, taken):
    out = []
    while len(out) < count:
        batch = max(16, 2 * (count - len(out)))
        us = rng.choice(left, size=batch, p=w_left)
        vs = rng.choice(right, size=batch, p=w_right)
        for u, v in zip(us, vs):
            if u == v:
                continue
            key = (int(min(u, v)), int(max(u, v)))
            if key in taken:
                continue
            taken.add(key)
            out.append(key)
            if len(out) == count:
                break
    return out


def synth_graph(cfg: SynthConfig):
    """Two-class degree-corrected graph with class-conditional Gaussian features.

    Returns ``(graph, features, labels)``.  Exactly ``round(h * M)`` of the
    ``M = N * mean_degree / 2`` edges join same-class nodes, so the realised
    edge homophily matches the target up to rounding.  Feature class means
    sit ``separation`` noise-std apart along a random unit direction of the
    concatenated feature space.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_per_class
    N = 2 * n
    labels = np.repeat(np.array([0, 1]), n)

    m_total = int(round(N * cfg.mean_degree / 2))
    m_same = int(round(cfg.target_edge_homophily * m_total))
    m_cross = m_total - m_same
    same_capacity = 2 * (n * (n - 1) // 2)
    if m_same > same_capacity:
        raise ValueError(f"infeasible: {m_same} same-class edges requested, only "
                         f"{same_capacity} pairs exist")
    if m_cross > n * n:
        raise ValueError(f"infeasible: {m_cross} cross-class edges requested, only {n * n} pairs exist")
    if max(m_same / same_capacity, m_cross / (n * n)) > 0.5:
        warnings.warn("synthetic graph is dense; rejection sampling may be slow")

    theta = np.exp(cfg.degree_spread * rng.standard_normal(N))
    groups = [np.arange(n), np.arange(n, N)]
    weights = [theta[grp] / theta[grp].sum() for grp in groups]

    taken: set[tuple[int, int]] = set()
    n_same_0 = int(rng.binomial(m_same, cfg.human_same_share))
    if max(n_same_0, m_same - n_same_0) > same_capacity // 2:
        raise ValueError("infeasible: one class cannot hold its share of same-class edges")
    pairs = []
    pairs += _sample_pairs(rng, n_same_0, groups[0], groups[0], weights[0], weights[0], taken)
    pairs += _sample_pairs(rng, m_same - n_same_0, groups[1], groups[1], weights[1], weights[1],
                           taken)
    pairs += _sample_pairs(rng, m_cross, groups[0], groups[1], weights[0], weights[1], taken)
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)

    rel_of = rng.integers(0, len(cfg.relations), size=len(pairs))
    edges = {r: pairs[rel_of == i] for i, r in enumerate(cfg.relations)}
    graph = HeteroGraph(N, edges)

    names = [f for f in FAMILY_ORDER if f in cfg.feature_dims] + sorted(
        f for f in cfg.feature_dims if f not in FAMILY_ORDER)
    dims = [int(cfg.feature_dims[f]) for f in names]
    direction = rng.standard_normal(sum(dims))
    direction /= np.linalg.norm(direction)
    offset = 0.5 * cfg.class_mean_separation * direction
    signs = np.where(labels == 1, 1.0, -1.0)[:, None]
    x = rng.standard_normal((N, sum(dims))) + signs * offset
    cuts = np.cumsum(dims)[:-1]
    features = FeatureSet(dict(zip(names, np.split(x, cuts, axis=1))))
    return graph, features, labels
