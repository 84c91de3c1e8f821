"""CSV dataset bundles, run configuration and JSON checkpoints.

On-disk layout of a dataset directory::

    nodes.csv               id,label[,split]     label -1 = unlabeled; split in {train,val,test,""}
    edges.csv               src,dst,relation
    features_<family>.csv   id,f0,f1,...

Node ids must be exactly ``0..N-1`` (any row order).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .config import TrainConfig
from .graph import UNLABELED, FeatureSet, HeteroGraph, SynthConfig
from .train import SplitSet

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CHECKPOINT_FORMAT = "hetbot-checkpoint"
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """Malformed dataset file; the message names the file and line."""


@dataclass
class Dataset:
    graph: HeteroGraph
    features: FeatureSet
    labels: np.ndarray
    splits: SplitSet | None = None
    report: dict = field(default_factory=dict)


def _rows(path: Path, required: tuple):
    if not path.exists():
        raise DatasetError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in required if c not in header]
        if missing:
            raise DatasetError(f"{path}:1: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, (c.strip() for c in row)))


def _int(path, lineno, value, what):
    try:
        return int(value)
    except ValueError:
        raise DatasetError(f"{path}:{lineno}: {what} {value!r} is not an integer") from None


def load_dataset(directory, relations=None) -> Dataset:
    """Parse and validate a dataset directory.

    Self-loops and duplicate edges (same relation, either orientation) are
    dropped and counted in ``report``.  When ``relations`` is given, any
    other relation name is an error.
    """
    directory = Path(directory)
    nodes_path = directory / "nodes.csv"
    ids, labels, split_of = [], [], {}
    for lineno, row in _rows(nodes_path, ("id", "label")):
        nid = _int(nodes_path, lineno, row["id"], "node id")
        lab = _int(nodes_path, lineno, row["label"], "label")
        if lab not in (UNLABELED, 0, 1):
            raise DatasetError(f"{nodes_path}:{lineno}: label must be -1, 0 or 1, got {lab}")
        split = row.get("split", "")
        if split and split not in SPLIT_NAMES:
            raise DatasetError(f"{nodes_path}:{lineno}: unknown split {split!r}")
        if split:
            if lab == UNLABELED:
                raise DatasetError(f"{nodes_path}:{lineno}: unlabeled node assigned to split {split}")
            split_of[nid] = split
        ids.append((nid, lineno))
        labels.append(lab)
    n = len(ids)
    if n == 0:
        raise DatasetError(f"{nodes_path}: no nodes")
    y = np.full(n, UNLABELED, dtype=np.int64)
    seen = set()
    for (nid, lineno), lab in zip(ids, labels):
        if not 0 <= nid < n:
            raise DatasetError(f"{nodes_path}:{lineno}: node id {nid} outside 0..{n - 1}")
        if nid in seen:
            raise DatasetError(f"{nodes_path}:{lineno}: duplicate node id {nid}")
        seen.add(nid)
        y[nid] = lab

    edges_path = directory / "edges.csv"
    edges: dict[str, list] = {}
    keys: set = set()
    self_loops = duplicates = 0
    for lineno, row in _rows(edges_path, ("src", "dst", "relation")):
        u = _int(edges_path, lineno, row["src"], "src")
        v = _int(edges_path, lineno, row["dst"], "dst")
        rel = row["relation"]
        if not rel:
            raise DatasetError(f"{edges_path}:{lineno}: empty relation name")
        if relations is not None and rel not in relations:
            raise DatasetError(f"{edges_path}:{lineno}: undeclared relation {rel!r}")
        for end in (u, v):
            if not 0 <= end < n:
                raise DatasetError(f"{edges_path}:{lineno}: edge endpoint {end} is not a node (N={n})")
        edges.setdefault(rel, [])
        if u == v:
            self_loops += 1
            continue
        key = (rel, min(u, v), max(u, v))
        if key in keys:
            duplicates += 1
            continue
        keys.add(key)
        edges[rel].append(key[1:])
    for rel in relations or ():
        edges.setdefault(rel, [])
    if self_loops or duplicates:
        log.info("dropped %d self-loops and %d duplicate edges", self_loops, duplicates)
    graph = HeteroGraph(n, edges)

    families = {}
    for path in sorted(directory.glob("features_*.csv")):
        families[path.stem[len("features_"):]] = _load_family(path, n)
    features = FeatureSet(families)

    splits = None
    if split_of:
        parts = {s: sorted(i for i, name in split_of.items() if name == s) for s in SPLIT_NAMES}
        splits = SplitSet(parts["train"], parts["val"], parts["test"])
    report = {"num_nodes": n, "num_edges": graph.num_edges, "dropped_self_loops": self_loops,
              "dropped_duplicates": duplicates}
    return Dataset(graph, features, y, splits, report)


def _load_family(path: Path, n: int) -> np.ndarray:
    out = None
    filled = np.zeros(n, dtype=bool)
    for lineno, row in _rows(path, ("id",)):
        nid = _int(path, lineno, row.pop("id"), "node id")
        if not 0 <= nid < n:
            raise DatasetError(f"{path}:{lineno}: node id {nid} outside 0..{n - 1}")
        if filled[nid]:
            raise DatasetError(f"{path}:{lineno}: duplicate node id {nid}")
        try:
            vals = [float(v) for v in row.values()]
        except ValueError:
            bad = next(v for v in row.values() if not _is_float(v))
            raise DatasetError(f"{path}:{lineno}: non-numeric feature {bad!r}") from None
        if not np.all(np.isfinite(vals)):
            raise DatasetError(f"{path}:{lineno}: non-finite feature value")
        if out is None:
            out = np.zeros((n, len(vals)))
        out[nid] = vals
        filled[nid] = True
    if out is None or not filled.all():
        count = int(filled.sum())
        raise DatasetError(f"{path}: node count mismatch, {count} rows for {n} nodes")
    return out


def _is_float(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def write_dataset(directory, graph: HeteroGraph, features: FeatureSet, labels,
                  splits: SplitSet | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    split_of = {}
    if splits is not None:
        for name in SPLIT_NAMES:
            for i in getattr(splits, name).tolist():
                split_of[i] = name
    with open(directory / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", "split"] if splits is not None else ["id", "label"])
        for i, lab in enumerate(np.asarray(labels).tolist()):
            w.writerow([i, lab, split_of.get(i, "")] if splits is not None else [i, lab])
    with open(directory / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "relation"])
        for rel in graph.relations:
            for u, v in graph.edges[rel].tolist():
                w.writerow([u, v, rel])
    for old in directory.glob("features_*.csv"):
        old.unlink()
    for fam in features.ordered_names():
        x = features.families[fam]
        with open(directory / f"features_{fam}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"f{j}" for j in range(x.shape[1])])
            for i, row in enumerate(x.tolist()):
                w.writerow([i] + [repr(v) for v in row])


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """One JSON document for every command.

    ``train`` and ``synth`` hold TrainConfig / SynthConfig fields; missing
    keys take the documented defaults and unknown keys are rejected.
    """

    data: str | None = None
    out: str | None = None
    variant: str = "full"
    relations: list | None = None
    split_ratios: tuple = (0.1, 0.1, 0.8)
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        train = d.pop("train", {})
        synth = d.pop("synth", {})
        if not isinstance(train, dict) or not isinstance(synth, dict):
            raise ValueError("'train' and 'synth' must be JSON objects")
        synth_known = {f.name for f in fields(SynthConfig)}
        bad = set(synth) - synth_known
        if bad:
            raise ValueError(f"unknown synth keys: {sorted(bad)}")
        if "relations" in synth:
            synth["relations"] = tuple(synth["relations"])
        cfg = cls(**d, train=TrainConfig.from_dict(train), synth=SynthConfig(**synth))
        cfg.split_ratios = tuple(cfg.split_ratios)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        d["synth"]["relations"] = list(self.synth.relations)
        return d


# ---------------------------------------------------------------------------
# JSON helpers and checkpoints
# ---------------------------------------------------------------------------

def dump_json(path, doc: dict) -> None:
    """Write sorted-key JSON with a trailing newline; floats keep full precision."""
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_checkpoint(path, params: dict, cfg: TrainConfig, injected: dict, meta: dict | None = None):
    """Parameters as nested lists plus a shape manifest and the injected edge lists.

    ``injected`` maps relation name to ``(u, v)`` pairs added on top of the
    dataset's own relations (k-NN or random edges), so the trained graph can
    be rebuilt from the dataset alone.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "manifest": {k: list(p.shape) for k, p in params.items()},
        "params": {k: p.data.tolist() for k, p in params.items()},
        "injected_edges": {r: np.asarray(e).tolist() for r, e in injected.items()},
        "meta": meta or {},
    }
    dump_json(path, doc)


def load_checkpoint(path):
    """Return ``(params, cfg, injected, meta)``; shapes are checked against the manifest."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    cfg = TrainConfig.from_dict(doc["config"])
    params = {}
    for name, shape in doc["manifest"].items():
        arr = np.asarray(doc["params"][name], dtype=float).reshape(shape)
        params[name] = nc.Parameter(arr, name=name)
    injected = {r: np.asarray(e, dtype=np.int64).reshape(-1, 2)
                for r, e in doc["injected_edges"].items()}
    return params, cfg, injected, doc.get("meta", {})
