"""Command-line interface: ``hetbot <command> [options]``.

Commands chain through dataset directories::

    hetbot synth --homophily 0.2 --out data/
    hetbot perturb --data data/ --target 0.1 --out data_h01/
    hetbot augment --data data_h01/ --k 1 --out data_aug/
    hetbot train --data data_aug/ --seed 7 --out run/
    hetbot export-attention --data data_aug/ --checkpoint run/checkpoint.json --out run/

Every command writes ``summary.json`` (with ``schema_version``) into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import numcore as nc
from .dataio import (
    SCHEMA_VERSION,
    Dataset,
    RunConfig,
    dump_json,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    write_dataset,
)
from .faat import EdgePlan, forward, init_params
from .graph import (
    HISTOGRAM_EDGES,
    UNLABELED,
    HeteroGraph,
    edge_homophily,
    homophily_report,
    per_node_homophily,
    perturb_to_homophily,
    synth_graph,
)
from .homoaug import KNN_RELATION, homo_aug
from .train import (
    VARIANTS,
    evaluate,
    make_splits,
    mlp_config,
    prepare_graph,
    total_loss,
    train_model,
    variant_config,
)

log = logging.getLogger("hetbot")

BUNDLED_CONFIGS = ("toy", "synth1000")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_config(arg: str | None) -> RunConfig:
    if arg is None:
        return RunConfig()
    if arg in BUNDLED_CONFIGS:
        ref = resources.files("hetbot") / "configs" / f"{arg}.json"
        with resources.as_file(ref) as path:
            return RunConfig.load(path)
    if not Path(arg).exists():
        raise UsageError(f"config {arg!r} is neither a file nor a bundled config {BUNDLED_CONFIGS}")
    return RunConfig.load(arg)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for key in ("data", "out", "variant"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train = cfg.train.replace(seed=args.seed)
    if getattr(args, "k", None) is not None:
        cfg.train = cfg.train.replace(k=args.k)
    return cfg


def need(cfg: RunConfig, key: str) -> str:
    value = getattr(cfg, key)
    if not value:
        raise UsageError(f"--{key} is required (or set {key!r} in the config)")
    return value


def out_dir(cfg: RunConfig) -> Path:
    path = Path(need(cfg, "out"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def splits_for(ds: Dataset, cfg: RunConfig):
    if ds.splits is not None:
        return ds.splits
    return make_splits(ds.labels, cfg.split_ratios, seed=cfg.seed)


def summary(command: str, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "command": command, **body}


def parse_float_range(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list."""
    try:
        if ":" in text:
            lo, hi, step = (float(t) for t in text.split(":"))
            if step <= 0:
                raise ValueError
            count = int(np.floor((hi - lo) / step + 1e-9)) + 1
            return [round(lo + i * step, 10) for i in range(count)]
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse range {text!r}; use a:b:step or a comma list") from None


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def fmt(x) -> str:
    return repr(float(x))


def metrics_doc(res, seed: int, variant: str) -> dict:
    doc = res.metrics.as_dict()
    doc.update(epochs_ran=res.epochs_ran, best_epoch=res.best_epoch, seed=seed, variant=variant,
               schema_version=SCHEMA_VERSION)
    return doc


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> dict:
    changes = {}
    for flag, key in (("n_per_class", "n_per_class"), ("homophily", "target_edge_homophily"),
                      ("separation", "class_mean_separation"), ("mean_degree", "mean_degree"),
                      ("human_same_share", "human_same_share")):
        value = getattr(args, flag)
        if value is not None:
            changes[key] = value
    synth_cfg = dataclasses.replace(cfg.synth, **changes, seed=cfg.seed)
    g, f, y = synth_graph(synth_cfg)
    out = out_dir(cfg)
    write_dataset(out, g, f, y)
    doc = summary("synth", num_nodes=g.num_nodes, num_edges=g.num_edges,
                  relations=list(g.relations), **homophily_report(g, y),
                  synth={**synth_cfg.__dict__, "relations": list(synth_cfg.relations)})
    dump_json(out / "summary.json", doc)
    return doc


def cmd_analyze(cfg: RunConfig, args) -> dict:
    ds = load_dataset(need(cfg, "data"), cfg.relations)
    out = out_dir(cfg)
    g, y = ds.graph, ds.labels
    per_rel = {}
    for rel in g.relations:
        if len(g.edges[rel]):
            sub = HeteroGraph(g.num_nodes, {rel: g.edges[rel]})
            try:
                per_rel[rel] = homophily_report(sub, y)
            except ValueError:
                pass
    fractions, counts = per_node_homophily(g, y)
    write_csv(out / "node_homophily_histogram.csv", ["bin_low", "bin_high", "count"],
              [(HISTOGRAM_EDGES[i], HISTOGRAM_EDGES[i + 1], int(c)) for i, c in enumerate(counts)])
    labeled = {"human": [], "bot": []}
    for node, frac in fractions.items():
        labeled["bot" if y[node] == 1 else "human"].append(frac)
    rows = []
    for cls, values in labeled.items():
        hist = np.histogram(values, bins=HISTOGRAM_EDGES)[0] if values else np.zeros(4, int)
        rows += [(cls, HISTOGRAM_EDGES[i], HISTOGRAM_EDGES[i + 1], int(c)) for i, c in enumerate(hist)]
    write_csv(out / "node_homophily_by_class.csv", ["class", "bin_low", "bin_high", "count"], rows)
    doc = summary("analyze", **homophily_report(g, y), per_relation=per_rel,
                  num_nodes=g.num_nodes, num_edges=g.num_edges,
                  num_labeled=int(np.sum(y != UNLABELED)), load_report=ds.report)
    dump_json(out / "summary.json", doc)
    return doc


def cmd_perturb(cfg: RunConfig, args) -> dict:
    ds = load_dataset(need(cfg, "data"), cfg.relations)
    before = edge_homophily(ds.graph, ds.labels)
    g = perturb_to_homophily(ds.graph, ds.labels, args.target, seed=cfg.seed)
    out = out_dir(cfg)
    write_dataset(out, g, ds.features, ds.labels, ds.splits)
    added = len(g.edges.get("perturb", ())) - len(ds.graph.edges.get("perturb", ()))
    doc = summary("perturb", target=args.target, edge_homophily_before=before,
                  edge_homophily_after=edge_homophily(g, ds.labels), added_edges=added)
    dump_json(out / "summary.json", doc)
    return doc


def _augment_once(ds: Dataset, cfg: RunConfig):
    splits = splits_for(ds, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        aug, knn, _ = homo_aug(ds.graph, ds.features, ds.labels, splits.train, cfg.train.k,
                               mlp_config(cfg.train), val_mask=splits.val)
    pairs = knn.pairs()
    knn_h = edge_homophily(HeteroGraph(ds.graph.num_nodes, {KNN_RELATION: pairs}), ds.labels)
    return aug, pairs, knn_h, splits


def cmd_augment(cfg: RunConfig, args) -> dict:
    ds = load_dataset(need(cfg, "data"), cfg.relations)
    if KNN_RELATION in ds.graph.relations:
        raise UsageError(f"dataset already has a {KNN_RELATION!r} relation")
    out = out_dir(cfg)
    if args.sweep_k:
        rows = []
        for k in parse_int_list(args.sweep_k):
            for seed in range(cfg.seed, cfg.seed + args.seeds):
                run = RunConfig.from_dict({**cfg.to_dict(), "seed": seed,
                                           "train": cfg.train.replace(k=k, seed=seed).to_dict()})
                _, pairs, knn_h, _ = _augment_once(ds, run)
                rows.append((k, seed, len(pairs), fmt(knn_h)))
        write_csv(out / "sweep_k.csv", ["k", "seed", "knn_edges", "knn_edge_homophily"], rows)
        doc = summary("augment", sweep="k", rows=len(rows))
        dump_json(out / "summary.json", doc)
        return doc
    aug, pairs, knn_h, splits = _augment_once(ds, cfg)
    write_dataset(out, aug, ds.features, ds.labels, splits)
    write_csv(out / "knn_edges.csv", ["src", "dst", "relation"],
              [(u, v, KNN_RELATION) for u, v in pairs.tolist()])
    doc = summary("augment", k=cfg.train.k, knn_edges=len(pairs), knn_edge_homophily=knn_h,
                  combined_edge_homophily=edge_homophily(aug, ds.labels))
    dump_json(out / "summary.json", doc)
    return doc


def _train_once(ds: Dataset, cfg: RunConfig, variant: str):
    splits = splits_for(ds, cfg)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        graph = prepare_graph(ds.graph, ds.features, ds.labels, splits, cfg.train, variant)
    res = train_model(graph, ds.features, ds.labels, splits, variant_config(cfg.train, variant))
    return graph, res


def _injected(base: HeteroGraph, trained: HeteroGraph) -> dict:
    return {r: trained.edges[r] for r in trained.relations if r not in base.relations}


def cmd_train(cfg: RunConfig, args) -> dict:
    out = out_dir(cfg)
    variants = args.variants.split(",") if args.variants else [cfg.variant]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    if args.sweep_homophily or args.sweep_k:
        return _train_sweep(cfg, args, variants, out)

    if len(variants) != 1:
        raise UsageError("--variants with several entries needs a sweep flag")
    ds = load_dataset(need(cfg, "data"), cfg.relations)
    base = ds.graph.without_relation(KNN_RELATION) if KNN_RELATION in ds.graph.relations else ds.graph
    graph, res = _train_once(ds, cfg, variants[0])
    doc = metrics_doc(res, cfg.seed, variants[0])
    dump_json(out / "metrics.json", doc)
    save_checkpoint(out / "checkpoint.json", res.params, variant_config(cfg.train, variants[0]),
                    _injected(base, graph), {"variant": variants[0], "seed": cfg.seed})
    dump_json(out / "summary.json", summary("train", metrics=doc, artifacts=["metrics.json",
                                                                            "checkpoint.json"]))
    return doc


def _train_sweep(cfg: RunConfig, args, variants, out: Path) -> dict:
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    rows = []
    if args.sweep_homophily:
        base_ds = load_dataset(cfg.data, cfg.relations) if cfg.data else None
        for h in parse_float_range(args.sweep_homophily):
            for seed in seeds:
                run = RunConfig.from_dict({**cfg.to_dict(), "seed": seed,
                                           "train": cfg.train.replace(seed=seed).to_dict()})
                if base_ds is None:
                    synth_cfg = dataclasses.replace(cfg.synth, target_edge_homophily=h, seed=seed)
                    g, f, y = synth_graph(synth_cfg)
                    ds = Dataset(g, f, y)
                else:
                    current = edge_homophily(base_ds.graph, base_ds.labels)
                    if h > current + 1e-12:
                        log.warning("skipping target %.3f above current homophily %.3f", h, current)
                        continue
                    g = perturb_to_homophily(base_ds.graph, base_ds.labels, h, seed=seed)
                    ds = Dataset(g, base_ds.features, base_ds.labels, base_ds.splits)
                realised = edge_homophily(ds.graph, ds.labels)
                for v in variants:
                    _, res = _train_once(ds, run, v)
                    m = res.metrics
                    rows.append((fmt(h), fmt(realised), seed, v, fmt(m.accuracy), fmt(m.f1),
                                 fmt(m.balanced_accuracy)))
                    log.info("h=%.2f seed=%d %s acc=%.4f", h, seed, v, m.accuracy)
        write_csv(out / "sweep_homophily.csv", ["target_homophily", "edge_homophily", "seed",
                                                "variant", "accuracy", "f1", "balanced_accuracy"],
                  rows)
        name = "homophily"
    else:
        ds = load_dataset(need(cfg, "data"), cfg.relations)
        if KNN_RELATION in ds.graph.relations:
            raise UsageError("--sweep-k needs an un-augmented dataset")
        for k in parse_int_list(args.sweep_k):
            for seed in seeds:
                run = RunConfig.from_dict({**cfg.to_dict(), "seed": seed,
                                           "train": cfg.train.replace(k=k, seed=seed).to_dict()})
                for v in variants:
                    graph, res = _train_once(ds, run, v)
                    knn_h = (edge_homophily(HeteroGraph(graph.num_nodes,
                                                        {KNN_RELATION: graph.edges[KNN_RELATION]}),
                                            ds.labels)
                             if KNN_RELATION in graph.relations else float("nan"))
                    m = res.metrics
                    rows.append((k, seed, v, fmt(knn_h), fmt(m.accuracy), fmt(m.f1),
                                 fmt(m.balanced_accuracy)))
        write_csv(out / "sweep_k.csv", ["k", "seed", "variant", "knn_edge_homophily", "accuracy",
                                        "f1", "balanced_accuracy"], rows)
        name = "k"
    doc = summary("train", sweep=name, rows=len(rows), variants=variants, seeds=list(seeds))
    dump_json(out / "summary.json", doc)
    return doc


def _restore(cfg: RunConfig, checkpoint: str):
    ds = load_dataset(need(cfg, "data"), cfg.relations)
    params, tcfg, injected, meta = load_checkpoint(checkpoint)
    graph = ds.graph
    for rel, pairs in injected.items():
        if rel in graph.relations:
            # dataset was saved after augmentation; the injected edges must agree
            if not np.array_equal(graph.edges[rel], HeteroGraph(graph.num_nodes, {rel: pairs}).edges[rel]):
                raise ValueError(f"relation {rel!r} in the dataset differs from the checkpoint")
            continue
        graph = graph.with_relation(rel, pairs)
    missing = [r for r in graph.relations if f"layer0.W_r.{r}" not in params]
    if missing:
        raise ValueError(f"checkpoint has no weights for relation(s) {missing}")
    logits, trace = forward(graph, ds.features, params, tcfg, "eval")
    return ds, graph, logits, trace, tcfg, meta


def cmd_evaluate(cfg: RunConfig, args) -> dict:
    ds, _, logits, _, _, meta = _restore(cfg, args.checkpoint)
    if args.seed is None and meta.get("seed") is not None:
        cfg.seed = meta["seed"]  # regenerate the training-time split
    splits = splits_for(ds, cfg)
    nodes = getattr(splits, args.split)
    m = evaluate(logits, ds.labels, nodes)
    doc = {**m.as_dict(), "split": args.split, "num_nodes": int(len(nodes)),
           "seed": meta.get("seed"), "variant": meta.get("variant"), "schema_version": SCHEMA_VERSION}
    out = out_dir(cfg)
    dump_json(out / "evaluation.json", doc)
    dump_json(out / "summary.json", summary("evaluate", metrics=doc))
    return doc


def cmd_export_attention(cfg: RunConfig, args) -> dict:
    ds, graph, _, trace, _, _ = _restore(cfg, args.checkpoint)
    y = ds.labels
    rows = []
    kinds = {"homophilic": 0, "heterophilic": 0, "unknown": 0}
    layer = args.layer
    for u, v, rel, a in trace.rows(graph, layer):
        if y[u] == UNLABELED or y[v] == UNLABELED:
            kind = "unknown"
        else:
            kind = "homophilic" if y[u] == y[v] else "heterophilic"
        kinds[kind] += 1
        rows.append((u, v, rel, fmt(a), kind))
    out = out_dir(cfg)
    write_csv(out / "attention.csv", ["src", "dst", "relation", "alpha_bar", "edge_kind"], rows)
    stats = {}
    for kind in ("homophilic", "heterophilic"):
        vals = np.array([float(r[3]) for r in rows if r[4] == kind])
        if vals.size:
            stats[kind] = {"mean_alpha_bar": float(vals.mean()),
                           "fraction_negative": float(np.mean(vals < 0))}
    doc = summary("export-attention", edges=len(rows), edge_kinds=kinds, stats=stats, layer=layer)
    dump_json(out / "summary.json", doc)
    return doc


def toy_problem(cfg: RunConfig):
    """8 nodes, two relations; the fixed problem behind ``gradcheck``."""
    rng = np.random.default_rng(cfg.seed)
    n = 8
    follower = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7)]
    friend = [(0, 4), (1, 5), (2, 6), (0, 7)]
    g = HeteroGraph(n, {"follower": follower, "friend": friend})
    x = rng.normal(size=(n, 6))
    y = np.array([0, 1, 0, 1, 1, 0, 0, 1])
    return g, x, y


def cmd_gradcheck(cfg: RunConfig, args) -> dict:
    reports = {}
    worst = 0.0
    for variant in ("initial", "transform"):
        tcfg = cfg.train.replace(residual_variant=variant, dropout=0.0)
        if tcfg.lambda1 == 0 or tcfg.lambda2 == 0:
            raise UsageError("gradcheck needs both lambda1 and lambda2 active")
        g, x, y = toy_problem(cfg)
        params = init_params(tcfg, x.shape[1], g.relations, cfg.seed)
        plan = EdgePlan(g)
        train = np.arange(g.num_nodes)

        def loss():
            logits, trace = forward(g, x, params, tcfg, "eval", plan=plan)
            return total_loss(logits, y, train, params, trace, tcfg)

        rep = nc.grad_check(loss, params, step=args.step)
        reports[variant] = rep.as_dict()
        worst = max(worst, rep.max_rel_err)
    doc = summary("gradcheck", max_rel_err=worst, tolerance=args.tolerance,
                  passed=bool(worst <= args.tolerance), variants=reports)
    if cfg.out:
        dump_json(out_dir(cfg) / "summary.json", doc)
    return doc


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetbot", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def common(p, data=True, out=True):
        p.add_argument("--config", help=f"JSON RunConfig path or bundled name {BUNDLED_CONFIGS}")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory")
        if out:
            p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), data=False)
    p.add_argument("--n-per-class", type=int)
    p.add_argument("--homophily", type=float, help="target edge homophily")
    p.add_argument("--separation", type=float, help="class mean separation in noise std units")
    p.add_argument("--mean-degree", type=float)
    p.add_argument("--human-same-share", type=float)

    common(sub.add_parser("analyze", help="homophily metrics and per-node histograms"))

    p = common(sub.add_parser("perturb", help="add cross-class edges down to a target homophily"))
    p.add_argument("--target", type=float, required=True)

    p = common(sub.add_parser("augment", help="inject the MLP k-NN relation"))
    p.add_argument("--k", type=int)
    p.add_argument("--sweep-k", help="comma list, e.g. 1,2,5,10")
    p.add_argument("--seeds", type=int, default=1)

    p = common(sub.add_parser("train", help="train the detector (or a sweep)"))
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--variants", help="comma list of variants for sweeps")
    p.add_argument("--k", type=int)
    p.add_argument("--sweep-k", help="comma list, e.g. 1,2,5,10")
    p.add_argument("--sweep-homophily", help="a:b:step or comma list, e.g. 0.1:0.9:0.1")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds for sweeps")

    p = common(sub.add_parser("evaluate", help="metrics of a checkpoint on one split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")

    p = common(sub.add_parser("export-attention", help="per-edge mean attention CSV"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", type=int, help="single layer instead of the mean over layers")

    p = common(sub.add_parser("gradcheck", help="finite-difference check of the full model"),
               data=False)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "analyze": cmd_analyze,
    "perturb": cmd_perturb,
    "augment": cmd_augment,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(resolve_config(args.config), args)
        if getattr(args, "seeds", 1) < 1:
            raise UsageError("--seeds must be at least 1")
        doc = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hetbot: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FloatingPointError, OSError) as exc:
        print(f"hetbot {args.command}: {exc}", file=sys.stderr)
        return 1
    if args.command == "gradcheck":
        print(f"max_rel_err={doc['max_rel_err']:.3e} tolerance={doc['tolerance']:.0e} "
              f"{'PASS' if doc['passed'] else 'FAIL'}")
        return 0 if doc["passed"] else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
