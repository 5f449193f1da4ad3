"""Command-line entry point: ``sgbgh {train,eval,diagnose,search,synth}``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .evaluation import (DEFAULT_KS, evaluate, hit_edge_set, layer_hamming_stats, write_metrics_csv,
                         write_similarity_csv)
from .graph import (EdgeListError, build_normalized_adjacency, load_edge_list_with_mapping, split_dataset,
                    write_edge_list, write_id_mapping)
from .model import DivergenceError, forward
from .retrieval import CodebookError, OpCounter, PackedCodebook, load_codebook, save_codebook, topk_search
from .synthetic import planted_blocks
from .training import train

log = logging.getLogger("sgbgh")

CODEBOOK_NAME = "codebook.sgbh"
_COMMAND_KEYS = {"codebook", "k", "groups", "neg_samples"}


class UsageError(Exception):
    pass


def _add_common(p, out_required=True):
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int)


def _add_split(p):
    p.add_argument("--edges", help="edge list file")
    p.add_argument("--split-ratio", type=float, dest="split_ratio")
    p.add_argument("--remap", action="store_const", const=True, default=None,
                   help="compact raw ids to dense indices")
    p.add_argument("--no-exclude-train", dest="exclude_train", action="store_const", const=False,
                   default=None, help="keep train neighbours in retrieval lists")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgbgh", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train embeddings and write a packed codebook")
    _add_common(p)
    _add_split(p)
    p.add_argument("--mode", choices=["lightgch", "sgbgh"])
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--layer-weights", dest="layer_weights")
    p.add_argument("--fourier-h", type=float, dest="fourier_h")
    p.add_argument("--fourier-n", type=int, dest="fourier_n")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", "--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta0", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--reg", "--lambda", type=float, dest="reg")
    p.add_argument("--reg-sum", dest="reg_mean", action="store_const", const=False, default=None,
                   help="plain sum L2 over touched rows instead of dividing by the batch size")
    p.add_argument("--centers", type=int)
    p.add_argument("--kmeans-iters", type=int, dest="kmeans_iters")
    p.add_argument("--sampler", choices=["uniform", "sign"])
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="Recall/NDCG@{20..100} of a codebook")
    _add_common(p)
    _add_split(p)
    p.add_argument("--codebook", required=True)

    p = sub.add_parser("diagnose", help="layer-wise Hamming-similarity statistics")
    _add_common(p)
    _add_split(p)
    p.add_argument("--codebook", required=True)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--neg-samples", type=int, default=2000)

    p = sub.add_parser("search", help="Top-K search for source queries")
    _add_common(p)
    _add_split(p)
    p.add_argument("--codebook", required=True)
    p.add_argument("--k", type=int, default=100)
    q = p.add_mutually_exclusive_group(required=True)
    q.add_argument("--queries", help="comma-separated source indices")
    q.add_argument("--random-queries", type=int, help="number of uniformly random source queries")

    p = sub.add_parser("synth", help="generate a planted block-bipartite edge list")
    _add_common(p)
    p.add_argument("--blocks", type=int, default=8)
    p.add_argument("--sources", type=int, default=40)
    p.add_argument("--destinations", type=int, default=60)
    p.add_argument("--p-in", type=float, default=0.6)
    p.add_argument("--p-out", type=float, default=0.02)
    return parser


def _run_values(args, keys):
    file_values = cfgmod.read_config(args.config) if args.config else {}
    # resolved configs written by eval/diagnose/search carry a few command-only keys
    file_values = {k: v for k, v in file_values.items() if k not in _COMMAND_KEYS}
    overrides = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    return cfgmod.resolve(file_values, overrides)


def _load_split(values):
    path = values.get("edges")
    if not path:
        raise UsageError("no edge list given (--edges or 'edges' in config)")
    if not os.path.exists(path):
        raise UsageError(f"edge list not found: {path}")
    graph, mapping = load_edge_list_with_mapping(path, remap=bool(values.get("remap", False)))
    split = split_dataset(graph, values["split_ratio"], cfgmod.derive_seed(values["seed"], "split"))
    return graph, split, mapping


def _load_codebook(path):
    if not os.path.exists(path):
        raise UsageError(f"codebook not found: {path}")
    return load_codebook(path)


def cmd_train(args) -> int:
    keys = list(cfgmod.KNOWN_KEYS)
    values = _run_values(args, keys)
    model_cfg, train_cfg, resolved = cfgmod.build_configs(values)
    graph, split, mapping = _load_split(values)
    out = args.out
    os.makedirs(out, exist_ok=True)
    resolved["out"] = out
    cfgmod.write_config(resolved, os.path.join(out, "config.txt"))
    if mapping is not None:
        write_id_mapping(mapping, os.path.join(out, "node_ids.txt"))
    log.info("graph |U|=%d |V|=%d |E|=%d train=%d test=%d", graph.num_sources, graph.num_destinations,
             graph.num_edges, len(split.train_edges), len(split.test_edges))
    log.info("fourier H=%s n=%s, layer weights %s", model_cfg.fourier_h, model_cfg.fourier_n,
             model_cfg.layer_weights)
    exclude = values.get("exclude_train", True)
    adj = build_normalized_adjacency(split)

    def eval_fn(table, epoch):
        _, final = forward(table, adj, model_cfg, split.num_sources)
        return evaluate(PackedCodebook.from_embedding(final), split, (20,), exclude).as_dict()

    result = train(split, model_cfg, train_cfg, eval_fn if len(split.test_edges) else None,
                   log_path=os.path.join(out, "train_log.csv"))
    _, final = forward(result.table, adj, model_cfg, split.num_sources)
    codebook = PackedCodebook.from_embedding(final)
    save_codebook(codebook, os.path.join(out, CODEBOOK_NAME))
    np.save(os.path.join(out, "table.npy"), result.table)
    if len(split.test_edges):
        report = evaluate(codebook, split, DEFAULT_KS, exclude)
        write_metrics_csv(report, os.path.join(out, "metrics.csv"))
        print(f"recall@20={report.recall[20]:.4f} ndcg@20={report.ndcg[20]:.4f}")
    print(f"wrote {os.path.join(out, CODEBOOK_NAME)}")
    return 0


def _checked_split(values, codebook):
    graph, split, _ = _load_split(values)
    if (codebook.num_sources, codebook.num_destinations) != (graph.num_sources, graph.num_destinations):
        raise UsageError(f"codebook has {codebook.num_sources} sources / {codebook.num_destinations} "
                         f"destinations but graph has {graph.num_sources} / {graph.num_destinations}")
    return split


def cmd_eval(args) -> int:
    values = _run_values(args, ["seed", "split_ratio", "edges", "remap", "exclude_train"])
    codebook = _load_codebook(args.codebook)
    split = _checked_split(values, codebook)
    os.makedirs(args.out, exist_ok=True)
    report = evaluate(codebook, split, DEFAULT_KS, values.get("exclude_train", True))
    write_metrics_csv(report, os.path.join(args.out, "metrics.csv"))
    cfgmod.write_config({**values, "codebook": args.codebook}, os.path.join(args.out, "config.txt"))
    for k in report.ks:
        print(f"recall@{k}={report.recall[k]:.4f} ndcg@{k}={report.ndcg[k]:.4f}")
    return 0


def cmd_diagnose(args) -> int:
    values = _run_values(args, ["seed", "split_ratio", "edges", "remap", "exclude_train"])
    codebook = _load_codebook(args.codebook)
    split = _checked_split(values, codebook)
    os.makedirs(args.out, exist_ok=True)
    hits = hit_edge_set(codebook, split, 100, values.get("exclude_train", True))
    rows = layer_hamming_stats(codebook, hits, split, args.groups, args.neg_samples,
                               cfgmod.derive_seed(values["seed"], "diagnose"))
    write_similarity_csv(rows, os.path.join(args.out, "similarity.csv"))
    cfgmod.write_config({**values, "codebook": args.codebook, "groups": args.groups,
                         "neg_samples": args.neg_samples}, os.path.join(args.out, "config.txt"))
    print(f"hit edges: {len(hits)}")
    return 0


def cmd_search(args) -> int:
    values = _run_values(args, ["seed", "split_ratio", "edges", "remap", "exclude_train"])
    codebook = _load_codebook(args.codebook)
    train_nbrs = None
    if values.get("edges") and values.get("exclude_train", True):
        train_nbrs = _checked_split(values, codebook).train_neighbors()
    if args.queries is not None:
        raw = [s.strip() for s in args.queries.split(",") if s.strip()]
    else:
        rng = np.random.default_rng(cfgmod.derive_seed(values["seed"], "queries"))
        raw = [str(q) for q in rng.integers(0, codebook.num_sources, size=args.random_queries)]
    os.makedirs(args.out, exist_ok=True)
    counter = OpCounter()
    path = os.path.join(args.out, "search.tsv")
    elapsed = 0.0
    with open(path, "w") as fh:
        fh.write("query_id\trank\tdest_id\tscore\n")
        for q in raw:
            try:
                u = int(q)
                start = time.perf_counter()
                res = topk_search(codebook, u, args.k, train_nbrs[u] if train_nbrs is not None else None, counter)
                elapsed += time.perf_counter() - start
            except (ValueError, IndexError) as exc:
                fh.write(f"{q}\tERROR\t\t{exc}\n")
                continue
            for rank, (v, s) in enumerate(zip(res.indices, res.scores), start=1):
                fh.write(f"{u}\t{rank}\t{v}\t{float(s)!r}\n")
        summary = f"flops={counter.flops} bops={counter.bops} ms={elapsed * 1000:.3f}"
        fh.write(f"# {summary}\n")
    cfgmod.write_config({**values, "codebook": args.codebook, "k": args.k}, os.path.join(args.out, "config.txt"))
    print(summary)
    return 0


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        graph = planted_blocks(args.sources, args.destinations, args.blocks, args.p_in, args.p_out, seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "edges.tsv")
    write_edge_list(graph, path)
    cfgmod.write_config({"blocks": args.blocks, "sources": args.sources, "destinations": args.destinations,
                         "p_in": args.p_in, "p_out": args.p_out, "seed": seed},
                        os.path.join(args.out, "synth_config.txt"))
    print(f"wrote {path} ({graph.num_edges} edges)")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "search": cmd_search,
            "synth": cmd_synth}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError, EdgeListError, CodebookError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
