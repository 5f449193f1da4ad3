"""Recall/NDCG in Top-100 retrieval and layer-wise Hamming-similarity statistics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .graph import DatasetSplit
from .model import FinalEmbedding, LayerEmbeddings
from .retrieval import PackedCodebook, pack_codes, same_sign_count, score_destinations, top_k_indices

DEFAULT_KS = (20, 40, 60, 80, 100)
CANDIDATES = 100
_PAIR_CHUNK = 1 << 20


def recall_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    relevant = set(int(v) for v in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for v in list(ranked)[:k] if int(v) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Sequence[int], relevant, k: int) -> float:
    relevant = set(int(v) for v in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = sum(1.0 / math.log2(r + 2) for r, v in enumerate(list(ranked)[:k]) if int(v) in relevant)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
    return dcg / idcg


@dataclass
class MetricsReport:
    ks: tuple
    recall: Dict[int, float]
    ndcg: Dict[int, float]
    num_evaluated: int
    similarity: List[dict] = field(default_factory=list)

    def as_dict(self) -> Dict[str, float]:
        out = {}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
            out[f"ndcg@{k}"] = self.ndcg[k]
        return out


def rank_sources(codebook: PackedCodebook, split: DatasetSplit, sources, k: int = CANDIDATES,
                 exclude_train: bool = True, chunk: int = 256) -> Dict[int, np.ndarray]:
    """Top-``k`` destination list per source, one exhaustive scan each."""
    train_nbrs = split.train_neighbors() if exclude_train else None
    out = {}
    sources = list(sources)
    for lo in range(0, len(sources), chunk):
        part = sources[lo:lo + chunk]
        scores = score_destinations(codebook, part)
        for row, u in zip(scores, part):
            out[u] = top_k_indices(row, k, train_nbrs[u] if exclude_train else None)[0]
    return out


def _check_sizes(codebook: PackedCodebook, split: DatasetSplit):
    if (codebook.num_sources, codebook.num_destinations) != (split.num_sources, split.num_destinations):
        raise ValueError(f"codebook has {codebook.num_sources} sources / {codebook.num_destinations} "
                         f"destinations, graph has {split.num_sources} / {split.num_destinations}")


def evaluate(codebook: PackedCodebook, split: DatasetSplit, ks: Sequence[int] = DEFAULT_KS,
             exclude_train: bool = True) -> MetricsReport:
    """Mean Recall@K / NDCG@K over sources with at least one test edge.

    One Top-``max(100, max(ks))`` scan per source; every K is a prefix of it.
    """
    _check_sizes(codebook, split)
    ks = tuple(sorted(int(k) for k in ks))
    test = split.test_neighbors()
    sources = [u for u, t in enumerate(test) if len(t)]
    if not sources:
        raise ValueError("split has no test edges")
    ranked = rank_sources(codebook, split, sources, max(CANDIDATES, ks[-1]), exclude_train)
    recall = {k: 0.0 for k in ks}
    ndcg = {k: 0.0 for k in ks}
    for u in sources:
        for k in ks:
            recall[k] += recall_at_k(ranked[u], test[u], k)
            ndcg[k] += ndcg_at_k(ranked[u], test[u], k)
    n = len(sources)
    return MetricsReport(ks, {k: v / n for k, v in recall.items()}, {k: v / n for k, v in ndcg.items()}, n)


def hit_edge_set(codebook: PackedCodebook, split: DatasetSplit, k: int = CANDIDATES,
                 exclude_train: bool = True) -> np.ndarray:
    """Test edges whose destination appears in the source's Top-``k`` list."""
    _check_sizes(codebook, split)
    test = split.test_neighbors()
    sources = [u for u, t in enumerate(test) if len(t)]
    ranked = rank_sources(codebook, split, sources, k, exclude_train)
    hits = []
    for u in sources:
        for v in np.intersect1d(ranked[u], test[u]):
            hits.append((u, int(v)))
    return np.array(hits, dtype=np.int64).reshape(-1, 2)


def binary_codes(obj) -> np.ndarray:
    """``(N, L+1, d)`` +-1 codes from a codebook, final embedding or layer state."""
    if isinstance(obj, PackedCodebook):
        return obj.codes()
    if isinstance(obj, FinalEmbedding):
        return obj.codes
    if isinstance(obj, LayerEmbeddings):
        return np.stack(obj.codes, axis=1)
    raise TypeError(f"cannot extract binary codes from {type(obj).__name__}")


def sample_non_neighbors(split: DatasetSplit, source: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` destinations (with replacement) linked to ``source`` in neither train nor test."""
    nv = split.num_destinations
    linked = split.linked_count(source)
    if linked >= nv:
        return np.zeros(0, dtype=np.int64)
    if 2 * linked > nv:
        pool = np.flatnonzero(~split.in_any(np.full(nv, source), np.arange(nv)))
        return pool[rng.integers(0, len(pool), size=count)]
    out = rng.integers(0, nv, size=count)
    bad = np.flatnonzero(split.in_any(np.full(count, source), out))
    while len(bad):
        out[bad] = rng.integers(0, nv, size=len(bad))
        bad = bad[split.in_any(np.full(len(bad), source), out[bad])]
    return out


def layer_hamming_stats(state, hit_edges: np.ndarray, split: DatasetSplit, groups: int = 8,
                        neg_samples: int = 2000, seed: int = 0) -> List[dict]:
    """Per (layer, group, kind) mean Hamming similarity.

    Sources are shuffled into ``groups`` groups. ``kind`` is ``neighbor``
    (hit test edges) or ``non-neighbor`` (``neg_samples`` random destinations
    per source outside train and test). A group with no pairs reports
    ``mean=None``.
    """
    codes = binary_codes(state)
    nu = split.num_sources
    d = codes.shape[2]
    layers = codes.shape[1]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(nu)
    group_of = np.empty(nu, dtype=np.int64)
    for g, members in enumerate(np.array_split(perm, groups)):
        group_of[members] = g

    neg_u, neg_v = [], []
    for u in range(nu):
        vs = sample_non_neighbors(split, u, neg_samples, rng)
        neg_u.append(np.full(len(vs), u))
        neg_v.append(vs)
    pairs = {
        "neighbor": (hit_edges[:, 0], hit_edges[:, 1]),
        "non-neighbor": (np.concatenate(neg_u) if neg_u else np.zeros(0, np.int64),
                         np.concatenate(neg_v) if neg_v else np.zeros(0, np.int64)),
    }
    packed = pack_codes(codes)
    rows = []
    for kind, (us, vs) in pairs.items():
        us = np.asarray(us, dtype=np.int64)
        vs = np.asarray(vs, dtype=np.int64) + nu
        for layer in range(layers):
            sums = np.zeros(groups)
            for lo in range(0, len(us), _PAIR_CHUNK):
                cu, cv = us[lo:lo + _PAIR_CHUNK], vs[lo:lo + _PAIR_CHUNK]
                sim = same_sign_count(packed[cu, layer], packed[cv, layer], d) / d
                sums += np.bincount(group_of[cu], weights=sim, minlength=groups)
            counts = np.bincount(group_of[us], minlength=groups)
            for g in range(groups):
                n = int(counts[g])
                rows.append({"layer": layer, "group": g, "kind": kind,
                             "mean": float(sums[g] / n) if n else None, "count": n})
    return rows


def group_average(rows: List[dict], kind: str, layer: int) -> Optional[float]:
    """Average of the non-missing group means for one (kind, layer)."""
    vals = [r["mean"] for r in rows if r["kind"] == kind and r["layer"] == layer and r["mean"] is not None]
    return float(np.mean(vals)) if vals else None


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "recall", "ndcg"])
        for k in report.ks:
            w.writerow([k, repr(report.recall[k]), repr(report.ndcg[k])])


def read_metrics_csv(path) -> Dict[int, tuple]:
    with open(path, newline="") as fh:
        return {int(r["k"]): (float(r["recall"]), float(r["ndcg"])) for r in csv.DictReader(fh)}


def write_similarity_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "group", "kind", "mean", "count"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "mean": "" if r["mean"] is None else repr(r["mean"])})
