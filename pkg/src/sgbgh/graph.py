"""Bipartite interaction graph: loading, train/test split, normalized adjacency.

Sources occupy node ids ``0..|U|-1`` and destinations ``|U|..|U|+|V|-1`` in
every stacked (all-node) matrix used by the model.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp


class EdgeListError(ValueError):
    """Raised for malformed or empty edge-list files."""


@dataclass(frozen=True)
class BipartiteGraph:
    num_sources: int
    num_destinations: int
    edges: np.ndarray  # (E, 2) int64, rows sorted lexicographically, unique

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size:
            if edges.min() < 0:
                raise ValueError("negative node index")
            if edges[:, 0].max() >= self.num_sources:
                raise ValueError("source index out of range")
            if edges[:, 1].max() >= self.num_destinations:
                raise ValueError("destination index out of range")
        edges = np.unique(edges, axis=0)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_nodes(self) -> int:
        return self.num_sources + self.num_destinations

    def source_neighbors(self) -> List[np.ndarray]:
        return _group(self.edges[:, 0], self.edges[:, 1], self.num_sources)

    def destination_neighbors(self) -> List[np.ndarray]:
        return _group(self.edges[:, 1], self.edges[:, 0], self.num_destinations)

    def degrees(self) -> Tuple[np.ndarray, np.ndarray]:
        du = np.bincount(self.edges[:, 0], minlength=self.num_sources)
        dv = np.bincount(self.edges[:, 1], minlength=self.num_destinations)
        return du, dv


def _group(keys: np.ndarray, values: np.ndarray, n: int) -> List[np.ndarray]:
    order = np.lexsort((values, keys))
    keys, values = keys[order], values[order]
    bounds = np.searchsorted(keys, np.arange(n + 1))
    return [values[bounds[i]:bounds[i + 1]] for i in range(n)]


@dataclass(frozen=True)
class DatasetSplit:
    graph: BipartiteGraph
    train_edges: np.ndarray
    test_edges: np.ndarray
    _train_keys: np.ndarray = field(init=False, repr=False)
    _all_keys: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nv = self.graph.num_destinations
        train = np.asarray(self.train_edges, dtype=np.int64).reshape(-1, 2)
        test = np.asarray(self.test_edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "train_edges", train)
        object.__setattr__(self, "test_edges", test)
        tk = np.sort(train[:, 0] * nv + train[:, 1])
        ak = np.sort(np.concatenate([tk, test[:, 0] * nv + test[:, 1]]))
        object.__setattr__(self, "_train_keys", tk)
        object.__setattr__(self, "_all_keys", ak)

    @property
    def num_sources(self) -> int:
        return self.graph.num_sources

    @property
    def num_destinations(self) -> int:
        return self.graph.num_destinations

    def train_graph(self) -> BipartiteGraph:
        return BipartiteGraph(self.num_sources, self.num_destinations, self.train_edges)

    def train_neighbors(self) -> List[np.ndarray]:
        return _group(self.train_edges[:, 0], self.train_edges[:, 1], self.num_sources)

    def test_neighbors(self) -> List[np.ndarray]:
        return _group(self.test_edges[:, 0], self.test_edges[:, 1], self.num_sources)

    def in_train(self, sources, destinations) -> np.ndarray:
        """Vectorized membership test of (u, v) pairs in the train edge set."""
        return _contains(self._train_keys, sources, destinations, self.num_destinations)

    def in_any(self, sources, destinations) -> np.ndarray:
        return _contains(self._all_keys, sources, destinations, self.num_destinations)

    def linked_count(self, source: int) -> int:
        """Number of train plus test edges of ``source``."""
        nv = self.num_destinations
        keys = self._all_keys
        return int(np.searchsorted(keys, (source + 1) * nv) - np.searchsorted(keys, source * nv))


def _contains(sorted_keys, sources, destinations, nv) -> np.ndarray:
    keys = np.asarray(sources, dtype=np.int64) * nv + np.asarray(destinations, dtype=np.int64)
    if len(sorted_keys) == 0:
        return np.zeros(keys.shape, dtype=bool)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    return sorted_keys[pos] == keys


def _parse_header(line: str) -> Optional[Tuple[int, int]]:
    parts = line.lstrip("#").split()
    if len(parts) == 2 and all(p.isdigit() for p in parts):
        return int(parts[0]), int(parts[1])
    return None


def load_edge_list(path, remap: bool = False) -> BipartiteGraph:
    """Read a ``<u> <v>`` edge list.

    Lines starting with ``#`` are comments, except a first line of the form
    ``# <num_sources> <num_destinations>`` which fixes the node counts.
    With ``remap=True`` raw ids are compacted to dense 0-based indices in
    order of first appearance; use :func:`load_edge_list_with_mapping` to
    also get the mapping.
    """
    return load_edge_list_with_mapping(path, remap=remap)[0]


def load_edge_list_with_mapping(path, remap: bool = False):
    if not os.path.exists(path):
        raise FileNotFoundError(f"edge list not found: {path}")
    header = None
    rows: List[Tuple[int, int]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if header is None and not rows:
                    header = _parse_header(line)
                continue
            parts = line.split()
            if len(parts) != 2 or not (parts[0].isdigit() and parts[1].isdigit()):
                raise EdgeListError(f"{path}:{lineno}: malformed edge line {line!r}")
            rows.append((int(parts[0]), int(parts[1])))
    if not rows:
        raise EdgeListError(f"{path}: no edges")
    edges = np.array(rows, dtype=np.int64)

    mapping = None
    if remap:
        src_ids, src_idx = _first_appearance(edges[:, 0])
        dst_ids, dst_idx = _first_appearance(edges[:, 1])
        edges = np.stack([src_idx, dst_idx], axis=1)
        mapping = (src_ids, dst_ids)
        nu, nv = len(src_ids), len(dst_ids)
    else:
        nu, nv = int(edges[:, 0].max()) + 1, int(edges[:, 1].max()) + 1
        if header is not None:
            if header[0] < nu or header[1] < nv:
                raise EdgeListError(f"{path}: header sizes {header} smaller than max index + 1")
            nu, nv = header
    return BipartiteGraph(nu, nv, edges), mapping


def _first_appearance(raw: np.ndarray):
    ids, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return ids[order], rank[inverse]


def write_edge_list(graph: BipartiteGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {graph.num_sources} {graph.num_destinations}\n")
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")


def write_id_mapping(mapping, path) -> None:
    """Two-column sidecar: ``<kind>:<dense index>\t<raw id>``."""
    src_ids, dst_ids = mapping
    with open(path, "w") as fh:
        for i, raw in enumerate(src_ids):
            fh.write(f"u:{i}\t{raw}\n")
        for i, raw in enumerate(dst_ids):
            fh.write(f"v:{i}\t{raw}\n")


def read_id_mapping(path):
    src: Dict[int, int] = {}
    dst: Dict[int, int] = {}
    with open(path) as fh:
        for line in fh:
            key, raw = line.split()
            kind, idx = key.split(":")
            (src if kind == "u" else dst)[int(idx)] = int(raw)
    return (np.array([src[i] for i in range(len(src))], dtype=np.int64),
            np.array([dst[i] for i in range(len(dst))], dtype=np.int64))


def split_dataset(graph: BipartiteGraph, ratio: float = 0.8, seed: int = 0) -> DatasetSplit:
    """Per-source stratified split: ``round(ratio * deg)`` train edges, at least one."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for u, nbrs in enumerate(graph.source_neighbors()):
        deg = len(nbrs)
        if deg == 0:
            continue
        n_train = max(1, int(np.floor(ratio * deg + 0.5)))
        perm = nbrs[rng.permutation(deg)]
        train_parts.append(np.stack([np.full(n_train, u), np.sort(perm[:n_train])], axis=1))
        if n_train < deg:
            test_parts.append(np.stack([np.full(deg - n_train, u), np.sort(perm[n_train:])], axis=1))
    empty = np.zeros((0, 2), dtype=np.int64)
    train = np.concatenate(train_parts) if train_parts else empty
    test = np.concatenate(test_parts) if test_parts else empty
    return DatasetSplit(graph, train, test)


def build_normalized_adjacency(split) -> sp.csr_matrix:
    """Symmetric ``D^-1/2 A D^-1/2`` over all nodes, degrees from train edges.

    Accepts a :class:`DatasetSplit` or a :class:`BipartiteGraph` (all edges
    treated as training edges).
    """
    if isinstance(split, DatasetSplit):
        nu, nv, edges = split.num_sources, split.num_destinations, split.train_edges
    else:
        nu, nv, edges = split.num_sources, split.num_destinations, split.edges
    if len(edges) == 0:
        raise ValueError("no training edges")
    n = nu + nv
    rows = np.concatenate([edges[:, 0], edges[:, 1] + nu])
    cols = np.concatenate([edges[:, 1] + nu, edges[:, 0]])
    deg = np.bincount(rows, minlength=n).astype(np.float64)
    vals = 1.0 / (np.sqrt(deg[rows]) * np.sqrt(deg[cols]))
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    adj.sort_indices()
    return adj

