"""Planted block-bipartite graphs for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .graph import BipartiteGraph


def block_ids(n: int, blocks: int) -> np.ndarray:
    """Contiguous, near-equal block assignment of ``n`` nodes."""
    return (np.arange(n) * blocks) // n


def planted_blocks(num_sources: int, num_destinations: int, blocks: int, p_in: float,
                   p_out: float, seed: int = 0) -> BipartiteGraph:
    """Each (u, v) pair is an edge with probability ``p_in`` inside a block, ``p_out`` across."""
    if blocks < 1:
        raise ValueError("need at least one block")
    if num_sources < 1 or num_destinations < 1:
        raise ValueError("need at least one source and one destination")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name}={p} is not a probability")
    if p_in == 0.0 and p_out == 0.0:
        raise ValueError("p_in and p_out are both zero: the graph would be empty")
    rng = np.random.default_rng(seed)
    bu = block_ids(num_sources, blocks)
    bv = block_ids(num_destinations, blocks)
    prob = np.where(bu[:, None] == bv[None, :], p_in, p_out)
    mask = rng.random((num_sources, num_destinations)) < prob
    u, v = np.nonzero(mask)
    return BipartiteGraph(num_sources, num_destinations, np.stack([u, v], axis=1))


def expected_edges(num_sources: int, num_destinations: int, blocks: int, p_in: float, p_out: float):
    """Mean and variance of the edge count (sum of independent Bernoullis)."""
    bu = block_ids(num_sources, blocks)
    bv = block_ids(num_destinations, blocks)
    prob = np.where(bu[:, None] == bv[None, :], p_in, p_out)
    return float(prob.sum()), float((prob * (1 - prob)).sum())
