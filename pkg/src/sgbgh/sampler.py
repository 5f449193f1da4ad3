"""Negative samplers: uniform, and sign-guided via K-means hash centers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import hard_sign

log = logging.getLogger(__name__)

MAX_RETRIES = 10


class NoNegativeError(ValueError):
    """Raised when a source is linked to every destination."""


@dataclass
class HashCenterSet:
    centers: np.ndarray          # (k, d) float64, entries in [-1, 1]
    assignments: np.ndarray      # (|V|,) cluster index per destination
    epoch: int = 0
    distortion: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def members(self) -> List[np.ndarray]:
        order = np.argsort(self.assignments, kind="stable")
        bounds = np.searchsorted(self.assignments[order], np.arange(self.k + 1))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.k)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


def _sq_dists(codes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||x||^2 == d for +-1 codes
    d = codes.shape[1]
    return d - 2.0 * codes @ centers.T + (centers ** 2).sum(axis=1)[None, :]


def kmeans_binary(codes: np.ndarray, k: int, max_iters: int = 50, seed: int = 0,
                  epoch: int = 0) -> HashCenterSet:
    """Lloyd's algorithm on +-1 codes.

    Centers start at ``k`` distinct codes drawn at random. Clusters that go
    empty are re-seeded with the point farthest from its own center. If
    there are fewer distinct codes than ``k``, ``k`` shrinks to match.
    """
    codes = np.asarray(codes, dtype=np.float64)
    n = codes.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    distinct = np.unique(codes, axis=0)
    if len(distinct) < k:
        log.debug("only %d distinct codes; reducing k from %d", len(distinct), k)
        k = len(distinct)
    centers = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))].copy()

    history: List[float] = []
    assign = None
    for _ in range(max_iters):
        dist = _sq_dists(codes, centers)
        new_assign = dist.argmin(axis=1)
        history.append(float(np.maximum(dist[np.arange(n), new_assign], 0.0).sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        centers, assign = _update(codes, assign, centers)
    else:
        dist = _sq_dists(codes, centers)
        assign = dist.argmin(axis=1)
        history.append(float(np.maximum(dist[np.arange(n), assign], 0.0).sum()))
    return HashCenterSet(centers, assign, epoch, history)


def _update(codes, assign, centers):
    k = centers.shape[0]
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros_like(centers)
    np.add.at(sums, assign, codes)
    new = centers.copy()
    nonempty = counts > 0
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    empty = np.flatnonzero(~nonempty)
    if len(empty):
        own = ((codes - new[assign]) ** 2).sum(axis=1)
        taken = np.zeros(len(codes), dtype=bool)
        assign = assign.copy()
        for c in empty:
            own_masked = np.where(taken, -1.0, own)
            far = int(own_masked.argmax())
            taken[far] = True
            new[c] = codes[far]
            assign[far] = c
    return new, assign


def center_selection_probs(q_u0: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Softmax over dot products with the hash centers (row-wise for a batch)."""
    logits = np.asarray(q_u0, dtype=np.float64) @ centers.T
    logits = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=-1, keepdims=True)


def refresh_centers(table: np.ndarray, num_sources: int, k: int, seed: int = 0,
                    epoch: int = 0, max_iters: int = 50) -> HashCenterSet:
    """Cluster the layer-0 binary codes of all destination nodes.

    ``table`` is x^(0); sign(alpha * b) == b, so the rescaling factor drops out.
    """
    codes = hard_sign(np.asarray(table)[num_sources:])
    return kmeans_binary(codes, min(k, codes.shape[0]), max_iters, seed=seed, epoch=epoch)


class UniformSampler:
    """Uniform over destinations outside each source's train neighbourhood."""

    def __init__(self, split, rng: np.random.Generator):
        self.split = split
        self.rng = rng
        self.num_destinations = split.num_destinations
        deg = np.bincount(split.train_edges[:, 0], minlength=split.num_sources)
        self._saturated = deg >= self.num_destinations

    def _check(self, sources):
        bad = self._saturated[sources]
        if bad.any():
            raise NoNegativeError(f"source {int(sources[bad][0])} is linked to every destination")

    def sample(self, sources: np.ndarray, q_u0: Optional[np.ndarray] = None) -> np.ndarray:
        sources = np.asarray(sources, dtype=np.int64)
        self._check(sources)
        return self._uniform(sources)

    def _uniform(self, sources, out=None, todo=None):
        if out is None:
            out = np.empty(len(sources), dtype=np.int64)
            todo = np.arange(len(sources))
        while len(todo):
            draw = self.rng.integers(0, self.num_destinations, size=len(todo))
            out[todo] = draw
            todo = todo[self.split.in_train(sources[todo], draw)]
        return out


class SignGuidedSampler(UniformSampler):
    """Pick a hash center by softmax(q_u^(0) . c), then a uniform member of it.

    Up to ``max_retries`` redraws when the member is a train neighbour, then
    a global uniform fallback.
    """

    def __init__(self, split, rng: np.random.Generator, centers: HashCenterSet,
                 max_retries: int = MAX_RETRIES):
        super().__init__(split, rng)
        self.max_retries = max_retries
        self.set_centers(centers)

    def set_centers(self, centers: HashCenterSet):
        self.centers = centers
        order = np.argsort(centers.assignments, kind="stable")
        self._flat = order
        self._offsets = np.searchsorted(centers.assignments[order], np.arange(centers.k + 1))
        self._sizes = np.diff(self._offsets)

    def draw_centers(self, probs: np.ndarray) -> np.ndarray:
        cum = np.cumsum(probs, axis=1)
        r = self.rng.random(len(probs))[:, None] * cum[:, -1:]
        return np.minimum((cum <= r).sum(axis=1), probs.shape[1] - 1)

    def sample(self, sources: np.ndarray, q_u0: np.ndarray) -> np.ndarray:
        sources = np.asarray(sources, dtype=np.int64)
        self._check(sources)
        probs = center_selection_probs(q_u0, self.centers.centers)
        probs = probs * (self._sizes > 0)
        out = np.empty(len(sources), dtype=np.int64)
        todo = np.arange(len(sources))
        for _ in range(self.max_retries):
            if not len(todo):
                break
            c = self.draw_centers(probs[todo])
            pick = (self.rng.random(len(todo)) * self._sizes[c]).astype(np.int64)
            out[todo] = self._flat[self._offsets[c] + pick]
            todo = todo[self.split.in_train(sources[todo], out[todo])]
        if len(todo):
            self._uniform(sources, out, todo)
        return out


def sample_negative(q_u0, centers: HashCenterSet, train_neighbors, num_destinations: int,
                    rng: np.random.Generator, max_retries: int = MAX_RETRIES) -> int:
    """Single sign-guided draw for one source with neighbour set ``train_neighbors``."""
    nbrs = set(int(v) for v in train_neighbors)
    if len(nbrs) >= num_destinations:
        raise NoNegativeError("source is linked to every destination")
    probs = center_selection_probs(q_u0, centers.centers)
    members = centers.members
    probs = probs * np.array([len(m) > 0 for m in members])
    probs = probs / probs.sum()
    for _ in range(max_retries):
        c = int(rng.choice(len(probs), p=probs))
        v = int(members[c][rng.integers(len(members[c]))])
        if v not in nbrs:
            return v
    return sample_negative_uniform(num_destinations, nbrs, rng)


def sample_negative_uniform(num_destinations: int, train_neighbors, rng: np.random.Generator) -> int:
    nbrs = set(int(v) for v in train_neighbors)
    if len(nbrs) >= num_destinations:
        raise NoNegativeError("source is linked to every destination")
    while True:
        v = int(rng.integers(num_destinations))
        if v not in nbrs:
            return v
