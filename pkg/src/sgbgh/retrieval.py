"""Bit-packed mixed-precision codebook and exact Top-K search via popcount.

Binary file layout (little-endian)::

    b"SGBH" | u16 version=1 | u32 num_nodes | u32 num_sources | u32 L | u32 d
    then for each node, for each layer l = 0..L:
        f32 alpha | ceil(d/8) code bytes (bit j of byte k <=> dimension 8k+j, 1 <=> +1)
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import FinalEmbedding

MAGIC = b"SGBH"
VERSION = 1
_HEADER = struct.Struct("<4sHIIII")
HEADER_SIZE = _HEADER.size  # 22


class CodebookError(ValueError):
    pass


class BadMagicError(CodebookError):
    pass


class BadVersionError(CodebookError):
    pass


class TruncatedCodebookError(CodebookError):
    pass


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """+-1 codes (..., d) -> uint8 (..., ceil(d/8)); padding bits are zero."""
    bits = (np.asarray(codes) > 0).astype(np.uint8)
    return np.packbits(bits, axis=-1, bitorder="little")


def unpack_codes(packed: np.ndarray, d: int) -> np.ndarray:
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), axis=-1, count=d, bitorder="little")
    return (2 * bits.astype(np.int8) - 1).astype(np.int8)


def _pad_mask(d: int) -> np.ndarray:
    nbytes = (d + 7) // 8
    mask = np.full(nbytes, 0xFF, dtype=np.uint8)
    if d % 8:
        mask[-1] = (1 << (d % 8)) - 1
    return mask


@dataclass
class OpCounter:
    flops: int = 0
    bops: int = 0


@dataclass
class PackedCodebook:
    num_sources: int
    layers: int
    dim: int
    alphas: np.ndarray  # (N, L+1) float32
    bits: np.ndarray    # (N, L+1, ceil(d/8)) uint8

    def __post_init__(self):
        self.alphas = np.ascontiguousarray(self.alphas, dtype=np.float32)
        self.bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        n = self.alphas.shape[0]
        if self.alphas.shape != (n, self.layers + 1):
            raise CodebookError(f"alphas shape {self.alphas.shape} inconsistent with L={self.layers}")
        if self.bits.shape != (n, self.layers + 1, (self.dim + 7) // 8):
            raise CodebookError(f"bits shape {self.bits.shape} inconsistent with d={self.dim}")
        self.bits &= _pad_mask(self.dim)

    @classmethod
    def from_embedding(cls, final: FinalEmbedding) -> "PackedCodebook":
        return cls(final.num_sources, final.layers, final.dim, final.alphas, pack_codes(final.codes))

    @property
    def num_nodes(self) -> int:
        return self.alphas.shape[0]

    @property
    def num_destinations(self) -> int:
        return self.num_nodes - self.num_sources

    def codes(self) -> np.ndarray:
        """Unpacked +-1 codes, (N, L+1, d) int8."""
        return unpack_codes(self.bits, self.dim)

    def to_embedding(self) -> FinalEmbedding:
        return FinalEmbedding(self.alphas.astype(np.float64), self.codes(), self.num_sources)

    def payload_bits(self) -> int:
        return self.num_nodes * (self.layers + 1) * (32 + 8 * self.bits.shape[-1])

    def __eq__(self, other):
        if not isinstance(other, PackedCodebook):
            return NotImplemented
        return (self.num_sources, self.layers, self.dim) == (other.num_sources, other.layers, other.dim) \
            and np.array_equal(self.alphas.view(np.uint32), other.alphas.view(np.uint32)) \
            and np.array_equal(self.bits, other.bits)


_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def popcount(a: np.ndarray) -> np.ndarray:
    """Per-element set-bit count of a uint8 array."""
    return np.bitwise_count(a) if hasattr(np, "bitwise_count") else _POPCOUNT[a]


def same_sign_count(bits_u: np.ndarray, bits_v: np.ndarray, d: int) -> np.ndarray:
    """``d - popcount(u XOR v)`` over the last axis; broadcasts."""
    x = np.bitwise_xor(bits_u, bits_v) & _pad_mask(d)
    return d - popcount(x).sum(axis=-1, dtype=np.int64)


def hamming_similarity(bits_u, bits_v, d: int):
    return same_sign_count(bits_u, bits_v, d) / d


def mixed_dot(alpha_u, bits_u, alpha_v, bits_v, d: int, counter: Optional[OpCounter] = None):
    """Sum over layers of ``alpha_u * alpha_v * (2 * same_sign_count - d)``.

    ``alpha_*`` have shape ``(..., L+1)`` and ``bits_*`` ``(..., L+1, nbytes)``.
    """
    ssc = same_sign_count(bits_u, bits_v, d)
    au = np.asarray(alpha_u, dtype=np.float64)
    av = np.asarray(alpha_v, dtype=np.float64)
    per_layer = (au * av) * (2 * ssc - d)
    if counter is not None:
        segments = int(np.prod(ssc.shape))
        counter.flops += segments
        counter.bops += segments * d
    return per_layer.sum(axis=-1)


def score_destinations(codebook: PackedCodebook, sources, counter: Optional[OpCounter] = None) -> np.ndarray:
    """Mixed-precision scores of each source in ``sources`` against every destination."""
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    ns = codebook.num_sources
    av = codebook.alphas[ns:]
    bv = codebook.bits[ns:]
    out = np.empty((len(sources), codebook.num_destinations))
    for i, u in enumerate(sources):
        out[i] = mixed_dot(codebook.alphas[u], codebook.bits[u], av, bv, codebook.dim, counter)
    return out


def top_k_indices(scores: np.ndarray, k: int, excluded: Optional[np.ndarray] = None):
    """Descending-score Top-K of a 1-D array, ties broken by ascending index.

    Returns ``(indices, truncated)``; excluded positions never appear.
    """
    scores = np.asarray(scores, dtype=np.float64)
    valid = np.ones(len(scores), dtype=bool)
    if excluded is not None and len(excluded):
        valid[np.asarray(excluded, dtype=np.int64)] = False
    cand = np.flatnonzero(valid)
    truncated = k > len(cand)
    if truncated or k >= len(cand):
        pool = cand
    else:
        part = np.argpartition(-scores[cand], k - 1)[:k]
        kth = scores[cand[part]].min()
        pool = cand[scores[cand] >= kth]
    order = np.lexsort((pool, -scores[pool]))
    return pool[order][:k], truncated


@dataclass
class SearchResult:
    indices: np.ndarray  # destination indices (0-based within V)
    scores: np.ndarray
    truncated: bool = False
    counter: OpCounter = field(default_factory=OpCounter)

    def __len__(self):
        return len(self.indices)


def topk_search(codebook: PackedCodebook, query: int, k: int, exclude=None,
                counter: Optional[OpCounter] = None) -> SearchResult:
    """Exhaustive scan of all destinations for source ``query``.

    ``exclude`` holds destination indices (typically the train neighbours)
    that are scored but never returned.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= query < codebook.num_sources:
        raise IndexError(f"query {query} is not a source index (0..{codebook.num_sources - 1})")
    counter = counter if counter is not None else OpCounter()
    scores = score_destinations(codebook, [query], counter)[0]
    idx, truncated = top_k_indices(scores, k, exclude)
    return SearchResult(idx, scores[idx], truncated, counter)


def storage_bits(num_sources: int, num_destinations: int, layers: int, dim: int) -> int:
    return (num_sources + num_destinations) * (layers + 1) * (dim + 32)


def _record_dtype(layers: int, dim: int) -> np.dtype:
    return np.dtype([("alpha", "<f4"), ("bits", "u1", ((dim + 7) // 8,))])


def save_codebook(codebook: PackedCodebook, path) -> None:
    rec = np.empty((codebook.num_nodes, codebook.layers + 1), dtype=_record_dtype(codebook.layers, codebook.dim))
    rec["alpha"] = codebook.alphas
    rec["bits"] = codebook.bits
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, codebook.num_nodes, codebook.num_sources,
                              codebook.layers, codebook.dim))
        fh.write(rec.tobytes())


def load_codebook(path) -> PackedCodebook:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a codebook file (bad magic)")
    if len(data) < HEADER_SIZE:
        raise TruncatedCodebookError(f"{path}: truncated header ({len(data)} bytes)")
    _, version, n, ns, layers, dim = _HEADER.unpack_from(data)
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    dt = _record_dtype(layers, dim)
    expected = n * (layers + 1) * dt.itemsize
    payload = len(data) - HEADER_SIZE
    if payload < expected:
        raise TruncatedCodebookError(f"{path}: payload {payload} bytes, expected {expected}")
    if payload > expected:
        raise CodebookError(f"{path}: {payload - expected} trailing bytes")
    if ns > n:
        raise CodebookError(f"{path}: num_sources {ns} > num_nodes {n}")
    rec = np.frombuffer(data, dtype=dt, count=n * (layers + 1), offset=HEADER_SIZE)
    rec = rec.reshape(n, layers + 1)
    return PackedCodebook(ns, layers, dim, rec["alpha"].copy(), rec["bits"].copy())
