"""Layer-wise adaptive hashing and graph convolution over mixed-precision embeddings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

SCENARIOS = ("none", "B_U", "B_V", "B_UV")


class DivergenceError(FloatingPointError):
    """Raised when a forward or training step produces non-finite values."""


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    layer_weights: Optional[Tuple[float, ...]] = None  # w_1..w_L; default uniform 1/L
    fourier_h: float = 3.0
    fourier_n: int = 11
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.dim % 8:
            raise ValueError(f"dim must be a positive multiple of 8, got {self.dim}")
        if self.layers < 0:
            raise ValueError(f"layers must be >= 0, got {self.layers}")
        if self.fourier_h <= 0 or self.fourier_n < 1:
            raise ValueError("fourier_h must be > 0 and fourier_n >= 1")
        if self.layer_weights is None:
            w = 1.0 / self.layers if self.layers else 1.0
            self.layer_weights = tuple([w] * self.layers)
        else:
            self.layer_weights = tuple(float(w) for w in self.layer_weights)
            if len(self.layer_weights) != self.layers or min(self.layer_weights, default=1) <= 0:
                raise ValueError("layer_weights needs one positive weight per convolution layer")


def init_embeddings(cfg: ModelConfig, num_nodes: int, rng=None) -> np.ndarray:
    """Xavier-uniform table of shape ``(num_nodes, dim)``."""
    if num_nodes < 1:
        raise ValueError("num_nodes must be >= 1")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    bound = np.sqrt(6.0 / (2 * cfg.dim))
    return rng.uniform(-bound, bound, size=(num_nodes, cfg.dim))


def hard_sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1, -1).astype(np.int8)


def adaptive_hash(x: np.ndarray):
    """Return ``(alpha, b)`` with ``alpha = ||x||_1 / d`` and ``b = sign(x)``.

    Works on a single vector or row-wise on a matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.abs(x).mean(axis=-1), hard_sign(x)


def graph_convolve(adj, q: np.ndarray) -> np.ndarray:
    return np.asarray(adj @ q)


@dataclass
class LayerEmbeddings:
    hidden: List[np.ndarray]   # x^(l), (N, d) float64
    alphas: List[np.ndarray]   # alpha^(l), (N,)
    codes: List[np.ndarray]    # b^(l), (N, d) int8 in {-1, +1}

    @property
    def layers(self) -> int:
        return len(self.hidden) - 1

    def mixed(self, layer: int) -> np.ndarray:
        return self.alphas[layer][:, None] * self.codes[layer]


@dataclass
class FinalEmbedding:
    """Concatenated mixed-precision embeddings, kept factored as (alpha, b) per layer."""

    alphas: np.ndarray  # (N, L+1)
    codes: np.ndarray   # (N, L+1, d) int8
    num_sources: int = 0
    _dense: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def num_nodes(self) -> int:
        return self.codes.shape[0]

    @property
    def layers(self) -> int:
        return self.codes.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.codes.shape[2]

    def segment(self, layer: int) -> np.ndarray:
        return self.alphas[:, layer, None] * self.codes[:, layer, :]

    def segments(self) -> np.ndarray:
        """``(N, L+1, d)`` array of alpha^(l) * b^(l)."""
        return self.alphas[:, :, None] * self.codes

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.segments().reshape(self.num_nodes, -1)
        return self._dense


def forward(table: np.ndarray, adj, cfg: ModelConfig, num_sources: int = 0):
    """Run adaptive hashing and L graph convolutions.

    Returns ``(LayerEmbeddings, FinalEmbedding)``.
    """
    x = np.asarray(table, dtype=np.float64)
    hidden, alphas, codes = [], [], []
    for layer in range(cfg.layers + 1):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite hidden state at layer {layer}")
        alpha, b = adaptive_hash(x)
        hidden.append(x)
        alphas.append(alpha)
        codes.append(b)
        if layer < cfg.layers:
            x = graph_convolve(adj, alpha[:, None] * b)
    state = LayerEmbeddings(hidden, alphas, codes)
    final = FinalEmbedding(np.stack(alphas, axis=1), np.stack(codes, axis=1), num_sources)
    return state, final


def binarize_scenario(final: FinalEmbedding, scenario: str,
                      layers: Optional[Sequence[int]] = None) -> FinalEmbedding:
    """Replace alpha by 1 for the chosen node set on the chosen layers.

    ``scenario`` is one of ``none``, ``B_U`` (sources), ``B_V`` (destinations)
    or ``B_UV`` (all nodes). ``layers=None`` means every layer.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    if layers is None:
        layers = range(final.layers + 1)
    layers = sorted(set(int(l) for l in layers))
    if not layers:
        raise ValueError("empty layer subset")
    if layers[0] < 0 or layers[-1] > final.layers:
        raise ValueError(f"layer out of range 0..{final.layers}")
    alphas = final.alphas.copy()
    rows = {"none": slice(0, 0),
            "B_U": slice(0, final.num_sources),
            "B_V": slice(final.num_sources, final.num_nodes),
            "B_UV": slice(0, final.num_nodes)}[scenario]
    for l in layers:
        alphas[rows, l] = 1.0
    return FinalEmbedding(alphas, final.codes, final.num_sources)


def single_layer(final: FinalEmbedding, layer: int) -> FinalEmbedding:
    """Lone-segment view used to score one layer's sub-embedding on its own."""
    return FinalEmbedding(final.alphas[:, layer:layer + 1].copy(),
                          final.codes[:, layer:layer + 1, :], final.num_sources)
