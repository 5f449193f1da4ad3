"""Hand-written backward pass through adaptive hashing and graph convolution.

The hard sign has no useful derivative, so the backward pass substitutes
the truncated Fourier series of the square wave::

    d sign(phi) / d phi  ~=  (4/H) * sum_{i odd <= n} cos(pi * i * phi / H)

which is the exact derivative of the smooth surrogate
``(4/pi) * sum_{i odd <= n} sin(pi * i * phi / H) / i``. Running the same
pipeline with that surrogate in the forward pass gives a differentiable
model whose finite differences validate :func:`model_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .model import DivergenceError, ModelConfig, graph_convolve, hard_sign


def _odd_terms(n: int) -> np.ndarray:
    return np.arange(1, n + 1, 2, dtype=np.float64)


def fourier_sign_grad(phi, h: float = 3.0, n: int = 11):
    phi = np.asarray(phi, dtype=np.float64)
    terms = _odd_terms(n)
    out = np.zeros_like(phi)
    for i in terms:
        out += np.cos(np.pi * i * phi / h)
    return (4.0 / h) * out


def fourier_sign_surrogate(phi, h: float = 3.0, n: int = 11):
    phi = np.asarray(phi, dtype=np.float64)
    out = np.zeros_like(phi)
    for i in _odd_terms(n):
        out += np.sin(np.pi * i * phi / h) / i
    return (4.0 / np.pi) * out


def adaptive_hash_backward(x: np.ndarray, g_q: np.ndarray, h: float = 3.0, n: int = 11,
                           surrogate: bool = False) -> np.ndarray:
    """Vector-Jacobian product of ``q = (||x||_1 / d) * sign(x)``.

    The Jacobian is ``alpha * diag(sign'(x)) + outer(b, sign(x)) / d``;
    row-wise on matrices. ``surrogate=True`` uses the smooth series values
    for ``b`` (matching :func:`surrogate_forward`).
    """
    x = np.asarray(x, dtype=np.float64)
    g_q = np.asarray(g_q, dtype=np.float64)
    if x.shape != g_q.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {g_q.shape}")
    d = x.shape[-1]
    alpha = np.abs(x).mean(axis=-1, keepdims=True)
    b = fourier_sign_surrogate(x, h, n) if surrogate else hard_sign(x)
    through_sign = alpha * fourier_sign_grad(x, h, n) * g_q
    through_alpha = np.sign(x) * (b * g_q).sum(axis=-1, keepdims=True) / d
    return through_sign + through_alpha


def convolve_backward(adj, g_next: np.ndarray) -> np.ndarray:
    return np.asarray(adj.T @ g_next)


@dataclass
class GradientBuffer:
    hidden: List[np.ndarray]  # dLoss/dx^(l) for l = 0..L
    table: np.ndarray         # == hidden[0]


def model_backward(state, adj, loss_grads: Sequence[np.ndarray], cfg: ModelConfig,
                   surrogate: bool = False) -> GradientBuffer:
    """Reverse sweep from layer L to 0.

    ``loss_grads[l]`` is dLoss/dq^(l) for every node, shape ``(N, d)``;
    ``None`` entries count as zero.
    """
    hidden = state.hidden
    if len(loss_grads) != len(hidden):
        raise ValueError(f"expected {len(hidden)} layer gradients, got {len(loss_grads)}")
    shape = hidden[0].shape
    carry = np.zeros(shape)
    out: List[np.ndarray] = [None] * len(hidden)
    for layer in range(len(hidden) - 1, -1, -1):
        g = loss_grads[layer]
        if g is not None:
            if g.shape != shape:
                raise ValueError(f"layer {layer}: gradient shape {g.shape} != {shape}")
            carry = carry + g
        g_x = adaptive_hash_backward(hidden[layer], carry, cfg.fourier_h, cfg.fourier_n, surrogate)
        out[layer] = g_x
        if layer > 0:
            carry = convolve_backward(adj, g_x)
    return GradientBuffer(out, out[0])


@dataclass
class SurrogateState:
    hidden: List[np.ndarray]
    mixed: List[np.ndarray]

    def final(self) -> np.ndarray:
        return np.concatenate(self.mixed, axis=1)


def surrogate_forward(table: np.ndarray, adj, cfg: ModelConfig) -> SurrogateState:
    """Forward pipeline with the smooth series in place of sign. Test oracle only."""
    x = np.asarray(table, dtype=np.float64)
    hidden, mixed = [], []
    for layer in range(cfg.layers + 1):
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite hidden state at layer {layer}")
        q = np.abs(x).mean(axis=-1, keepdims=True) * fourier_sign_surrogate(x, cfg.fourier_h, cfg.fourier_n)
        hidden.append(x)
        mixed.append(q)
        if layer < cfg.layers:
            x = graph_convolve(adj, q)
    return SurrogateState(hidden, mixed)

