"""Losses, Adam, and the epoch loop for the lightgch and sgbgh training modes."""
from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np

from .gradients import model_backward
from .graph import DatasetSplit, build_normalized_adjacency
from .model import DivergenceError, FinalEmbedding, ModelConfig, adaptive_hash, forward, init_embeddings
from .sampler import SignGuidedSampler, UniformSampler, refresh_centers

log = logging.getLogger(__name__)

MODES = ("lightgch", "sgbgh")
SAMPLERS = ("uniform", "sign")


def fork_rng(seed: int, label: str) -> np.random.Generator:
    """Independent stream per subsystem, derived from one run seed."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


@dataclass
class TrainConfig:
    mode: str = "sgbgh"
    batch_size: int = 4096
    learning_rate: float = 0.001
    epochs: int = 1000
    tau: float = 0.2
    gamma: float = 0.5
    beta0: float = 1.0
    beta1: float = 1.0
    reg: float = 0.001
    centers: int = 64
    kmeans_iters: int = 50
    sampler: Optional[str] = None  # default: "sign" for sgbgh, "uniform" for lightgch
    eval_every: int = 1            # 0 disables in-loop evaluation / early stopping
    patience: int = 10
    reg_mean: bool = True          # divide the L2 term by the batch size (False: plain sum)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sampler is None:
            self.sampler = "sign" if self.mode == "sgbgh" else "uniform"
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.batch_size < 1 or self.epochs < 0 or self.centers < 1:
            raise ValueError("batch_size and centers must be >= 1, epochs >= 0")
        if min(self.gamma, self.beta0, self.beta1, self.reg, self.learning_rate) < 0:
            raise ValueError("loss weights and learning rate must be >= 0")

    def loss_weights(self) -> Dict[str, float]:
        w = {"gamma": self.gamma, "beta0": self.beta0, "beta1": self.beta1, "reg": self.reg,
             "reg_mean": float(self.reg_mean)}
        if self.mode == "lightgch":
            w.update(gamma=0.0, beta0=0.0, beta1=0.0)
        return w


# ---------------------------------------------------------------- losses

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return np.exp(-_softplus(-x))


def bpr_loss(scores_pos, scores_neg):
    """Mean of ``-log sigmoid(s+ - s-)``; returns ``(loss, d/ds+, d/ds-)`` of that mean."""
    diff = np.asarray(scores_pos, dtype=np.float64) - np.asarray(scores_neg, dtype=np.float64)
    n = len(diff)
    loss = float(_softplus(-diff).mean())
    g = -_sigmoid(-diff) / n
    return loss, g, -g


@dataclass
class Batch:
    sources: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self):
        return len(self.sources)


@dataclass
class LossTerms:
    main: float = 0.0
    bpr0: float = 0.0
    conv: float = 0.0
    cl: float = 0.0
    reg: float = 0.0
    grads: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)  # term -> (N, L+1, d)


def bpr_terms(final: FinalEmbedding, batch: Batch, num_sources: int) -> LossTerms:
    """Three BPR losses sharing one negative per triple.

    ``main`` scores the full concatenation, ``bpr0`` layer 0 only, ``conv``
    layers 1..L (zero when L = 0). Gradients are w.r.t. every layer segment.
    """
    seg = final.segments()
    u = batch.sources
    vp = batch.positives + num_sources
    vn = batch.negatives + num_sources
    qu, qp, qn = seg[u], seg[vp], seg[vn]
    layer_pos = (qu * qp).sum(axis=2)  # (B, L+1)
    layer_neg = (qu * qn).sum(axis=2)
    L = final.layers
    terms = LossTerms()
    masks = {"main": np.ones(L + 1), "bpr0": np.eye(L + 1)[0], "conv": np.r_[0.0, np.ones(L)]}
    for name, m in masks.items():
        if not m.any():
            continue
        loss, gp, gn = bpr_loss(layer_pos @ m, layer_neg @ m)
        setattr(terms, name, loss)
        g = np.zeros_like(seg)
        w = m[None, :, None]
        np.add.at(g, u, w * (gp[:, None, None] * qp + gn[:, None, None] * qn))
        np.add.at(g, vp, w * gp[:, None, None] * qu)
        np.add.at(g, vn, w * gn[:, None, None] * qu)
        terms.grads[name] = g
    return terms


_NORM_FLOOR = 1e-12


def _normalize(x):
    norm = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _NORM_FLOOR)
    return x / norm, norm


def _normalize_backward(x, xn, norm, g_n):
    # d(x/|x|) = (I - xn xn^T)/|x|; floor region treated as constant norm
    proj = g_n - xn * (xn * g_n).sum(axis=1, keepdims=True)
    clipped = (norm <= _NORM_FLOOR)
    return np.where(clipped, g_n / norm, proj / norm)


def contrastive_loss_deep(anchor: np.ndarray, positive: np.ndarray, tau: float):
    """InfoNCE with cosine similarity, averaged over the batch.

    Row i of ``anchor`` is paired with row i of ``positive``; every other
    row of ``positive`` is a negative. Returns ``(loss, d/anchor, d/positive)``.
    """
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    m = len(a)
    an, a_norm = _normalize(a)
    pn, p_norm = _normalize(p)
    logits = an @ pn.T / tau
    shift = logits.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(logits - shift).sum(axis=1))
    loss = float((lse - np.diag(logits)).mean())
    soft = np.exp(logits - lse[:, None])
    g_logits = (soft - np.eye(m)) / (m * tau)
    g_an = g_logits @ pn
    g_pn = g_logits.T @ an
    return loss, _normalize_backward(a, an, a_norm, g_an), _normalize_backward(p, pn, p_norm, g_pn)


def contrastive_loss_last(q_last: np.ndarray, tau: float):
    """Self-contrast of last-layer embeddings; returns ``(loss, d/q_last)``."""
    loss, ga, gp = contrastive_loss_deep(q_last, q_last, tau)
    return loss, ga + gp


def contrastive_terms(final: FinalEmbedding, sources: np.ndarray, layer_weights, tau: float):
    """Contrast q^(L) against ``sum_l w_l q^(l)`` (l >= 1) over unique batch sources.

    Returns ``(loss, grad)`` with grad shaped like ``final.segments()``.
    """
    seg = final.segments()
    grad = np.zeros_like(seg)
    L = final.layers
    if L == 0:
        return 0.0, grad
    uniq = np.unique(sources)
    w = np.asarray(layer_weights, dtype=np.float64)
    anchor = seg[uniq, L]
    e_star = np.tensordot(w, seg[uniq, 1:], axes=(0, 1))
    loss, ga, ge = contrastive_loss_deep(anchor, e_star, tau)
    grad[uniq, L] += ga
    for i in range(L):
        grad[uniq, i + 1] += w[i] * ge
    return loss, grad


def total_loss(terms: LossTerms, weights: Dict[str, float]) -> float:
    return (terms.main + weights["gamma"] * terms.cl + weights["beta0"] * terms.bpr0
            + weights["beta1"] * terms.conv + terms.reg)


def l2_penalty(table: np.ndarray, rows: np.ndarray, reg: float, scale: float = 1.0):
    """``reg * scale * sum(table[rows]^2)`` over unique rows, and its gradient.

    With ``scale = 1 / batch_size`` the penalty is on the same per-triple
    footing as the mean BPR loss; a plain sum swamps it at large batches.
    """
    rows = np.unique(rows)
    sub = table[rows]
    grad = np.zeros_like(table)
    grad[rows] = 2.0 * reg * scale * sub
    return float(reg * scale * (sub ** 2).sum()), grad


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, table: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(table), np.zeros_like(table))


def adam_step(table: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """In-place bias-corrected Adam update; returns ``table``."""
    if grads.shape != table.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {table.shape}")
    if not np.all(np.isfinite(grads)):
        raise DivergenceError("non-finite gradient")
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads ** 2
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    table -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return table


# ---------------------------------------------------------------- loop

LOG_FIELDS = ["epoch", "total", "main", "cl", "bpr0", "conv", "reg", "steps", "wall_time",
              "recall@20", "ndcg@20"]


@dataclass
class TrainResult:
    table: np.ndarray
    log: List[dict]
    best_epoch: int = -1


def compute_step(table, adj, batch: Batch, model_cfg: ModelConfig, weights, tau: float,
                 num_sources: int):
    """Forward, losses and backward for one batch. Returns ``(terms, total, grad)``."""
    state, final = forward(table, adj, model_cfg, num_sources)
    terms = bpr_terms(final, batch, num_sources)
    g_seg = terms.grads["main"].copy()
    if weights["beta0"] and "bpr0" in terms.grads:
        g_seg += weights["beta0"] * terms.grads["bpr0"]
    if weights["beta1"] and "conv" in terms.grads:
        g_seg += weights["beta1"] * terms.grads["conv"]
    if weights["gamma"]:
        terms.cl, g_cl = contrastive_terms(final, batch.sources, model_cfg.layer_weights, tau)
        g_seg += weights["gamma"] * g_cl
    rows = np.concatenate([batch.sources, batch.positives + num_sources, batch.negatives + num_sources])
    scale = 1.0 / len(batch) if weights.get("reg_mean") else 1.0
    terms.reg, g_reg = l2_penalty(table, rows, weights["reg"], scale)
    total = total_loss(terms, weights)
    loss_grads = [g_seg[:, l, :] for l in range(final.layers + 1)]
    grad = model_backward(state, adj, loss_grads, model_cfg).table + g_reg
    return terms, total, grad


def train(split: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig,
          evaluate_fn: Optional[Callable[[np.ndarray, int], Dict[str, float]]] = None,
          log_path=None, table: Optional[np.ndarray] = None) -> TrainResult:
    """Train the embedding table.

    ``evaluate_fn(table, epoch)`` returning a dict with ``recall@20`` drives
    early stopping every ``train_cfg.eval_every`` epochs; the best table
    seen is returned in that case.
    """
    nu = split.num_sources
    adj = build_normalized_adjacency(split)
    weights = train_cfg.loss_weights()
    if table is None:
        table = init_embeddings(model_cfg, split.graph.num_nodes, fork_rng(train_cfg.seed, "init"))
    table = np.array(table, dtype=np.float64)
    adam = AdamState.zeros_like(table)
    shuffle_rng = fork_rng(train_cfg.seed, "shuffle")
    neg_rng = fork_rng(train_cfg.seed, "negatives")
    if train_cfg.sampler == "sign":
        sampler = None  # built after the first refresh
    else:
        sampler = UniformSampler(split, neg_rng)
    edges = split.train_edges
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    history: List[dict] = []
    best = (-np.inf, -1, table.copy())
    stale = 0
    start = time.perf_counter()
    try:
        for epoch in range(train_cfg.epochs):
            if train_cfg.sampler == "sign":
                centers = refresh_centers(table, nu, train_cfg.centers,
                                          seed=_epoch_seed(train_cfg.seed, epoch), epoch=epoch,
                                          max_iters=train_cfg.kmeans_iters)
                if sampler is None:
                    sampler = SignGuidedSampler(split, neg_rng, centers)
                else:
                    sampler.set_centers(centers)
            order = shuffle_rng.permutation(len(edges))
            sums = {k: 0.0 for k in ("total", "main", "cl", "bpr0", "conv", "reg")}
            steps = 0
            for lo in range(0, len(order), train_cfg.batch_size):
                idx = order[lo:lo + train_cfg.batch_size]
                u, vp = edges[idx, 0], edges[idx, 1]
                q0 = None
                if train_cfg.sampler == "sign":
                    alpha, b = adaptive_hash(table[u])
                    q0 = alpha[:, None] * b
                vn = sampler.sample(u, q0)
                batch = Batch(u, vp, vn)
                terms, total, grad = compute_step(table, adj, batch, model_cfg, weights,
                                                  train_cfg.tau, nu)
                if not np.isfinite(total):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {steps}")
                try:
                    adam_step(table, grad, adam, train_cfg.learning_rate)
                except DivergenceError as exc:
                    raise DivergenceError(f"{exc} at epoch {epoch}, batch {steps}") from exc
                for k in sums:
                    sums[k] += total if k == "total" else getattr(terms, k)
                steps += 1
            row = {k: v / max(steps, 1) for k, v in sums.items()}
            row.update(epoch=epoch, steps=steps, wall_time=round(time.perf_counter() - start, 4))
            if evaluate_fn is not None and train_cfg.eval_every and (epoch + 1) % train_cfg.eval_every == 0:
                metrics = evaluate_fn(table, epoch)
                row.update({k: metrics[k] for k in ("recall@20", "ndcg@20") if k in metrics})
                score = metrics["recall@20"]
                if score > best[0]:
                    best = (score, epoch, table.copy())
                    stale = 0
                else:
                    stale += 1
            history.append(row)
            if writer is not None:
                writer.writerow({k: row.get(k, "") for k in LOG_FIELDS})
                fh.flush()
            log.debug("epoch %d total=%.5f main=%.5f", epoch, row["total"], row["main"])
            if evaluate_fn is not None and train_cfg.eval_every and stale >= train_cfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[1])
                break
    finally:
        if fh is not None:
            fh.close()
    if best[1] >= 0:
        return TrainResult(best[2], history, best[1])
    return TrainResult(table, history)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(fork_rng(seed, f"kmeans/{epoch}").integers(2 ** 31))


def config_fields(cfg) -> Dict[str, object]:
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
