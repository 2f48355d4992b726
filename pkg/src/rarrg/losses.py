"""Set-prediction training losses.

Each loss has a scalar reference form (the public ``*_loss`` functions) and a
vectorised form returning gradients, used by the decoder's backward pass.
Selection probabilities are handled through their logits so the log terms
stay finite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .embedding import cosine
from .errors import ValidationError
from .matching import Assignment


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.5
    lambda_sc: float = 0.1
    gamma: float = 2.0
    pos_class_size: float = 7.16
    temperature_inv: float = 1.0
    rebalance: bool = True

    def __post_init__(self):
        for name in ("mu", "pos_class_size", "temperature_inv"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"LossConfig.{name} must be positive")
        if self.lambda_sc < 0 or self.gamma < 0:
            raise ValidationError("LossConfig.lambda_sc and gamma must be non-negative")

    def class_weights(self, n_queries: int | None) -> tuple[float, float]:
        """(positive, negative) weights; unit weights when rebalancing is off."""
        if not self.rebalance or n_queries is None:
            return 1.0, 1.0
        if self.pos_class_size >= n_queries:
            raise ValidationError(f"pos_class_size {self.pos_class_size} must be below N={n_queries}")
        return n_queries / (2 * self.pos_class_size), n_queries / (2 * (n_queries - self.pos_class_size))


def _softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def selection_loss(c: int, p_hat: float, cfg: LossConfig, n_queries: int | None = None) -> float:
    """Class-rebalanced focal binary cross-entropy for a single query."""
    if not 0.0 < p_hat < 1.0:
        raise ValidationError(f"p_hat must lie in (0, 1), got {p_hat}")
    w_pos, w_neg = cfg.class_weights(n_queries)
    if c:
        return float(-w_pos * (1 - p_hat) ** cfg.gamma * np.log(p_hat))
    return float(-w_neg * p_hat**cfg.gamma * np.log1p(-p_hat))


def selection_loss_logits(labels, logits, cfg: LossConfig, n_queries: int | None = None):
    """Summed selection loss over queries and its gradient w.r.t. the logits."""
    x = np.asarray(logits, dtype=np.float64)
    c = np.asarray(labels, dtype=np.float64)
    w_pos, w_neg = cfg.class_weights(n_queries)
    g = cfg.gamma
    p = sigmoid(x)
    q = sigmoid(-x)  # 1 - p without cancellation
    sp_neg = _softplus(-x)  # -ln p
    sp_pos = _softplus(x)  # -ln(1 - p)
    q_g = q**g
    p_g = p**g
    pos = w_pos * q_g * sp_neg
    neg = w_neg * p_g * sp_pos
    loss = float(np.sum(c * pos + (1 - c) * neg))
    dpos = w_pos * (-g * p * q_g * sp_neg - q_g * q)
    dneg = w_neg * (g * p_g * q * sp_pos + p_g * p)
    return loss, c * dpos + (1 - c) * dneg


def similarity_loss(v, v_hat) -> float:
    return 1.0 - cosine(v, v_hat)


def transq_loss(target_embeddings, probs, semantics, assignment: Assignment, cfg: LossConfig) -> float:
    """Reference form: selection loss over every matched row plus 1 - cosine over real targets."""
    tgt = np.asarray(target_embeddings, dtype=np.float64).reshape(-1, np.shape(semantics)[1])
    m = tgt.shape[0]
    n = len(probs)
    total = 0.0
    for i, j in enumerate(assignment.sigma):
        total += selection_loss(int(i < m), float(probs[j]), cfg, n)
        if i < m:
            total += similarity_loss(tgt[i], semantics[j])
    return total


def matched_labels(sigma: Sequence[int], m: int) -> np.ndarray:
    """Per-prediction 0/1 labels: 1 where the query is matched to a real target."""
    labels = np.zeros(len(sigma))
    labels[list(sigma[:m])] = 1.0
    return labels


def transq_loss_grad(target_embeddings, logits, semantics, sigma, cfg: LossConfig):
    """TranSQ loss with gradients w.r.t. logits and (unit) semantic embeddings."""
    sem = np.asarray(semantics, dtype=np.float64)
    tgt = np.asarray(target_embeddings, dtype=np.float64).reshape(-1, sem.shape[1])
    m = tgt.shape[0]
    n = sem.shape[0]
    labels = matched_labels(sigma, m)
    loss, dlogits = selection_loss_logits(labels, logits, cfg, n)
    dsem = np.zeros_like(sem)
    if m:
        cols = np.asarray(sigma[:m])
        loss += float(np.sum(1.0 - np.sum(tgt * sem[cols], axis=1)))
        dsem[cols] = -tgt
    return loss, dlogits, dsem


def _log_softmax_rows(z):
    return z - np.logaddexp.reduce(z, axis=1, keepdims=True)


def semantic_contrastive_loss_grad(text, semantic, cfg: LossConfig):
    """In-batch contrastive loss with similarity-based soft targets.

    ``text`` (T) and ``semantic`` (S) are (M, d) matched pairs. Returns the
    loss and its gradient w.r.t. S; T is treated as constant. The soft
    targets depend on S and are differentiated through.
    """
    T = np.asarray(text, dtype=np.float64)
    S = np.asarray(semantic, dtype=np.float64)
    M = T.shape[0]
    if M == 0:
        return 0.0, np.zeros_like(S)
    tau = cfg.temperature_inv
    A = tau * S @ T.T
    Z = tau * (T @ T.T + S @ S.T) / 2
    logP = _log_softmax_rows(Z)
    P = np.exp(logP)
    logQ1 = _log_softmax_rows(A)
    logQ2 = _log_softmax_rows(A.T)
    l1 = -np.sum(P * logQ1) / M
    l2 = -np.sum(P.T * logQ2) / M
    loss = 0.5 * (l1 + l2)

    # logits path
    dA = (np.exp(logQ1) - P) / M
    R = P.T
    dB = (np.exp(logQ2) * R.sum(axis=1, keepdims=True) - R) / M
    dA = 0.5 * (dA + dB.T)
    # soft-target path
    gP = -(logQ1 + logQ2.T) / (2 * M)
    dZ = P * (gP - np.sum(gP * P, axis=1, keepdims=True))
    dS = tau * dA @ T + 0.5 * tau * (dZ + dZ.T) @ S
    return float(loss), dS


def semantic_contrastive_loss(pairs, cfg: LossConfig) -> float:
    """``pairs`` is a sequence of (text, semantic) unit embeddings."""
    if len(pairs) == 0:
        return 0.0
    T = np.stack([np.asarray(t, dtype=np.float64) for t, _ in pairs])
    S = np.stack([np.asarray(s, dtype=np.float64) for _, s in pairs])
    return semantic_contrastive_loss_grad(T, S, cfg)[0]


@dataclass
class MatchedExample:
    """One example's targets, predictions and its assignment."""

    target_embeddings: np.ndarray
    probs: np.ndarray
    semantics: np.ndarray
    assignment: Assignment

    def pairs(self):
        m = len(self.target_embeddings)
        return [(self.target_embeddings[i], self.semantics[self.assignment.sigma[i]]) for i in range(m)]


def total_loss(batch: Sequence[MatchedExample], cfg: LossConfig, reduction: str = "sum") -> float:
    """Summed (or batch-averaged) TranSQ loss plus the weighted contrastive term."""
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    transq = sum(transq_loss(ex.target_embeddings, ex.probs, ex.semantics, ex.assignment, cfg) for ex in batch)
    if reduction == "mean" and batch:
        transq /= len(batch)
    pairs = [pair for ex in batch for pair in ex.pairs()]
    return transq + cfg.lambda_sc * semantic_contrastive_loss(pairs, cfg)
