"""Triplet ranking objective: squared-distance similarity, hinge loss, gradients.

The similarity between two images is the squared Euclidean distance of their
embeddings; a triplet (q, p, n) costs max{0, g + D(q,p) - D(q,n)} and the
training objective sums these hinges plus an L2 penalty on all parameters.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    gap: float = 1.0
    weight_decay: float = 0.001

    def validate(self):
        if not np.isfinite(self.gap) or self.gap < 0:
            raise ValueError(f"gap must be finite and >= 0, got {self.gap}")
        if not np.isfinite(self.weight_decay) or self.weight_decay < 0:
            raise ValueError(f"weight_decay must be finite and >= 0, got {self.weight_decay}")


def squared_distance(x, y):
    """||x - y||^2 with 64-bit accumulation."""
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"embedding dims differ: {x.shape} vs {y.shape}")
    d = x.astype(np.float64) - y.astype(np.float64)
    return float(np.dot(d, d))


def triplet_hinge(d_pos, d_neg, gap):
    """max{0, gap + d_pos - d_neg}."""
    # grouping the distance difference keeps equal distances exactly at `gap`
    return max(0.0, gap + (d_pos - d_neg))


def objective(triplet_embeddings, params, config):
    """Sum of per-triplet hinges plus weight_decay * ||params||^2.

    `triplet_embeddings` is a sequence of (f_q, f_p, f_n) embedding triples.
    """
    total = 0.0
    for f_q, f_p, f_n in triplet_embeddings:
        total += triplet_hinge(
            squared_distance(f_q, f_p), squared_distance(f_q, f_n), config.gap
        )
    w = np.asarray(params, dtype=np.float64).ravel()
    return total + config.weight_decay * float(np.dot(w, w))


def loss_grad(f_q, f_p, f_n, gap):
    """Gradients of the triplet hinge wrt the three embeddings.

    Inactive triplets (including the exact kink) get zero subgradients;
    active ones get grad_q = 2(f_n - f_p), grad_p = -2(f_q - f_p),
    grad_n = 2(f_q - f_n).
    """
    f_q = np.asarray(f_q)
    f_p = np.asarray(f_p)
    f_n = np.asarray(f_n)
    if not (f_q.shape == f_p.shape == f_n.shape):
        raise ValueError(
            f"embedding dims differ: {f_q.shape}, {f_p.shape}, {f_n.shape}"
        )
    if triplet_hinge(squared_distance(f_q, f_p), squared_distance(f_q, f_n), gap) <= 0.0:
        zero = np.zeros_like(f_q)
        return zero, zero.copy(), zero.copy()
    return 2.0 * (f_n - f_p), -2.0 * (f_q - f_p), 2.0 * (f_q - f_n)


def batch_loss_grad(embeddings, gap):
    """Vectorized hinge values and embedding gradients for a batch.

    `embeddings` has shape (3, B, d) ordered (query, positive, negative).
    Returns (hinge values (B,), gradients (3, B, d)).
    """
    f_q, f_p, f_n = embeddings
    d_pos = np.sum((f_q - f_p) ** 2, axis=1, dtype=np.float64)
    d_neg = np.sum((f_q - f_n) ** 2, axis=1, dtype=np.float64)
    hinge = np.maximum(0.0, gap + (d_pos - d_neg))
    active = (hinge > 0.0).astype(f_q.dtype)[:, None]
    grads = np.stack([
        2.0 * (f_n - f_p) * active,
        -2.0 * (f_q - f_p) * active,
        2.0 * (f_q - f_n) * active,
    ])
    return hinge, grads
