"""Learnable key/value cache with softmax-attention retrieval.

Keys are instance features (learnable); values are label distributions.
Rows for labeled instances hold exact one-hot distributions and are
frozen; rows for unlabeled core-set instances hold unconstrained logits
that are mapped to the simplex by row-softmax at every use, so they stay
valid distributions under unconstrained optimization.

Prediction for a query row q is

    attention = softmax(beta * q K^T)
    probs     = attention @ V

a convex combination of simplex rows, hence itself on the simplex.
beta scales the unit-norm dot products (which live in [-1, 1]) so that
the attention is not stuck near uniform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import EmbeddingStore
from .errors import ShapeMismatchError
from .numerics import PROB_CLAMP, REAL, as_matrix, l2_normalize_rows, softmax_rows
from .sampler import FewShotSplit

DEFAULT_BETA = 10.0

# Logit magnitude used to initialize labeled value rows when they are made
# learnable: softmax of (one-hot * this) is ~0.9999 on the hot class.
_UNFROZEN_ONE_HOT_LOGIT = 10.0


@dataclass
class CacheModel:
    keys: np.ndarray          # (n_cache, d), unit rows
    value_logits: np.ndarray  # (n_cache, N); frozen rows store exact one-hot probs
    frozen_mask: np.ndarray   # (n_cache,) bool; True rows never change
    beta: float
    classes: list[str]

    @property
    def n_cache(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    @property
    def num_classes(self) -> int:
        return self.value_logits.shape[1]

    def value_distributions(self) -> np.ndarray:
        """Effective value rows: frozen rows as stored, the rest row-softmaxed."""
        values = softmax_rows(self.value_logits)
        if self.frozen_mask.any():
            values[self.frozen_mask] = self.value_logits[self.frozen_mask]
        return values

    def copy(self) -> "CacheModel":
        return CacheModel(
            keys=self.keys.copy(),
            value_logits=self.value_logits.copy(),
            frozen_mask=self.frozen_mask.copy(),
            beta=self.beta,
            classes=list(self.classes),
        )


@dataclass
class CachePrediction:
    probs: np.ndarray      # (m, N) rows on the simplex
    attention: np.ndarray  # (m, n_cache)


def build_cache(
    split: FewShotSplit,
    store: EmbeddingStore,
    classes: list[str],
    beta: float = DEFAULT_BETA,
    unfreeze_labeled: bool = False,
) -> CacheModel:
    """Assemble the cache from a split: labeled rows first, then unlabeled.

    Labeled value rows are exact one-hot and frozen; unlabeled rows start
    at zero logits (uniform after softmax) and are learnable. With
    unfreeze_labeled, labeled rows become learnable logits instead,
    initialized so their softmax is sharply one-hot.
    """
    n_lab = split.labeled_rows.size
    n_unl = split.unlabeled_rows.size
    if n_lab + n_unl == 0:
        raise ValueError("cannot build a cache from an empty split")
    num_classes = len(classes)
    rows = np.concatenate([split.labeled_rows, split.unlabeled_rows])
    keys = store.rows[rows].astype(REAL, copy=True)
    value_logits = np.zeros((n_lab + n_unl, num_classes), dtype=REAL)
    if n_lab:
        hot = np.eye(num_classes, dtype=REAL)[split.labeled_classes]
        value_logits[:n_lab] = hot * _UNFROZEN_ONE_HOT_LOGIT if unfreeze_labeled else hot
    frozen = np.zeros(n_lab + n_unl, dtype=bool)
    if not unfreeze_labeled:
        frozen[:n_lab] = True
    return CacheModel(
        keys=keys,
        value_logits=value_logits,
        frozen_mask=frozen,
        beta=float(beta),
        classes=list(classes),
    )


def retrieve(model: CacheModel, queries) -> CachePrediction:
    """Attention retrieval over the cache for unit-norm query rows."""
    q = as_matrix(queries, "queries")
    if q.shape[1] != model.dim:
        raise ShapeMismatchError(f"query dim {q.shape[1]} != key dim {model.dim}")
    attention = softmax_rows(model.beta * (q @ model.keys.T))
    probs = attention @ model.value_distributions()
    return CachePrediction(probs=probs, attention=attention)


def cache_loss_and_grads(
    model: CacheModel,
    labeled_queries,
    labels,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean retrieval cross-entropy plus analytic gradients.

    Returns (loss, grad_keys, grad_value_logits); gradient rows for
    frozen value entries are exactly zero. Probabilities below the log
    clamp contribute a flat (zero-gradient) region, consistent with the
    clamped loss actually evaluated.
    """
    q = as_matrix(labeled_queries, "labeled queries")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if q.shape[0] != y.size:
        raise ShapeMismatchError(f"{q.shape[0]} queries vs {y.size} labels")
    if q.shape[1] != model.dim:
        raise ShapeMismatchError(f"query dim {q.shape[1]} != key dim {model.dim}")
    m = q.shape[0]
    values = model.value_distributions()

    attention = softmax_rows(model.beta * (q @ model.keys.T))
    probs = attention @ values
    picked = probs[np.arange(m), y]
    clamped = np.clip(picked, PROB_CLAMP, 1.0)
    loss = float(-np.log(clamped).mean())

    # d loss / d probs: only the target column of each row, zero where the
    # probability sits below the clamp (the loss is flat there).
    g_probs = np.zeros_like(probs)
    live = picked > PROB_CLAMP
    g_probs[np.arange(m)[live], y[live]] = -1.0 / (m * picked[live])

    # Through probs = attention @ values.
    g_values = attention.T @ g_probs
    g_attention = g_probs @ values.T

    # Softmax backward for the attention rows.
    g_scores = attention * (g_attention - (g_attention * attention).sum(axis=1, keepdims=True))

    grad_keys = model.beta * (g_scores.T @ q)

    # Unfrozen value rows pass through their own row-softmax.
    grad_value_logits = np.zeros_like(model.value_logits)
    free = ~model.frozen_mask
    if free.any():
        v_free = values[free]
        g_free = g_values[free]
        grad_value_logits[free] = v_free * (
            g_free - (g_free * v_free).sum(axis=1, keepdims=True)
        )
    return loss, grad_keys, grad_value_logits


def project(model: CacheModel) -> CacheModel:
    """Re-normalize key rows to unit norm; value logits untouched.

    Applied after every optimizer step so retrieval stays a cosine
    comparison. Idempotent up to roundoff.
    """
    return replace(model, keys=l2_normalize_rows(model.keys))
