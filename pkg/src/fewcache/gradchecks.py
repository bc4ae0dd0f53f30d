"""Finite-difference verification suites for every analytic gradient.

Each suite draws small random configurations (few cache rows, low dim,
2-3 classes) and checks the packed analytic gradient against central
differences. Temperatures and scales are kept moderate so no probability
falls into the flat clamped region, where finite differences see zero
slope by design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache_branch import CacheModel, cache_loss_and_grads
from .numerics import finite_difference_check, l2_normalize_rows
from .prior_branch import (
    PROTOTYPE,
    TOY_ENCODER,
    PriorModel,
    prior_loss_and_grads,
    prior_toy_encoder,
)


@dataclass
class SuiteResult:
    name: str
    configs: int
    max_rel_error: float
    passed: bool


def _random_cache_config(rng: np.random.Generator):
    n_cache = int(rng.integers(2, 9))
    # keep at least one unfrozen row: a cache whose rows are all identical
    # frozen one-hots has a flat loss, and a flat loss checks nothing
    n_labeled = int(rng.integers(1, n_cache))
    d = int(rng.integers(2, 7))
    num_classes = int(rng.integers(2, 4))
    m = int(rng.integers(1, 6))
    keys = l2_normalize_rows(rng.standard_normal((n_cache, d)))
    value_logits = 0.5 * rng.standard_normal((n_cache, num_classes))
    frozen = np.zeros(n_cache, dtype=bool)
    frozen[:n_labeled] = True
    hot = rng.integers(0, num_classes, size=n_labeled)
    one_hot = np.zeros((n_labeled, num_classes))
    one_hot[np.arange(n_labeled), hot] = 1.0
    value_logits[:n_labeled] = one_hot
    beta = float(rng.uniform(0.5, 3.0))
    model = CacheModel(
        keys=keys,
        value_logits=value_logits,
        frozen_mask=frozen,
        beta=beta,
        classes=[f"c{i}" for i in range(num_classes)],
    )
    queries = l2_normalize_rows(rng.standard_normal((m, d)))
    labels = rng.integers(0, num_classes, size=m)
    return model, queries, labels


def cache_gradient_suite(
    n_configs: int = 100, seed: int = 0, tol: float = 1e-4
) -> SuiteResult:
    """Check grad_keys and the unfrozen value-logit rows jointly."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        model, queries, labels = _random_cache_config(rng)
        free = ~model.frozen_mask

        def loss_and_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
            nk = model.keys.size
            m2 = CacheModel(
                keys=x[:nk].reshape(model.keys.shape),
                value_logits=model.value_logits.copy(),
                frozen_mask=model.frozen_mask,
                beta=model.beta,
                classes=model.classes,
            )
            m2.value_logits[free] = x[nk:].reshape(-1, model.num_classes)
            loss, g_keys, g_values = cache_loss_and_grads(m2, queries, labels)
            return loss, np.concatenate([g_keys.ravel(), g_values[free].ravel()])

        packed = np.concatenate([model.keys.ravel(), model.value_logits[free].ravel()])
        report = finite_difference_check(loss_and_grad, packed, tol=tol)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            return SuiteResult("cache_loss", n_configs, worst, False)
    return SuiteResult("cache_loss", n_configs, worst, True)


def _check_prior(
    make_model, n_configs: int, seed: int, tol: float, name: str
) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        model, queries, labels = make_model(rng)
        shape = model.learnable().shape

        def loss_and_grad(x: np.ndarray) -> tuple[float, np.ndarray]:
            loss, grad = prior_loss_and_grads(
                model.with_learnable(x.reshape(shape)), queries, labels
            )
            return loss, grad.ravel()

        report = finite_difference_check(loss_and_grad, model.learnable().ravel(), tol=tol)
        worst = max(worst, report.max_rel_error)
        if not report.passed:
            return SuiteResult(name, n_configs, worst, False)
    return SuiteResult(name, n_configs, worst, True)


def _random_prototype(rng: np.random.Generator):
    num_classes = int(rng.integers(2, 4))
    d = int(rng.integers(2, 7))
    m = int(rng.integers(1, 6))
    model = PriorModel(
        mode=PROTOTYPE,
        classes=[f"c{i}" for i in range(num_classes)],
        tau=float(rng.uniform(0.3, 3.0)),
        class_features=rng.standard_normal((num_classes, d)) + 0.1,
    )
    queries = l2_normalize_rows(rng.standard_normal((m, d)))
    labels = rng.integers(0, num_classes, size=m)
    return model, queries, labels


def _random_toy(rng: np.random.Generator):
    num_classes = int(rng.integers(2, 4))
    d = int(rng.integers(2, 7))
    e = int(rng.integers(2, 5))
    s = int(rng.integers(1, 4))
    n_learn = int(rng.integers(1, 4))
    m = int(rng.integers(1, 6))
    model = prior_toy_encoder(
        rng.standard_normal((num_classes, s, e)),
        [f"c{i}" for i in range(num_classes)],
        dim=d,
        num_learnable=n_learn,
        tau=float(rng.uniform(0.3, 3.0)),
        seed=int(rng.integers(0, 2**31)),
    )
    # Nudge prompt tokens off their tiny init so the pooled vector cannot
    # sit near zero norm.
    model.prompt_tokens += 0.3 * rng.standard_normal(model.prompt_tokens.shape)
    queries = l2_normalize_rows(rng.standard_normal((m, d)))
    labels = rng.integers(0, num_classes, size=m)
    return model, queries, labels


def prior_prototype_suite(n_configs: int = 100, seed: int = 1, tol: float = 1e-4) -> SuiteResult:
    return _check_prior(_random_prototype, n_configs, seed, tol, "prior_loss_prototype")


def prior_toy_suite(n_configs: int = 100, seed: int = 2, tol: float = 1e-4) -> SuiteResult:
    return _check_prior(_random_toy, n_configs, seed, tol, "prior_loss_toy_tokens")


def run_all_suites(n_configs: int = 100, seed: int = 0, tol: float = 1e-4) -> list[SuiteResult]:
    return [
        cache_gradient_suite(n_configs, seed, tol),
        prior_prototype_suite(n_configs, seed + 1, tol),
        prior_toy_suite(n_configs, seed + 2, tol),
    ]
