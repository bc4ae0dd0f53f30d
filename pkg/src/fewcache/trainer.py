"""Joint optimization of both branches plus model checkpointing.

Each step draws a minibatch of labeled instances, computes the retrieval
loss and the prior loss on it, and applies one Adam update per parameter
group (cache keys, unfrozen value logits, prompt parameters), each with
its own learning rate. Keys are re-normalized after every update so
retrieval stays a cosine comparison.

The two losses touch disjoint parameter groups, so joint optimization is
two independent descents run in lockstep; their sum is what the history
records. A group with learning rate zero is left bit-identical,
projection included.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .cache_branch import CacheModel, cache_loss_and_grads, project
from .dataset import EmbeddingStore, read_embeddings, write_embeddings
from .errors import (
    CheckpointVersionError,
    CorruptCheckpointError,
    FembError,
    ModeMismatchError,
)
from .numerics import AdamState, adam_step
from .prior_branch import PROTOTYPE, TOY_ENCODER, PriorModel, prior_loss_and_grads
from .sampler import FewShotSplit

CHECKPOINT_VERSION = 1
_SIDECAR = "checkpoint.json"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; the learning-rate split follows the usual
    recipe of a faster rate on the label cache than on features/prompts."""

    lr_keys: float = 1e-3
    lr_value_logits: float = 1e-2
    lr_prompt: float = 1e-3
    batch_size: Optional[int] = None  # resolved to min(4096, labeled count)
    steps: int = 2000
    seed: int = 0
    cache_loss_weight: float = 1.0
    prompt_loss_weight: float = 1.0

    def __post_init__(self):
        if min(self.lr_keys, self.lr_value_logits, self.lr_prompt) < 0.0:
            raise ValueError("learning rates must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self) -> dict:
        return {
            "lr_keys": self.lr_keys,
            "lr_value_logits": self.lr_value_logits,
            "lr_prompt": self.lr_prompt,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "seed": self.seed,
            "cache_loss_weight": self.cache_loss_weight,
            "prompt_loss_weight": self.prompt_loss_weight,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass
class TrainState:
    """Step counter, per-group Adam moments, and the loss trajectory."""

    step: int = 0
    adam: dict[str, AdamState] = field(default_factory=dict)
    history: list[tuple[int, float, float, float]] = field(default_factory=list)


def train(
    cache: CacheModel,
    prior: PriorModel,
    split: FewShotSplit,
    store: EmbeddingStore,
    cfg: TrainConfig,
) -> tuple[CacheModel, PriorModel, TrainState]:
    """Run cfg.steps of joint optimization; inputs are never mutated.

    Queries are the original (frozen-encoder) features of the labeled
    rows; cache keys drift away from them as training proceeds. Batches
    are drawn with replacement only when the labeled pool is smaller
    than the batch size.
    """
    if split.labeled_rows.size == 0:
        raise ValueError("cannot train without labeled instances")
    cache = cache.copy()
    prior = prior.copy()
    state = TrainState()
    if cfg.steps == 0:
        return cache, prior, state

    queries = store.rows[split.labeled_rows].copy()
    labels = split.labeled_classes.copy()
    n = queries.shape[0]
    batch = cfg.batch_size if cfg.batch_size is not None else min(4096, n)
    rng = np.random.default_rng(cfg.seed)

    adam_keys = AdamState.zeros_like(cache.keys)
    adam_values = AdamState.zeros_like(cache.value_logits)
    adam_prompt = AdamState.zeros_like(prior.learnable())

    for step in range(cfg.steps):
        idx = rng.choice(n, size=batch, replace=batch > n)
        qb, yb = queries[idx], labels[idx]

        cache_loss, g_keys, g_values = cache_loss_and_grads(cache, qb, yb)
        prompt_loss, g_prompt = prior_loss_and_grads(prior, qb, yb)

        if cfg.lr_keys > 0.0:
            new_keys, adam_keys = adam_step(
                cache.keys, cfg.cache_loss_weight * g_keys, adam_keys, cfg.lr_keys
            )
            cache = project(replace(cache, keys=new_keys))
        if cfg.lr_value_logits > 0.0:
            new_values, adam_values = adam_step(
                cache.value_logits,
                cfg.cache_loss_weight * g_values,
                adam_values,
                cfg.lr_value_logits,
            )
            cache = replace(cache, value_logits=new_values)
        if cfg.lr_prompt > 0.0:
            new_prompt, adam_prompt = adam_step(
                prior.learnable(), cfg.prompt_loss_weight * g_prompt, adam_prompt, cfg.lr_prompt
            )
            prior = prior.with_learnable(new_prompt)

        total = cfg.cache_loss_weight * cache_loss + cfg.prompt_loss_weight * prompt_loss
        state.history.append((step, cache_loss, prompt_loss, total))
        state.step = step + 1

    state.adam = {"keys": adam_keys, "value_logits": adam_values, "prompt": adam_prompt}
    return cache, prior, state


def history_to_csv(state: TrainState, path) -> Path:
    """Write the loss trajectory as (step, cache_loss, text_loss, total)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "cache_loss", "text_loss", "total"])
        for row in state.history:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
    return path


# --- checkpoints -----------------------------------------------------------
#
# A checkpoint is a directory: one FEMB file per matrix (version 2, i.e.
# float64 payload, so restore is bit-exact) plus a JSON sidecar with the
# scalar state (beta, tau, mode, frozen mask, class list).


def snapshot(cache: CacheModel, prior: PriorModel, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "cache_keys.femb", cache.keys, version=2)
    write_embeddings(out / "cache_value_logits.femb", cache.value_logits, version=2)
    sidecar = {
        "version": CHECKPOINT_VERSION,
        "cache": {
            "beta": cache.beta,
            "frozen_mask": [bool(x) for x in cache.frozen_mask],
            "classes": cache.classes,
        },
        "prior": {"mode": prior.mode, "tau": prior.tau, "classes": prior.classes},
    }
    if prior.mode == PROTOTYPE:
        write_embeddings(out / "prior_class_features.femb", prior.class_features, version=2)
    else:
        n, s, e = prior.base_tokens.shape
        d = prior.prompt_tokens.shape[1]
        write_embeddings(out / "prior_base_tokens.femb", prior.base_tokens.reshape(n * s, e), version=2)
        write_embeddings(out / "prior_prompt_tokens.femb", prior.prompt_tokens.reshape(n * d, e), version=2)
        write_embeddings(out / "prior_encoder.femb", prior.encoder_matrix, version=2)
        sidecar["prior"]["tokens_per_class"] = s
        sidecar["prior"]["learnable_per_class"] = d
    with open(out / _SIDECAR, "w") as f:
        json.dump(sidecar, f, indent=2)
    return out


def _read_checkpoint_matrix(base: Path, name: str) -> np.ndarray:
    path = base / name
    if not path.exists():
        raise CorruptCheckpointError(f"checkpoint is missing {name}")
    try:
        return read_embeddings(path).rows
    except FembError as exc:
        raise CorruptCheckpointError(f"{name}: {exc}") from exc


def restore(checkpoint_dir, expect_mode: Optional[str] = None) -> tuple[CacheModel, PriorModel]:
    """Load a checkpoint; predictions of the restored models are
    bit-identical to the snapshotted ones."""
    base = Path(checkpoint_dir)
    sidecar_path = base / _SIDECAR
    if not sidecar_path.exists():
        raise CorruptCheckpointError(f"no {_SIDECAR} in {base}")
    try:
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unparseable {_SIDECAR}: {exc}") from exc
    version = sidecar.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version!r}, supported {CHECKPOINT_VERSION}"
        )
    mode = sidecar["prior"]["mode"]
    if expect_mode is not None and mode != expect_mode:
        raise ModeMismatchError(f"checkpoint holds mode {mode!r}, expected {expect_mode!r}")

    cache = CacheModel(
        keys=_read_checkpoint_matrix(base, "cache_keys.femb"),
        value_logits=_read_checkpoint_matrix(base, "cache_value_logits.femb"),
        frozen_mask=np.asarray(sidecar["cache"]["frozen_mask"], dtype=bool),
        beta=float(sidecar["cache"]["beta"]),
        classes=list(sidecar["cache"]["classes"]),
    )
    tau = float(sidecar["prior"]["tau"])
    classes = list(sidecar["prior"]["classes"])
    if mode == PROTOTYPE:
        prior = PriorModel(
            mode=PROTOTYPE, classes=classes, tau=tau,
            class_features=_read_checkpoint_matrix(base, "prior_class_features.femb"),
        )
    elif mode == TOY_ENCODER:
        s = int(sidecar["prior"]["tokens_per_class"])
        d = int(sidecar["prior"]["learnable_per_class"])
        base_tokens = _read_checkpoint_matrix(base, "prior_base_tokens.femb")
        prompt_tokens = _read_checkpoint_matrix(base, "prior_prompt_tokens.femb")
        n = len(classes)
        prior = PriorModel(
            mode=TOY_ENCODER, classes=classes, tau=tau,
            base_tokens=base_tokens.reshape(n, s, -1),
            prompt_tokens=prompt_tokens.reshape(n, d, -1),
            encoder_matrix=_read_checkpoint_matrix(base, "prior_encoder.femb"),
        )
    else:
        raise CorruptCheckpointError(f"unknown prior mode {mode!r} in checkpoint")
    return cache, prior
