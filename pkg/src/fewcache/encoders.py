"""Pluggable embedding sources.

The pipeline never runs a neural encoder in-process; it consumes either
precomputed FEMB dumps produced elsewhere or a synthetic generator. A
resolved source bundles the train/test datasets and the per-class
prompt features, all checked to share one embedding dimension, plus
provenance (checksums) so identical configs provably yield identical
data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import (
    Dataset,
    SynthSpec,
    class_prototypes,
    load_manifest,
    read_embeddings,
    synth_generate,
)
from .errors import DimensionConflictError, UnknownSourceKindError
from .numerics import l2_normalize_rows

# Offset added to the data seed when drawing the held-out test split of a
# synthetic source, so train and test never share a noise stream.
TEST_SEED_OFFSET = 104729

DEFAULT_PROMPT_SIGMA = 0.35


@dataclass
class EmbeddingSource:
    kind: str
    dim: int
    train_dataset: Dataset
    test_dataset: Optional[Dataset]
    prompt_features: np.ndarray  # (num_classes, dim), unit rows
    provenance: dict

    @property
    def classes(self) -> list[str]:
        return self.train_dataset.classes


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sha256_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def synthetic_prompt_features(
    num_classes: int,
    dim: int,
    sigma: float = DEFAULT_PROMPT_SIGMA,
    seed: int = 0,
) -> np.ndarray:
    """Informative but imperfect prompt features: class prototypes plus
    Gaussian noise, unit-normalized."""
    rng = np.random.default_rng(seed)
    protos = class_prototypes(num_classes, dim)
    if sigma > 0.0:
        protos = protos + sigma * rng.standard_normal(protos.shape)
    return l2_normalize_rows(protos)


def resolve_source(config: dict) -> EmbeddingSource:
    """Build an EmbeddingSource from a config dict.

    kind "synthetic": {"spec": SynthSpec fields, "test_bags_per_class",
    "prompt_sigma", "prompt_seed"}. kind "file": {"train_manifest",
    "test_manifest"?, "prompt_features"}. Dimension conflicts between
    instance and prompt features are rejected.
    """
    kind = config.get("kind")
    if kind == "synthetic":
        spec = SynthSpec.from_dict(config["spec"])
        train = synth_generate(spec)
        test = None
        test_bags = int(config.get("test_bags_per_class", 0))
        if test_bags > 0:
            test_spec = replace(
                spec, bags_per_class=test_bags, seed=spec.seed + TEST_SEED_OFFSET
            )
            test = synth_generate(test_spec)
        prompts = synthetic_prompt_features(
            spec.num_classes,
            spec.dim,
            sigma=float(config.get("prompt_sigma", DEFAULT_PROMPT_SIGMA)),
            seed=int(config.get("prompt_seed", spec.seed)),
        )
        provenance = {
            "encoder": "synthetic-prototypes",
            "spec": spec.to_dict(),
            "checksum": hashlib.sha256(
                json.dumps(config, sort_keys=True).encode()
                + train.store.rows.tobytes()
                + prompts.tobytes()
            ).hexdigest(),
        }
        return EmbeddingSource(
            kind=kind, dim=spec.dim, train_dataset=train, test_dataset=test,
            prompt_features=prompts, provenance=provenance,
        )

    if kind == "file":
        train = load_manifest(config["train_manifest"])
        test = load_manifest(config["test_manifest"]) if config.get("test_manifest") else None
        if test is not None and test.dim != train.dim:
            raise DimensionConflictError(
                f"train dim {train.dim} != test dim {test.dim}"
            )
        prompt_store = read_embeddings(config["prompt_features"])
        if prompt_store.d != train.dim:
            raise DimensionConflictError(
                f"instance dim {train.dim} but prompt-feature dim {prompt_store.d}"
            )
        if prompt_store.n != train.num_classes:
            raise DimensionConflictError(
                f"prompt file holds {prompt_store.n} rows for "
                f"{train.num_classes} classes"
            )
        prompts = l2_normalize_rows(prompt_store.rows)
        provenance = {
            "encoder": config.get("encoder_name", "unknown"),
            "checksum": _sha256_file(config["train_manifest"]),
            "prompt_checksum": _sha256_file(config["prompt_features"]),
        }
        # Dumps produced elsewhere may ship a provenance sidecar next to
        # the manifest (encoder name, preprocessing notes, checksum).
        sidecar = Path(config["train_manifest"]).with_suffix(".provenance.json")
        if sidecar.exists():
            with open(sidecar) as f:
                provenance.update(json.load(f))
        return EmbeddingSource(
            kind=kind, dim=train.dim, train_dataset=train, test_dataset=test,
            prompt_features=prompts, provenance=provenance,
        )

    raise UnknownSourceKindError(f"unknown embedding source kind {kind!r}")


def source_checksum(source: EmbeddingSource) -> str:
    """Digest over everything a resolution produced; equal configs must
    resolve to equal checksums."""
    h = hashlib.sha256()
    h.update(_sha256_array(source.train_dataset.store.rows).encode())
    if source.test_dataset is not None:
        h.update(_sha256_array(source.test_dataset.store.rows).encode())
    h.update(_sha256_array(source.prompt_features).encode())
    return h.hexdigest()
