"""Data model and I/O for embedding-level datasets.

A dataset is a list of bags (one per slide/source), each owning a
contiguous row range of a shared embedding store, plus optional
per-instance labels. Embeddings live in FEMB files:

    magic   b"FEMB"            4 bytes
    version u32 little-endian  1 = float32 payload, 2 = float64 payload
    n       u64 little-endian  row count
    d       u64 little-endian  column count
    payload n*d IEEE-754 values, little-endian, row-major

Version 1 is the interchange format for encoder dumps; version 2 exists
so checkpoints can round-trip the full build precision. The manifest is
JSON:

    { "name": str, "dim": int, "classes": [str, ...],
      "bags": [ { "id": str, "label": int, "embeddings": relpath,
                  "n": int, "instance_labels": relpath? } ] }

All rows are L2-normalized at load time: every consumer compares
features by cosine/dot product, so the contract is centralized here.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    FembError,
    LabelRangeError,
    MissingFileError,
    NonFiniteValueError,
    OverlappingRangesError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .numerics import REAL, l2_normalize_rows

FEMB_MAGIC = b"FEMB"
_FEMB_HEADER = struct.Struct("<4sIQQ")
_FEMB_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


@dataclass
class EmbeddingStore:
    """Row-major matrix of instance feature vectors, one row per instance."""

    n: int
    d: int
    rows: np.ndarray

    @classmethod
    def from_array(cls, rows: np.ndarray) -> "EmbeddingStore":
        a = np.asarray(rows, dtype=REAL)
        return cls(n=a.shape[0], d=a.shape[1], rows=a)


@dataclass
class Bag:
    """One bag: identity, bag label, and a row range into the store."""

    id: str
    label: int
    start: int
    end: int
    instance_labels: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.end - self.start


@dataclass
class Dataset:
    name: str
    dim: int
    classes: list[str]
    bags: list[Bag]
    store: EmbeddingStore

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def num_instances(self) -> int:
        return self.store.n

    def validate(self) -> None:
        """Check structural invariants; raises a ManifestError subclass."""
        if len(self.classes) < 2:
            raise LabelRangeError(f"dataset {self.name!r} needs >= 2 classes")
        if self.store.d != self.dim:
            raise DimensionMismatchError(
                f"store dim {self.store.d} != declared dim {self.dim}"
            )
        prev_end = 0
        for bag in sorted(self.bags, key=lambda b: b.start):
            if bag.end <= bag.start:
                raise DimensionMismatchError(f"bag {bag.id!r} has empty range")
            if bag.start < prev_end:
                raise OverlappingRangesError(f"bag {bag.id!r} overlaps a previous bag")
            prev_end = bag.end
            if bag.end > self.store.n:
                raise DimensionMismatchError(
                    f"bag {bag.id!r} range exceeds store rows ({self.store.n})"
                )
            if not 0 <= bag.label < self.num_classes:
                raise LabelRangeError(f"bag {bag.id!r} label {bag.label} out of range")
            if bag.instance_labels is not None:
                if len(bag.instance_labels) != bag.n:
                    raise DimensionMismatchError(
                        f"bag {bag.id!r} has {len(bag.instance_labels)} instance labels "
                        f"for {bag.n} instances"
                    )
                lo, hi = int(min(bag.instance_labels)), int(max(bag.instance_labels))
                if lo < 0 or hi >= self.num_classes:
                    raise LabelRangeError(
                        f"bag {bag.id!r} instance label out of range [0, {self.num_classes})"
                    )
        norms = np.linalg.norm(self.store.rows, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-9:
            raise DimensionMismatchError("store rows are not unit-norm")

    def instance_labels_vector(self) -> np.ndarray:
        """Per-instance labels over the whole store; -1 where unknown."""
        out = np.full(self.store.n, -1, dtype=np.int64)
        for bag in self.bags:
            if bag.instance_labels is not None:
                out[bag.start : bag.end] = bag.instance_labels
        return out

    def bag_labels(self) -> np.ndarray:
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def bags_by_id(self) -> dict[str, Bag]:
        return {b.id: b for b in self.bags}


# --- FEMB binary format -------------------------------------------------


def write_embeddings(path, rows: np.ndarray, version: int = 1) -> Path:
    """Write a matrix as a FEMB file; version selects the payload width."""
    if version not in _FEMB_DTYPES:
        raise UnsupportedVersionError(f"cannot write FEMB version {version}")
    a = np.ascontiguousarray(np.asarray(rows), dtype=_FEMB_DTYPES[version])
    if a.ndim != 2:
        raise DimensionMismatchError(f"embeddings must be 2-d, got shape {a.shape}")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_FEMB_HEADER.pack(FEMB_MAGIC, version, a.shape[0], a.shape[1]))
        f.write(a.tobytes())
    return path


def read_embeddings(path) -> EmbeddingStore:
    """Read a FEMB file bit-exactly, widening the payload to REAL."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < _FEMB_HEADER.size:
        raise TruncatedPayloadError(f"{path}: shorter than the FEMB header")
    magic, version, n, d = _FEMB_HEADER.unpack_from(blob)
    if magic != FEMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version not in _FEMB_DTYPES:
        raise UnsupportedVersionError(f"{path}: unknown FEMB version {version}")
    dtype = _FEMB_DTYPES[version]
    expected = n * d * dtype.itemsize
    payload = blob[_FEMB_HEADER.size :]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    if len(payload) > expected:
        raise FembError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    a = np.frombuffer(payload, dtype=dtype).reshape(n, d).astype(REAL)
    if not np.all(np.isfinite(a)):
        raise NonFiniteValueError(f"{path}: payload contains NaN or infinity")
    return EmbeddingStore.from_array(a)


# --- manifest load/save ---------------------------------------------------


def load_manifest(path) -> Dataset:
    """Load and fully validate a dataset manifest; rows are L2-normalized."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    with open(path) as f:
        doc = json.load(f)
    base = path.parent
    classes = list(doc["classes"])
    dim = int(doc["dim"])
    chunks: list[np.ndarray] = []
    bags: list[Bag] = []
    cursor = 0
    for entry in doc["bags"]:
        bag_id = str(entry["id"])
        emb_path = base / entry["embeddings"]
        store = read_embeddings(emb_path)
        if store.d != dim:
            raise DimensionMismatchError(
                f"bag {bag_id!r}: embedding dim {store.d} != manifest dim {dim}"
            )
        declared_n = int(entry["n"])
        if store.n != declared_n:
            raise DimensionMismatchError(
                f"bag {bag_id!r}: file holds {store.n} rows, manifest declares {declared_n}"
            )
        label = int(entry["label"])
        if not 0 <= label < len(classes):
            raise LabelRangeError(f"bag {bag_id!r}: label {label} out of range")
        inst_labels = None
        if entry.get("instance_labels"):
            lpath = base / entry["instance_labels"]
            if not lpath.exists():
                raise MissingFileError(f"bag {bag_id!r}: label file not found: {lpath}")
            with open(lpath) as lf:
                raw = json.load(lf)
            if len(raw) != declared_n:
                raise DimensionMismatchError(
                    f"bag {bag_id!r}: {len(raw)} instance labels for {declared_n} instances"
                )
            inst_labels = np.asarray(raw, dtype=np.int64)
            if inst_labels.size and (inst_labels.min() < 0 or inst_labels.max() >= len(classes)):
                raise LabelRangeError(f"bag {bag_id!r}: instance label out of range")
        chunks.append(store.rows)
        bags.append(Bag(bag_id, label, cursor, cursor + declared_n, inst_labels))
        cursor += declared_n
    rows = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, dim), dtype=REAL)
    rows = l2_normalize_rows(rows) if rows.size else rows
    ds = Dataset(
        name=str(doc.get("name", path.stem)),
        dim=dim,
        classes=classes,
        bags=bags,
        store=EmbeddingStore.from_array(rows),
    )
    ds.validate()
    return ds


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write manifest + per-bag FEMB/label files; returns the manifest path."""
    out = Path(out_dir)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in dataset.bags:
        emb_rel = f"embeddings/{bag.id}.femb"
        write_embeddings(out / emb_rel, dataset.store.rows[bag.start : bag.end], version=1)
        entry = {"id": bag.id, "label": int(bag.label), "embeddings": emb_rel, "n": int(bag.n)}
        if bag.instance_labels is not None:
            lab_rel = f"embeddings/{bag.id}.labels.json"
            with open(out / lab_rel, "w") as f:
                json.dump([int(x) for x in bag.instance_labels], f)
            entry["instance_labels"] = lab_rel
        entries.append(entry)
    manifest = {
        "name": dataset.name,
        "dim": dataset.dim,
        "classes": dataset.classes,
        "bags": entries,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest_path


# --- synthetic generator ---------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Desk-scale synthetic stand-in for encoder dumps of real slides.

    Class c's prototype is the c-th standard basis vector; each instance
    is prototype + N(0, sigma^2 I), unit-normalized. A class-c bag holds
    ceil(positive_fraction * instances_per_bag) class-c instances and
    fills the rest with class-0 background, matching the rare-positive
    regime of slide patch data.
    """

    num_classes: int = 2
    dim: int = 32
    bags_per_class: int = 16
    instances_per_bag: int = 200
    positive_fraction: float = 0.2
    noise_sigma: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.positive_fraction <= 1.0:
            raise ValueError("positive_fraction must be in (0, 1]")
        if self.dim < self.num_classes:
            raise ValueError("dim must be >= num_classes")
        if self.num_classes < 2 or self.bags_per_class < 1 or self.instances_per_bag < 1:
            raise ValueError("num_classes >= 2, bags_per_class >= 1, instances_per_bag >= 1")

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "dim": self.dim,
            "bags_per_class": self.bags_per_class,
            "instances_per_bag": self.instances_per_bag,
            "positive_fraction": self.positive_fraction,
            "noise_sigma": self.noise_sigma,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        return cls(**doc)


def class_prototypes(num_classes: int, dim: int) -> np.ndarray:
    """Orthonormal class prototypes: the first num_classes basis vectors."""
    protos = np.zeros((num_classes, dim), dtype=REAL)
    protos[np.arange(num_classes), np.arange(num_classes)] = 1.0
    return protos


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic dataset; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    protos = class_prototypes(spec.num_classes, spec.dim)
    n_pos = math.ceil(spec.positive_fraction * spec.instances_per_bag)
    chunks: list[np.ndarray] = []
    bags: list[Bag] = []
    cursor = 0
    for c in range(spec.num_classes):
        for b in range(spec.bags_per_class):
            labels = np.zeros(spec.instances_per_bag, dtype=np.int64)
            labels[:n_pos] = c
            x = protos[labels]
            if spec.noise_sigma > 0.0:
                x = x + spec.noise_sigma * rng.standard_normal(
                    (spec.instances_per_bag, spec.dim)
                )
            x = l2_normalize_rows(x)
            chunks.append(x)
            bags.append(
                Bag(
                    id=f"c{c}_b{b}",
                    label=c,
                    start=cursor,
                    end=cursor + spec.instances_per_bag,
                    instance_labels=labels,
                )
            )
            cursor += spec.instances_per_bag
    ds = Dataset(
        name=f"synth_n{spec.num_classes}_d{spec.dim}_s{spec.seed}",
        dim=spec.dim,
        classes=[f"class_{c}" for c in range(spec.num_classes)],
        bags=bags,
        store=EmbeddingStore.from_array(np.concatenate(chunks, axis=0)),
    )
    ds.validate()
    return ds
