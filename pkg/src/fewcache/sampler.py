"""Dual-tier few-shot sampling.

The simulation mirrors how a small annotation budget is spent: pick K
bags per class, compress their instances to a K-means core set, then
label L instances per class from the core set. Everything downstream
(cache construction, training) sees only the resulting split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import Dataset
from .errors import InsufficientBagsError, MissingInstanceLabelsError
from .numerics import REAL, as_matrix


@dataclass(frozen=True)
class FewShotSpec:
    """Sampling budget: K bags per class, L labeled instances per class."""

    bag_shot: int
    instance_shot: int
    coreset_fraction: float = 0.10
    coreset_cap: int = 1000
    seed: int = 0
    # Non-default protocol: label L instances inside each selected bag
    # instead of L per class across all selected bags.
    per_bag: bool = False

    def __post_init__(self):
        if self.bag_shot < 1 or self.instance_shot < 1:
            raise ValueError("bag_shot and instance_shot must be >= 1")
        if not 0.0 < self.coreset_fraction <= 1.0:
            raise ValueError("coreset_fraction must be in (0, 1]")
        if self.coreset_cap < 1:
            raise ValueError("coreset_cap must be >= 1")

    def to_dict(self) -> dict:
        return {
            "bag_shot": self.bag_shot,
            "instance_shot": self.instance_shot,
            "coreset_fraction": self.coreset_fraction,
            "coreset_cap": self.coreset_cap,
            "seed": self.seed,
            "per_bag": self.per_bag,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FewShotSpec":
        return cls(**doc)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    n_iter: int
    inertia_history: list[float] = field(default_factory=list)


@dataclass
class FewShotSplit:
    """Outcome of one sampling run, in global store row indices.

    labeled and unlabeled_core partition the core set; labeled rows carry
    their ground-truth class. flags records shortfalls (a class with
    fewer core members than L) and absent classes.
    """

    selected_bags: list[str]
    labeled_rows: np.ndarray
    labeled_classes: np.ndarray
    unlabeled_rows: np.ndarray
    seed: int
    flags: dict = field(default_factory=dict)

    @property
    def n_labeled(self) -> int:
        return int(self.labeled_rows.size)

    @property
    def n_cache(self) -> int:
        return int(self.labeled_rows.size + self.unlabeled_rows.size)

    def check(self, dataset: Dataset, spec: Optional[FewShotSpec] = None) -> None:
        """Assert the split invariants against its dataset."""
        labeled = set(self.labeled_rows.tolist())
        unlabeled = set(self.unlabeled_rows.tolist())
        if labeled & unlabeled:
            raise AssertionError("labeled and unlabeled core rows overlap")
        selected = set(self.selected_bags)
        allowed: set[int] = set()
        for bag in dataset.bags:
            if bag.id in selected:
                allowed.update(range(bag.start, bag.end))
        outside = (labeled | unlabeled) - allowed
        if outside:
            raise AssertionError(f"{len(outside)} split rows fall outside selected bags")
        if spec is not None and not spec.per_bag:
            counts = np.bincount(self.labeled_classes, minlength=dataset.num_classes)
            shortfall = self.flags.get("shortfall", {})
            absent = set(self.flags.get("absent_classes", []))
            for c, count in enumerate(counts):
                if c in absent:
                    continue
                if count != spec.instance_shot and str(c) not in {str(k) for k in shortfall}:
                    raise AssertionError(
                        f"class {c} has {count} labels, expected {spec.instance_shot}"
                    )

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "selected_bags": list(self.selected_bags),
            "labeled": [
                [int(r), int(c)]
                for r, c in zip(self.labeled_rows, self.labeled_classes)
            ],
            "unlabeled_core": [int(r) for r in self.unlabeled_rows],
            "seed": int(self.seed),
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FewShotSplit":
        labeled = doc.get("labeled", [])
        rows = np.array([r for r, _ in labeled], dtype=np.int64)
        classes = np.array([c for _, c in labeled], dtype=np.int64)
        return cls(
            selected_bags=list(doc["selected_bags"]),
            labeled_rows=rows,
            labeled_classes=classes,
            unlabeled_rows=np.asarray(doc.get("unlabeled_core", []), dtype=np.int64),
            seed=int(doc.get("seed", 0)),
            flags=dict(doc.get("flags", {})),
        )


def save_split(split: FewShotSplit, path) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(split.to_dict(), f, indent=2)
    return path


def load_split(path) -> FewShotSplit:
    with open(path) as f:
        return FewShotSplit.from_dict(json.load(f))


def sample_bags(dataset: Dataset, bag_shot: int, seed) -> list[str]:
    """Stratified uniform sample without replacement: K bag ids per class."""
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {c: [] for c in range(dataset.num_classes)}
    for bag in dataset.bags:
        by_class[bag.label].append(bag.id)
    chosen: list[str] = []
    for c in range(dataset.num_classes):
        pool = by_class[c]
        if len(pool) < bag_shot:
            raise InsufficientBagsError(
                f"class {c} ({dataset.classes[c]!r}) has {len(pool)} bags, need {bag_shot}"
            )
        picked = rng.choice(len(pool), size=bag_shot, replace=False)
        chosen.extend(pool[i] for i in sorted(picked))
    return chosen


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=REAL)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # All remaining points coincide with chosen centroids.
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x - c||^2 expanded; clip the tiny negatives cancellation produces.
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def kmeans(points, k: int, max_iter: int = 100, seed=0) -> KMeansResult:
    """Lloyd iterations from a k-means++ start, deterministic given seed.

    Empty clusters are re-seeded with the point farthest from its current
    centroid, so every cluster in the result is nonempty. Inertia is
    recorded once per iteration and is non-increasing.
    """
    x = as_matrix(points, "kmeans points")
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds number of points ({n})")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)
    assignment = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    n_iter = 0
    for it in range(max_iter):
        n_iter = it + 1
        d2 = _sq_dists(x, centroids)
        new_assignment = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), new_assignment]
        history.append(float(point_d2.sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment
        for j in range(k):
            members = assignment == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        # Re-seed empty clusters from the farthest points, one at a time so
        # two empty clusters never grab the same point.
        for j in range(k):
            if not (assignment == j).any():
                far = int(point_d2.argmax())
                centroids[j] = x[far]
                assignment[far] = j
                point_d2[far] = 0.0
    d2 = _sq_dists(x, centroids)
    assignment = d2.argmin(axis=1)
    inertia = float(d2[np.arange(n), assignment].sum())
    return KMeansResult(
        centroids=centroids,
        assignment=assignment,
        inertia=inertia,
        n_iter=n_iter,
        inertia_history=history,
    )


def select_core_set(points, spec: FewShotSpec, seed=None) -> np.ndarray:
    """Pick representative instance rows: one per K-means cluster.

    k = min(ceil(coreset_fraction * n), coreset_cap). Each cluster
    contributes the member nearest its centroid, so representatives are
    actual dataset rows and all distinct. Returns local row indices into
    `points`.
    """
    x = as_matrix(points, "core-set points")
    n = x.shape[0]
    if n == 0:
        raise ValueError("cannot select a core set from zero instances")
    k = min(math.ceil(spec.coreset_fraction * n), spec.coreset_cap, n)
    result = kmeans(x, k, seed=spec.seed if seed is None else seed)
    reps = np.empty(k, dtype=np.int64)
    for j in range(k):
        members = np.flatnonzero(result.assignment == j)
        d2 = ((x[members] - result.centroids[j]) ** 2).sum(axis=1)
        reps[j] = members[int(d2.argmin())]
    return reps


def sample_labeled_instances(
    core_labels: np.ndarray,
    instance_shot: int,
    seed,
    num_classes: int,
) -> tuple[np.ndarray, dict]:
    """Uniform per-class sample of L core-set members; returns local indices.

    Classes with fewer than L core members contribute everything they
    have and are flagged under "shortfall"; classes absent from the core
    set are flagged under "absent_classes" rather than failing, since
    rare classes may genuinely vanish from a small core set.
    """
    rng = np.random.default_rng(seed)
    flags: dict = {}
    picked: list[np.ndarray] = []
    for c in range(num_classes):
        members = np.flatnonzero(core_labels == c)
        if members.size == 0:
            flags.setdefault("absent_classes", []).append(c)
            continue
        if members.size < instance_shot:
            flags.setdefault("shortfall", {})[str(c)] = int(members.size)
            picked.append(members)
        else:
            sel = rng.choice(members.size, size=instance_shot, replace=False)
            picked.append(members[np.sort(sel)])
    chosen = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return chosen, flags


def _sample_labeled_per_bag(
    core_global: np.ndarray,
    bag_of_row: np.ndarray,
    selected_bag_ids: list[str],
    bag_index: dict[str, int],
    instance_shot: int,
    seed,
) -> tuple[np.ndarray, dict]:
    """Per-bag variant: L core members labeled inside each selected bag."""
    rng = np.random.default_rng(seed)
    flags: dict = {}
    picked: list[np.ndarray] = []
    for bag_id in selected_bag_ids:
        members = np.flatnonzero(bag_of_row[core_global] == bag_index[bag_id])
        if members.size == 0:
            flags.setdefault("empty_bags", []).append(bag_id)
            continue
        if members.size < instance_shot:
            flags.setdefault("shortfall", {})[bag_id] = int(members.size)
            picked.append(members)
        else:
            sel = rng.choice(members.size, size=instance_shot, replace=False)
            picked.append(members[np.sort(sel)])
    chosen = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
    return chosen, flags


def sample_split(dataset: Dataset, spec: FewShotSpec) -> FewShotSplit:
    """Run the full pipeline: bags -> core set -> labeled instances.

    Deterministic function of (dataset, spec): child seeds for the three
    stages are spawned from spec.seed.
    """
    s_bags, s_core, s_label = np.random.SeedSequence(spec.seed).spawn(3)
    selected = sample_bags(dataset, spec.bag_shot, s_bags)
    selected_set = set(selected)
    rows_global = np.concatenate(
        [np.arange(b.start, b.end) for b in dataset.bags if b.id in selected_set]
    )
    core_local = select_core_set(dataset.store.rows[rows_global], spec, seed=s_core)
    core_global = rows_global[core_local]

    truth = dataset.instance_labels_vector()
    core_labels = truth[core_global]
    if (core_labels < 0).any():
        raise MissingInstanceLabelsError(
            "core set contains instances without ground-truth labels; "
            "few-shot simulation requires labeled training bags"
        )

    if spec.per_bag:
        bag_of_row = np.full(dataset.store.n, -1, dtype=np.int64)
        bag_index = {b.id: i for i, b in enumerate(dataset.bags)}
        for b in dataset.bags:
            bag_of_row[b.start : b.end] = bag_index[b.id]
        chosen_local, flags = _sample_labeled_per_bag(
            core_global, bag_of_row, selected, bag_index, spec.instance_shot, s_label
        )
    else:
        chosen_local, flags = sample_labeled_instances(
            core_labels, spec.instance_shot, s_label, dataset.num_classes
        )

    labeled_rows = core_global[chosen_local]
    labeled_classes = core_labels[chosen_local]
    mask = np.ones(core_global.size, dtype=bool)
    mask[chosen_local] = False
    unlabeled_rows = core_global[mask]
    split = FewShotSplit(
        selected_bags=selected,
        labeled_rows=labeled_rows,
        labeled_classes=labeled_classes,
        unlabeled_rows=unlabeled_rows,
        seed=spec.seed,
        flags=flags,
    )
    split.check(dataset, spec)
    return split
