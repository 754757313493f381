"""Labeled feature datasets: synthetic hierarchical generator, CSV IO,
stratified splitting and leave-one-class-out partitioning."""
import csv
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from taxonomy import TaxonomyTree, prune_leaf, taxonomy_from_dict
from utils import format_float

logger = logging.getLogger(__name__)

# Per-leaf sample sizes of the hot rolling defect inventory
STEEL_SAMPLE_SIZES: Dict[str, int] = {
    "A10": 44, "A11": 92, "A12": 75,
    "A20": 135, "A21": 54,
    "A30": 127, "A31": 115,
    "A40": 18, "A41": 105,
    "A50": 89, "A51": 78,
    "A60": 72, "A61": 75,
    "A70": 96,
}


class DatasetError(ValueError):
    pass


def steel_taxonomy() -> TaxonomyTree:
    """Two-level defect tree: leaves grouped by major category (A1..A7)."""
    groups: Dict[str, list] = {}
    for leaf in STEEL_SAMPLE_SIZES:
        groups.setdefault(leaf[:2], []).append({"name": leaf, "children": []})
    return taxonomy_from_dict({
        "name": "defects",
        "children": [{"name": parent, "children": kids} for parent, kids in groups.items()],
    })


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    tree: TaxonomyTree
    provenance: str = ""
    sample_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] < 1:
            raise DatasetError("features must be a nonempty N x D matrix")
        if labels.shape != (features.shape[0],):
            raise DatasetError("labels must have one entry per feature row")
        if not np.all(np.isfinite(features)):
            raise DatasetError("features contain non-finite values")
        if labels.min() < 0 or labels.max() >= self.tree.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.tree.num_classes})")
        ids = np.arange(features.shape[0]) if self.sample_ids is None else np.asarray(self.sample_ids, dtype=np.int64)
        if ids.shape != labels.shape:
            raise DatasetError("sample_ids must have one entry per feature row")
        for arr in (features, labels, ids):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.tree.num_classes)

    def subset(self, index: np.ndarray, provenance: Optional[str] = None) -> "LabeledDataset":
        index = np.asarray(index)
        if index.size == 0:
            raise DatasetError("subset would be empty")
        return LabeledDataset(
            features=self.features[index],
            labels=self.labels[index],
            tree=self.tree,
            provenance=provenance or self.provenance,
            sample_ids=self.sample_ids[index],
        )


@dataclass(frozen=True)
class GeneratorSpec:
    feature_dim: int = 16
    counts: Mapping[str, int] = field(default_factory=lambda: dict(STEEL_SAMPLE_SIZES))
    parent_spread: float = 4.0
    child_spread: float = 1.0
    noise: float = 0.5
    seed: int = 0
    default_count: int = 50

    def validate(self) -> "GeneratorSpec":
        if self.feature_dim < 1:
            raise DatasetError("feature_dim must be >= 1")
        if not (self.parent_spread > self.child_spread > 0):
            raise DatasetError("spreads must satisfy parent_spread > child_spread > 0")
        if not self.noise > 0:
            raise DatasetError("noise must be > 0")
        if self.default_count < 1 or any(c < 1 for c in self.counts.values()):
            raise DatasetError("every per-leaf count must be >= 1")
        return self

    def count_for(self, leaf: str) -> int:
        return int(self.counts.get(leaf, self.default_count))


def generate_synthetic(tree: TaxonomyTree, spec: GeneratorSpec) -> LabeledDataset:
    """Gaussian leaf clusters whose means inherit from their parent's mean.

    Level-1 nodes draw a mean from N(0, parent_spread^2 I); every deeper node
    adds N(0, child_spread^2 I) to its parent's mean; samples add
    N(0, noise^2 I) to their leaf mean.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    D = spec.feature_dim
    means = {0: np.zeros(D)}
    # nodes are stored depth-first, so every parent precedes its children
    for idx, node in enumerate(tree.nodes[1:], start=1):
        spread = spec.parent_spread if node.depth == 1 else spec.child_spread
        means[idx] = means[node.parent] + spread * rng.standard_normal(D)

    blocks, labels = [], []
    for k, node_id in enumerate(tree.leaf_index):
        n = spec.count_for(tree.nodes[node_id].name)
        blocks.append(means[node_id] + spec.noise * rng.standard_normal((n, D)))
        labels.append(np.full(n, k))

    ds = LabeledDataset(
        features=np.vstack(blocks),
        labels=np.concatenate(labels),
        tree=tree,
        provenance=f"synthetic:seed={spec.seed}",
    )
    logger.info(f"Generated synthetic dataset: N={ds.size}, D={D}, K={tree.num_classes}")
    return ds


def leaf_means(ds: LabeledDataset) -> np.ndarray:
    return np.vstack([ds.features[ds.labels == k].mean(axis=0) for k in range(ds.tree.num_classes)])


def _largest_remainder(n: int, fractions: Sequence[float]) -> np.ndarray:
    quotas = np.asarray(fractions) * n
    counts = np.floor(quotas + 1e-9).astype(int)
    remainder = quotas - counts
    # stable sort keeps earlier partitions first on ties
    for p in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[p] += 1
    # every partition gets at least one sample of every class
    for p in np.flatnonzero(counts == 0):
        counts[np.argmax(counts)] -= 1
        counts[p] += 1
    return counts


def stratified_split(
    ds: LabeledDataset,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> Tuple[LabeledDataset, ...]:
    """Per-class shuffled split with largest-remainder rounding."""
    fractions = tuple(float(f) for f in fractions)
    if any(not f > 0 for f in fractions):
        raise DatasetError(f"split fractions must all be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"split fractions must sum to 1, got {sum(fractions)}")

    rng = np.random.default_rng(seed)
    parts = [[] for _ in fractions]
    for k in range(ds.tree.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if members.size == 0:
            continue
        if members.size < len(fractions):
            raise DatasetError(
                f"class '{ds.tree.leaf_names[k]}' has {members.size} samples, "
                f"fewer than the {len(fractions)} partitions"
            )
        members = rng.permutation(members)
        bounds = np.cumsum(_largest_remainder(members.size, fractions))[:-1]
        for part, chunk in zip(parts, np.split(members, bounds)):
            part.append(chunk)

    names = ("train", "val", "test") if len(fractions) == 3 else tuple(f"part{i}" for i in range(len(fractions)))
    return tuple(
        ds.subset(np.sort(np.concatenate(part)), provenance=f"{ds.provenance}|{name}")
        for part, name in zip(parts, names)
    )


def leave_out_class(ds: LabeledDataset, leaf: int) -> Tuple[LabeledDataset, LabeledDataset]:
    """Split into (known, novel); known is re-indexed against the pruned tree."""
    leaf = ds.tree.check_leaf(leaf)
    if ds.tree.num_classes - 1 < 2:
        raise DatasetError("leaving this class out leaves fewer than 2 known classes")
    novel_mask = ds.labels == leaf
    if not novel_mask.any():
        raise DatasetError(f"no samples of class '{ds.tree.leaf_names[leaf]}'")
    if novel_mask.all():
        raise DatasetError("no known samples remain")

    pruned = prune_leaf(ds.tree, leaf)
    remap = np.full(ds.tree.num_classes, -1)
    for old, name in enumerate(ds.tree.leaf_names):
        if old != leaf:
            remap[old] = pruned.leaf_of(name)

    left_out = ds.tree.leaf_names[leaf]
    known_idx = np.flatnonzero(~novel_mask)
    known = LabeledDataset(
        features=ds.features[known_idx],
        labels=remap[ds.labels[known_idx]],
        tree=pruned,
        provenance=f"{ds.provenance}|known-{left_out}",
        sample_ids=ds.sample_ids[known_idx],
    )
    novel = ds.subset(np.flatnonzero(novel_mask), provenance=f"{ds.provenance}|novel-{left_out}")
    logger.info(f"Left out {left_out}: {known.size} known, {novel.size} novel samples")
    return known, novel


_FEATURE_COLUMN = re.compile(r"^f(\d+)$")


def save_csv(ds: LabeledDataset, path: str) -> None:
    names = ds.tree.leaf_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(ds.feature_dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            writer.writerow([format_float(v) for v in row] + [names[label]])
    logger.info(f"Saved {ds.size} rows to {path}")


def load_csv(path: str, tree: TaxonomyTree) -> LabeledDataset:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: file is empty")
        if len(header) < 2 or header[-1] != "label":
            raise DatasetError(f"{path}: header must be f0..f{{D-1}},label")
        for i, col in enumerate(header[:-1]):
            m = _FEATURE_COLUMN.match(col)
            if not m or int(m.group(1)) != i:
                raise DatasetError(f"{path}: expected column f{i}, found '{col}'")

        width = len(header)
        features, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{line_no}: expected {width} fields, found {len(row)}")
            try:
                values = [float(v) for v in row[:-1]]
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: non-numeric feature value")
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}:{line_no}: non-finite feature value")
            try:
                labels.append(tree.leaf_of(row[-1].strip()))
            except ValueError:
                raise DatasetError(f"{path}:{line_no}: unknown leaf name '{row[-1]}'")
            features.append(values)

    if not features:
        raise DatasetError(f"{path}: no data rows")
    return LabeledDataset(
        features=np.array(features, dtype=np.float64),
        labels=np.array(labels),
        tree=tree,
        provenance=path,
    )
