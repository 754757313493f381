"""Fault hierarchy, LCA distances and soft-label embeddings.

Taxonomy documents are JSON, one object per node::

    {"name": "root", "children": [
        {"name": "P1", "children": [{"name": "L11", "children": []},
                                    {"name": "L12", "children": []}]},
        {"name": "P2", "children": [{"name": "L21", "children": []},
                                    {"name": "L22", "children": []}]}]}

Leaves are nodes with an empty ``children`` list. Class indices are assigned
to leaves depth-first, left to right.
"""
import json
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from utils import parse_json_document

logger = logging.getLogger(__name__)


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class TaxonomyNode:
    name: str
    parent: Optional[int]
    children: Tuple[int, ...]
    depth: int


@dataclass(frozen=True)
class TaxonomyTree:
    nodes: Tuple[TaxonomyNode, ...]
    leaf_index: Tuple[int, ...]
    height: int

    @property
    def num_classes(self) -> int:
        return len(self.leaf_index)

    @property
    def leaf_names(self) -> Tuple[str, ...]:
        return tuple(self.nodes[n].name for n in self.leaf_index)

    @property
    def uniform_depth(self) -> bool:
        return len({self.nodes[n].depth for n in self.leaf_index}) == 1

    def leaf_of(self, name: str) -> int:
        """Class index of the leaf called ``name``."""
        try:
            return self.leaf_names.index(name)
        except ValueError:
            raise TaxonomyError(f"unknown leaf '{name}'")

    def check_leaf(self, i: int) -> int:
        if not isinstance(i, (int, np.integer)) or not 0 <= int(i) < self.num_classes:
            raise TaxonomyError(f"leaf index {i} out of range [0, {self.num_classes})")
        return int(i)

    def ancestors(self, node: int) -> List[int]:
        """Path from ``node`` up to the root, inclusive."""
        path = [node]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path


@dataclass(frozen=True)
class SoftLabelMatrix:
    beta: float
    values: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self.values[i]


def _build(root: dict) -> TaxonomyTree:
    nodes: List[TaxonomyNode] = []
    leaves: List[int] = []

    def visit(obj, parent: Optional[int], depth: int, trail: str) -> int:
        if not isinstance(obj, dict):
            raise TaxonomyError(f"node at {trail} must be an object")
        name = obj.get("name")
        children = obj.get("children", [])
        if not isinstance(name, str) or not name:
            raise TaxonomyError(f"node at {trail} needs a nonempty text 'name'")
        if not isinstance(children, list):
            raise TaxonomyError(f"'children' of {name} must be a list")
        extra = set(obj) - {"name", "children"}
        if extra:
            raise TaxonomyError(f"node {name} has unknown fields: {', '.join(sorted(extra))}")

        idx = len(nodes)
        nodes.append(TaxonomyNode(name=name, parent=parent, children=(), depth=depth))
        kids = [visit(child, idx, depth + 1, f"{trail}/{name}") for child in children]
        nodes[idx] = TaxonomyNode(name=name, parent=parent, children=tuple(kids), depth=depth)
        if not kids:
            leaves.append(idx)
        return idx

    visit(root, None, 0, "")
    if len(nodes) == 1:
        raise TaxonomyError("taxonomy is empty: the root has no children")

    names = [nodes[i].name for i in leaves]
    seen = set()
    for name in names:
        if name in seen:
            raise TaxonomyError(f"duplicate leaf name '{name}'")
        seen.add(name)
    if len(leaves) < 2:
        raise TaxonomyError(f"taxonomy needs at least 2 leaves, found {len(leaves)}")

    height = max(nodes[i].depth for i in leaves)
    return TaxonomyTree(nodes=tuple(nodes), leaf_index=tuple(leaves), height=height)


def parse_taxonomy(document: str) -> TaxonomyTree:
    """Parse a JSON taxonomy document into a validated tree."""
    try:
        root = parse_json_document(document, what="taxonomy document")
    except ValueError as e:
        raise TaxonomyError(str(e)) from e
    tree = _build(root)
    logger.debug(f"Parsed taxonomy with {tree.num_classes} leaves, height {tree.height}")
    return tree


def taxonomy_to_dict(tree: TaxonomyTree, node: int = 0) -> dict:
    n = tree.nodes[node]
    return {"name": n.name, "children": [taxonomy_to_dict(tree, c) for c in n.children]}


def serialize_taxonomy(tree: TaxonomyTree) -> str:
    return json.dumps(taxonomy_to_dict(tree), indent=2)


def taxonomy_from_dict(root: dict) -> TaxonomyTree:
    return _build(root)


def prune_leaf(tree: TaxonomyTree, leaf: int) -> TaxonomyTree:
    """Drop one leaf, then every internal node left without children."""
    leaf = tree.check_leaf(leaf)
    target = tree.leaf_index[leaf]

    def rebuild(node: int) -> Optional[dict]:
        if node == target:
            return None
        n = tree.nodes[node]
        if not n.children:
            return {"name": n.name, "children": []}
        kept = [c for c in (rebuild(child) for child in n.children) if c is not None]
        if not kept:
            return None
        return {"name": n.name, "children": kept}

    pruned = rebuild(0)
    if pruned is None:
        raise TaxonomyError("pruning removed the whole taxonomy")
    return _build(pruned)


def siblings(tree: TaxonomyTree, i: int, j: int) -> bool:
    a, b = tree.leaf_index[tree.check_leaf(i)], tree.leaf_index[tree.check_leaf(j)]
    return a != b and tree.nodes[a].parent == tree.nodes[b].parent


def lca_levels(tree: TaxonomyTree, i: int, j: int) -> int:
    """Height of the lowest common ancestor: h_T - depth(LCA); 0 iff i == j."""
    i, j = tree.check_leaf(i), tree.check_leaf(j)
    if not tree.uniform_depth:
        raise TaxonomyError("LCA distance requires all leaves at the same depth")
    if i == j:
        return 0
    up_i = tree.ancestors(tree.leaf_index[i])
    on_path = set(tree.ancestors(tree.leaf_index[j]))
    lca = next(n for n in up_i if n in on_path)
    return tree.height - tree.nodes[lca].depth


def lca_distance(tree: TaxonomyTree, i: int, j: int) -> float:
    """Normalized LCA distance in [0, 1]."""
    return lca_levels(tree, i, j) / tree.height


def distance_matrix(tree: TaxonomyTree) -> np.ndarray:
    K = tree.num_classes
    D = np.zeros((K, K))
    for i in range(K):
        for j in range(i + 1, K):
            D[i, j] = D[j, i] = lca_distance(tree, i, j)
    return D


def soft_label_matrix(tree: TaxonomyTree, beta: float) -> SoftLabelMatrix:
    """Row i is the soft label of leaf i: softmax over k of -beta * d(k, i)."""
    if not isinstance(beta, (int, float, np.floating)) or not math.isfinite(beta) or beta <= 0:
        raise TaxonomyError(f"beta must be finite and > 0, got {beta}")
    # scipy's softmax subtracts the row max before exponentiating
    values = softmax(-float(beta) * distance_matrix(tree), axis=1)
    values.setflags(write=False)
    return SoftLabelMatrix(beta=float(beta), values=values)


def one_hot(K: int, k: int) -> np.ndarray:
    if K < 1 or not 0 <= k < K:
        raise TaxonomyError(f"class index {k} out of range for K={K}")
    v = np.zeros(K)
    v[k] = 1.0
    return v


def one_hot_matrix(K: int) -> SoftLabelMatrix:
    """Flat labels, the beta -> infinity limit of the soft-label embedding."""
    values = np.eye(K)
    values.setflags(write=False)
    return SoftLabelMatrix(beta=math.inf, values=values)
