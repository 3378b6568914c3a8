"""Aggregation trees over series.

A tree node's value (and, in this package, its feature vector) is the sum
of its descendant bottom-level series. Sums run in ascending leaf order so
aggregates are exact with respect to that fixed 64-bit order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError


@dataclass
class HierarchyTree:
    """Nodes with parent links; leaves carry a row index into the bottom set.

    Node 0 is the root. ``parents[i]`` is -1 for the root, otherwise the
    parent's node id. ``leaf_rows[i]`` is the bottom-series row for leaf
    nodes and -1 for internal nodes.
    """

    parents: list
    leaf_rows: list

    def __post_init__(self):
        n = len(self.parents)
        if len(self.leaf_rows) != n:
            raise DimensionError("parents and leaf_rows must have equal length")
        roots = [i for i, p in enumerate(self.parents) if p == -1]
        if roots != [0]:
            raise DimensionError("tree must have exactly node 0 as its root")
        for i, p in enumerate(self.parents):
            if i > 0 and not (0 <= p < n):
                raise DimensionError(f"node {i} has invalid parent {p}")
        rows = sorted(r for r in self.leaf_rows if r != -1)
        if rows != list(range(len(rows))):
            raise DimensionError("leaf rows must cover 0..n_leaves-1 exactly once")

    @property
    def n_nodes(self):
        return len(self.parents)

    @property
    def n_leaves(self):
        return sum(1 for r in self.leaf_rows if r != -1)

    def depths(self):
        out = np.zeros(self.n_nodes, dtype=int)
        for i in range(1, self.n_nodes):
            out[i] = out[self.parents[i]] + 1
        return out

    def leaf_groups(self):
        """Per node: ascending bottom-row indices of its descendant leaves."""
        children = [[] for _ in range(self.n_nodes)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                children[p].append(i)
        groups = [None] * self.n_nodes
        for i in range(self.n_nodes - 1, -1, -1):  # children are created after parents
            if self.leaf_rows[i] != -1:
                groups[i] = [self.leaf_rows[i]]
            else:
                acc = []
                for ch in children[i]:
                    acc.extend(groups[ch])
                groups[i] = sorted(acc)
        return groups

    def ancestor_at_depth(self, node, depth):
        d = self.depths()
        while d[node] > depth:
            node = self.parents[node]
        return node

    def to_dict(self):
        return {"parents": list(map(int, self.parents)),
                "leaf_rows": list(map(int, self.leaf_rows))}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["parents"]), list(d["leaf_rows"]))


def balanced_tree(fanouts) -> HierarchyTree:
    """Build a balanced tree: root at level 0, fanouts[k] children per level-k node."""
    parents = [-1]
    frontier = [0]
    for fan in fanouts:
        nxt = []
        for node in frontier:
            for _ in range(fan):
                parents.append(node)
                nxt.append(len(parents) - 1)
        frontier = nxt
    leaf_rows = [-1] * len(parents)
    for row, node in enumerate(frontier):
        leaf_rows[node] = row
    return HierarchyTree(parents, leaf_rows)


def aggregate_features(z_bottom, tree: HierarchyTree):
    """Stack every node's feature: leaves verbatim, internals as exact sums.

    z_bottom: Tensor or array [S, ...] (series axis leading). Output row k
    corresponds to tree node k.
    """
    z_bottom = T.as_tensor(z_bottom)
    if tree.n_leaves != z_bottom.shape[0]:
        raise DimensionError(
            f"tree has {tree.n_leaves} leaves but features have {z_bottom.shape[0]} rows")
    return T.aggregate_rows(z_bottom, tree.leaf_groups())


def aggregate_targets(y_bottom, tree: HierarchyTree) -> np.ndarray:
    """Same fixed-order summation on plain arrays (targets, metrics)."""
    y_bottom = np.asarray(y_bottom)
    if tree.n_leaves != y_bottom.shape[0]:
        raise DimensionError(
            f"tree has {tree.n_leaves} leaves but targets have {y_bottom.shape[0]} rows")
    rows = []
    for grp in tree.leaf_groups():
        acc = y_bottom[grp[0]].copy()
        for i in grp[1:]:
            acc = acc + y_bottom[i]
        rows.append(acc)
    return np.stack(rows, axis=0)
