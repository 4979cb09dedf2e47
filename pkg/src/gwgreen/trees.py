"""Sampling of multi-type branching trees to finite depth.

Trees are stored as flat arrays in breadth-first order: depths are
nondecreasing, each node's children occupy a contiguous index block, and the
children of one configuration are expanded in label order (all label-0
children first).  Per-node RNG keys are derived from (seed, path), making a
tree a pure function of (law, root_label, depth, seed) regardless of
traversal or thread count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import backend
from .model import BranchingProcess, OffspringConfig


@dataclass
class SampledTree:
    """Flat breadth-first tree with per-node labels.

    Nodes at the depth cutoff carry no sampled children; they are boundary
    markers, not law violations.
    """

    labels: np.ndarray
    parents: np.ndarray
    child_start: np.ndarray
    child_count: np.ndarray
    depths: np.ndarray
    depth_cutoff: int
    root_label: int
    seed: int
    n_labels: int

    def __post_init__(self):
        for arr in (self.labels, self.parents, self.child_start,
                    self.child_count, self.depths):
            arr.flags.writeable = False

    @property
    def n_nodes(self) -> int:
        return int(self.labels.size)

    def children(self, x: int) -> np.ndarray:
        s = int(self.child_start[x])
        return np.arange(s, s + int(self.child_count[x]), dtype=np.int64)

    def is_cutoff(self, x: int) -> bool:
        return int(self.depths[x]) == self.depth_cutoff


def sample_tree(b: BranchingProcess, root_label: int, depth: int,
                seed: int) -> SampledTree:
    """Draw a tree of the given depth; every node's configuration is an
    independent draw from the law of its label."""
    if not (0 <= root_label < b.n_labels):
        raise ValueError("root_label out of range")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    if not b.satisfies_condition_f():
        raise ValueError("law admits extinction (a zero-size configuration); "
                         "sampled trees must keep every interior node branching")
    cfg_counts, cfg_cum, cfg_ptr = b.sampling_tables()
    labels, parents, child_start, child_count, depths = backend.sample_tree_kernel(
        cfg_counts, cfg_cum, cfg_ptr, root_label, depth, np.uint64(seed))
    return SampledTree(labels=labels, parents=parents, child_start=child_start,
                       child_count=child_count, depths=depths,
                       depth_cutoff=depth, root_label=root_label,
                       seed=int(seed), n_labels=b.n_labels)


def sphere(tree: SampledTree, n: int) -> np.ndarray:
    """Node ids at distance exactly n from the root."""
    if not (0 <= n <= tree.depth_cutoff):
        raise ValueError("sphere index outside sampled depth")
    lo = int(np.searchsorted(tree.depths, n, side="left"))
    hi = int(np.searchsorted(tree.depths, n, side="right"))
    return np.arange(lo, hi, dtype=np.int64)


def ball_size(tree: SampledTree, n: int) -> int:
    if not (0 <= n <= tree.depth_cutoff):
        raise ValueError("ball index outside sampled depth")
    return int(np.searchsorted(tree.depths, n, side="right"))


def choose_o_prime(tree: SampledTree) -> int | None:
    """First root child (in child order) carrying the root's label; None when
    no such child exists."""
    kids = tree.children(0)
    match = kids[tree.labels[kids] == tree.root_label]
    return int(match[0]) if match.size else None


@dataclass(frozen=True)
class TwoSphereClass:
    """Label counts of the root sphere and of the o'-sphere."""

    n: OffspringConfig
    m: OffspringConfig


def classify_two_sphere(tree: SampledTree) -> TwoSphereClass:
    """Equivalence class of the two-sphere through o'.

    n counts the labels of the root's children, m those of o''s children
    (all zero when o' is absent).
    """
    L = tree.n_labels
    kids = tree.children(0)
    n_counts = np.bincount(tree.labels[kids], minlength=L)
    op = choose_o_prime(tree)
    if op is None:
        m_counts = np.zeros(L, dtype=np.int64)
    else:
        if tree.depth_cutoff < 2:
            raise ValueError("two-sphere classification needs depth >= 2 "
                             "when o' exists")
        op_kids = tree.children(op)
        m_counts = np.bincount(tree.labels[op_kids], minlength=L)
    return TwoSphereClass(n=OffspringConfig.from_counts(n_counts),
                          m=OffspringConfig.from_counts(m_counts))


def subtree(tree: SampledTree, x: int) -> SampledTree:
    """Forward subtree rooted at x, re-indexed breadth-first."""
    if not (0 <= x < tree.n_nodes):
        raise ValueError("node id out of range")
    order = [x]
    i = 0
    while i < len(order):
        v = order[i]
        i += 1
        s = int(tree.child_start[v])
        order.extend(range(s, s + int(tree.child_count[v])))
    idx = np.asarray(order, dtype=np.int64)
    cc = tree.child_count[idx].copy()
    cs = np.empty(idx.size, dtype=np.int64)
    cs[0] = 1
    np.cumsum(cc[:-1] + 0, out=cs[1:])
    cs[1:] += 1
    parents = np.empty(idx.size, dtype=np.int64)
    parents[0] = -1
    pos = 1
    for new_id in range(idx.size):
        k = int(cc[new_id])
        parents[pos:pos + k] = new_id
        pos += k
    return SampledTree(labels=tree.labels[idx].copy(), parents=parents,
                       child_start=cs, child_count=cc,
                       depths=(tree.depths[idx] - tree.depths[x]).copy(),
                       depth_cutoff=tree.depth_cutoff - int(tree.depths[x]),
                       root_label=int(tree.labels[x]), seed=tree.seed,
                       n_labels=tree.n_labels)


def structural_check(tree: SampledTree, b: BranchingProcess | None = None) -> None:
    """Raise if the flat representation is inconsistent, violates the
    branching condition, or (when the law is given) contains a child
    configuration outside the law's support."""
    n = tree.n_nodes
    if tree.parents[0] != -1 or tree.depths[0] != 0 \
            or tree.labels[0] != tree.root_label:
        raise AssertionError("malformed root")
    if np.any(np.diff(tree.depths) < 0):
        raise AssertionError("depths not breadth-first ordered")
    seen = np.zeros(n, dtype=bool)
    seen[0] = True
    supports = None
    if b is not None:
        supports = [{cfg.items for cfg, _ in row} for row in b.table]
    for v in range(n):
        s = int(tree.child_start[v])
        k = int(tree.child_count[v])
        kids = np.arange(s, s + k)
        if k:
            if np.any(kids >= n) or np.any(seen[kids]):
                raise AssertionError("child block overlap or overflow")
            seen[kids] = True
            if np.any(tree.parents[kids] != v):
                raise AssertionError("parent backlinks inconsistent")
            if np.any(tree.depths[kids] != tree.depths[v] + 1):
                raise AssertionError("child depth mismatch")
            lab = tree.labels[kids]
            if np.any(np.diff(lab) < 0):
                raise AssertionError("children not label-sorted")
        if int(tree.depths[v]) < tree.depth_cutoff:
            if k == 0:
                raise AssertionError("interior node without children")
            if supports is not None:
                counts = np.bincount(tree.labels[kids], minlength=tree.n_labels)
                cfg = OffspringConfig.from_counts(counts)
                if cfg.items not in supports[int(tree.labels[v])]:
                    raise AssertionError("child configuration outside the law")
        elif k != 0:
            raise AssertionError("cutoff node with children")
    if not seen.all():
        raise AssertionError("orphan nodes")


def tree_to_json(tree: SampledTree) -> dict:
    nodes = []
    for v in range(tree.n_nodes):
        nodes.append({
            "id": v,
            "label": int(tree.labels[v]),
            "parent": int(tree.parents[v]),
            "depth": int(tree.depths[v]),
            "children": [int(c) for c in tree.children(v)],
        })
    return {"root_label": tree.root_label, "depth": tree.depth_cutoff,
            "seed": tree.seed, "n_labels": tree.n_labels, "nodes": nodes}


def write_tree_json(path, tree: SampledTree) -> None:
    with open(path, "w") as fh:
        json.dump(tree_to_json(tree), fh, indent=2)
        fh.write("\n")
