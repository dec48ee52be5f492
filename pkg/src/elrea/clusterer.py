"""BIRCH clustering of gradient directions, with re-clustering of oversized
clusters.

The CF-tree is built incrementally over a seeded sample; its leaf-entry
centroids are then merged agglomeratively (single linkage) down to exactly K
global clusters, and every instance is assigned to the nearest normalized
global centroid. Clusters larger than ratio times the smallest are re-fit on
their own members for up to three iterations, each iteration targeting one
fewer sub-cluster.
"""

from __future__ import annotations

import csv
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import store
from .gradfeat import FeatureMatrix

_SAMPLE_TAG = zlib.crc32(b"cluster-sample")


class ClusterError(ValueError):
    pass


class DegenerateFeaturesError(ClusterError):
    """Too little structure to produce the requested number of clusters."""


@dataclass
class BirchParams:
    threshold: float = 0.5
    branching: int = 50
    k: int = 5

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.branching < 2:
            raise ValueError("branching factor must be >= 2")
        if self.k < 2:
            raise ValueError("cluster target must be >= 2")


# --- clustering-feature tree --------------------------------------------


class CFEntry:
    """Clustering-feature triple (count, linear sum, squared-norm sum),
    optionally owning a child node."""

    __slots__ = ("n", "ls", "ss", "child")

    def __init__(self, n, ls, ss, child=None):
        self.n = n
        self.ls = ls
        self.ss = ss
        self.child = child

    @classmethod
    def of_point(cls, x):
        return cls(1, x.copy(), float(x @ x))

    def centroid(self):
        return self.ls / self.n

    def add_point(self, x):
        self.n += 1
        self.ls = self.ls + x
        self.ss += float(x @ x)

    def absorb_radius(self, x):
        """Radius of this entry's CF after hypothetically absorbing x."""
        n = self.n + 1
        ls = self.ls + x
        ss = self.ss + float(x @ x)
        r2 = ss / n - float(ls @ ls) / (n * n)
        return np.sqrt(max(0.0, r2))


class CFNode:
    __slots__ = ("is_leaf", "entries")

    def __init__(self, is_leaf):
        self.is_leaf = is_leaf
        self.entries = []


def _entry_of_node(node):
    n = sum(e.n for e in node.entries)
    ls = np.sum([e.ls for e in node.entries], axis=0)
    ss = float(sum(e.ss for e in node.entries))
    return CFEntry(n, ls, ss, child=node)


def _nearest_entry(entries, x):
    cents = np.stack([e.centroid() for e in entries])
    d2 = ((cents - x) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def _split_node(node):
    """Two nodes seeded by the farthest entry pair, members to nearest seed."""
    cents = np.stack([e.centroid() for e in node.entries])
    sq = (cents * cents).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (cents @ cents.T)
    i, j = np.unravel_index(int(np.argmax(d2)), d2.shape)
    left, right = CFNode(node.is_leaf), CFNode(node.is_leaf)
    for k, e in enumerate(node.entries):
        if d2[k, i] <= d2[k, j]:
            left.entries.append(e)
        else:
            right.entries.append(e)
    return _entry_of_node(left), _entry_of_node(right)


class CFTree:
    def __init__(self, threshold, branching):
        self.threshold = threshold
        self.branching = branching
        self.root = CFNode(is_leaf=True)

    def insert(self, x):
        split = self._insert(self.root, x)
        if split is not None:
            new_root = CFNode(is_leaf=False)
            new_root.entries.extend(split)
            self.root = new_root

    def _insert(self, node, x):
        if node.is_leaf:
            if node.entries:
                i = _nearest_entry(node.entries, x)
                if node.entries[i].absorb_radius(x) <= self.threshold:
                    node.entries[i].add_point(x)
                    return None
            node.entries.append(CFEntry.of_point(x))
        else:
            i = _nearest_entry(node.entries, x)
            chosen = node.entries[i]
            split = self._insert(chosen.child, x)
            if split is None:
                chosen.add_point(x)
            else:
                node.entries[i : i + 1] = list(split)
        if len(node.entries) > self.branching:
            return _split_node(node)
        return None

    def leaf_entries(self):
        """Leaf CF entries in left-to-right tree order (insertion-stable)."""
        out = []

        def walk(node):
            if node.is_leaf:
                out.extend(node.entries)
            else:
                for e in node.entries:
                    walk(e.child)

        walk(self.root)
        return out


# --- fitted model -------------------------------------------------------


@dataclass
class ClusterModel:
    assignments: dict  # instance id -> cluster id, 1..C
    centroids: np.ndarray  # (C, d), unit rows
    sizes: list
    history: list = field(default_factory=list)
    fit_sample_ids: list = field(default_factory=list)
    birch: BirchParams | None = None
    sample_cap: int = 5000
    seed: int = 0

    @property
    def n_clusters(self):
        return self.centroids.shape[0]

    def members(self, c):
        return sorted(i for i, a in self.assignments.items() if a == c)


def centroids(features, assignments):
    """Normalized per-cluster mean directions, ordered by cluster id."""
    pos = {i: k for k, i in enumerate(features.ids)}
    extraneous = set(assignments) - set(pos)
    if extraneous:
        raise ClusterError(f"assignments reference unknown ids: {sorted(extraneous)[:3]}")
    labels = sorted(set(assignments.values()))
    out = []
    for c in labels:
        idx = [pos[i] for i in features.ids if assignments.get(i) == c]
        if not idx:
            raise ClusterError(f"cluster {c} is empty")
        mean = features.matrix[idx].mean(axis=0)
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise ClusterError(f"cluster {c} mean direction cancelled to zero")
        out.append(mean / norm)
    return np.stack(out)


def _fit_global_centroids(matrix, sample_idx, params):
    """CF-tree over the sample, then single-linkage merge of leaf centroids
    to exactly K; returns normalized global centroids (K, d)."""
    tree = CFTree(params.threshold, params.branching)
    for i in sample_idx:
        tree.insert(matrix[i])
    entries = tree.leaf_entries()
    if len(entries) < params.k:
        raise DegenerateFeaturesError(
            f"{len(entries)} distinct feature groups cannot form {params.k} clusters"
        )
    cents = np.stack([e.centroid() for e in entries])
    groups = fcluster(linkage(cents, method="single"), t=params.k, criterion="maxclust")
    if len(set(groups)) != params.k:
        raise DegenerateFeaturesError(
            f"linkage ties merged the sample into {len(set(groups))} groups, not {params.k}"
        )
    out = []
    for g in sorted(set(groups)):
        sel = [e for e, gi in zip(entries, groups) if gi == g]
        total = sum(e.n for e in sel)
        mean = np.sum([e.ls for e in sel], axis=0) / total
        norm = float(np.linalg.norm(mean))
        if norm < 1e-12:
            raise DegenerateFeaturesError(f"global group {g} cancelled to zero")
        out.append(mean / norm)
    return np.stack(out)


def assign_nearest(matrix, cents):
    """Nearest-centroid labels (1-based); ties take the lowest cluster id."""
    # expanded form keeps the (N, C) distance table small at full scale
    d2 = (cents * cents).sum(axis=1)[None, :] - 2.0 * (matrix @ cents.T)
    return np.argmin(d2, axis=1) + 1


def birch_fit(features, sample_cap, params, seed):
    """Fit on a seeded sample, then label every instance by nearest centroid."""
    n = len(features.ids)
    if n < params.k:
        raise ClusterError(f"{n} instances cannot form {params.k} clusters")
    rng = np.random.default_rng([seed, _SAMPLE_TAG])
    take = min(n, sample_cap)
    sample_idx = rng.permutation(n)[:take]
    cents = _fit_global_centroids(features.matrix, sample_idx, params)
    labels = assign_nearest(features.matrix, cents)
    assignments = {i: int(l) for i, l in zip(features.ids, labels)}
    model = ClusterModel(
        assignments=assignments,
        centroids=np.empty((0, features.matrix.shape[1])),
        sizes=[],
        fit_sample_ids=[features.ids[i] for i in sample_idx],
        birch=params,
        sample_cap=sample_cap,
        seed=seed,
    )
    _refresh(model, features)
    return model


def _refresh(model, features):
    """Drop empty labels, relabel contiguously, recompute centroids/sizes."""
    present = sorted(set(model.assignments.values()))
    remap = {old: new for new, old in enumerate(present, start=1)}
    model.assignments = {i: remap[c] for i, c in model.assignments.items()}
    model.centroids = centroids(features, model.assignments)
    counts = {}
    for c in model.assignments.values():
        counts[c] = counts.get(c, 0) + 1
    model.sizes = [counts[c] for c in range(1, len(present) + 1)]


def _sub_features(features, member_ids):
    pos = {i: k for k, i in enumerate(features.ids)}
    rows = features.matrix[[pos[i] for i in member_ids]]
    return FeatureMatrix(ids=list(member_ids), matrix=rows, spec=features.spec)


def rebalance(model, features, max_iter=3, ratio=5.0):
    """Re-cluster oversized clusters in place, at most max_iter times.

    At iteration i every cluster bigger than ratio * min size is re-fit on
    its own members targeting max(2, K_initial - i) sub-clusters. A sub-fit
    that cannot produce that many clusters leaves its cluster intact and is
    recorded in the history.
    """
    k_initial = model.birch.k
    for i in range(1, max_iter + 1):
        min_size = min(model.sizes)
        oversized = [
            c for c, s in enumerate(model.sizes, start=1) if s > ratio * min_size
        ]
        if not oversized:
            break
        k_i = max(2, k_initial - i)
        events = []
        replacements = {}
        for c in oversized:
            members = model.members(c)
            sub = _sub_features(features, members)
            sub_params = BirchParams(model.birch.threshold, model.birch.branching, k_i)
            sub_seed = [model.seed, zlib.crc32(b"rebalance"), i, c]
            try:
                sub_cents = _fit_global_centroids(
                    sub.matrix,
                    np.random.default_rng(sub_seed + [_SAMPLE_TAG]).permutation(
                        len(members)
                    )[: min(len(members), model.sample_cap)],
                    sub_params,
                )
            except DegenerateFeaturesError as e:
                events.append({"cluster": c, "outcome": "kept", "reason": str(e)})
                continue
            sub_labels = assign_nearest(sub.matrix, sub_cents)
            replacements[c] = dict(zip(members, (int(l) for l in sub_labels)))
            events.append(
                {"cluster": c, "outcome": "split",
                 "parts": len(set(int(l) for l in sub_labels))}
            )
        model.history.append({"iteration": i, "target": k_i, "events": events})
        if not replacements:
            break
        next_label = 0
        new_assignments = {}
        for c in range(1, len(model.sizes) + 1):
            if c in replacements:
                sub_map = replacements[c]
                offsets = {}
                for s in sorted(set(sub_map.values())):
                    next_label += 1
                    offsets[s] = next_label
                for mid, s in sub_map.items():
                    new_assignments[mid] = offsets[s]
            else:
                next_label += 1
                for mid in model.members(c):
                    new_assignments[mid] = next_label
        model.assignments = new_assignments
        _refresh(model, features)
    return model


# --- reporting and IO ---------------------------------------------------


def cluster_report(model, tags):
    """Counts per (cluster, source tag).

    tags: dict instance id -> tag, or a list of objects with .id/.source_tag.
    Returns (tag_names, rows) where rows[c-1] holds that cluster's counts.
    """
    if not isinstance(tags, dict):
        tags = {e.id: e.source_tag for e in tags}
    names = sorted(set(tags.values()))
    col = {t: j for j, t in enumerate(names)}
    rows = [[0] * len(names) for _ in range(model.n_clusters)]
    for i, c in model.assignments.items():
        rows[c - 1][col[tags[i]]] += 1
    return names, rows


def write_report_csv(path, model, tags):
    names, rows = cluster_report(model, tags)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["cluster", "size"] + names + ["dominant_tag", "dominant_share"])
        for c, counts in enumerate(rows, start=1):
            size = sum(counts)
            top = int(np.argmax(counts))
            share = counts[top] / size if size else 0.0
            w.writerow([c, size] + counts + [names[top], repr(share)])


def save_cluster_model(out_dir, model):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "assignments.csv"), "w", encoding="utf-8",
              newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "cluster"])
        for i in sorted(model.assignments):
            w.writerow([i, model.assignments[i]])
    store.save_arrays(
        os.path.join(out_dir, "centroids.ckpt"), "centroids",
        {"centroids": model.centroids},
        {
            "sizes": model.sizes,
            "threshold": model.birch.threshold,
            "branching": model.birch.branching,
            "k": model.birch.k,
            "sample_cap": model.sample_cap,
            "seed": model.seed,
        },
    )
    store.write_json(
        os.path.join(out_dir, "history.json"),
        {"history": model.history, "fit_sample_ids": model.fit_sample_ids},
    )


def load_cluster_model(out_dir):
    assignments = {}
    with open(os.path.join(out_dir, "assignments.csv"), "r", encoding="utf-8") as f:
        for row in list(csv.reader(f))[1:]:
            assignments[row[0]] = int(row[1])
    kind, arrays, meta = store.load_arrays(os.path.join(out_dir, "centroids.ckpt"))
    if kind != "centroids":
        raise ValueError(f"{out_dir}: expected centroids checkpoint, got {kind}")
    hist = store.read_json(os.path.join(out_dir, "history.json"))
    return ClusterModel(
        assignments=assignments,
        centroids=arrays["centroids"],
        sizes=[int(s) for s in meta["sizes"]],
        history=hist["history"],
        fit_sample_ids=hist["fit_sample_ids"],
        birch=BirchParams(meta["threshold"], int(meta["branching"]), int(meta["k"])),
        sample_cap=int(meta["sample_cap"]),
        seed=int(meta["seed"]),
    )
