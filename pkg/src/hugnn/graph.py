"""Graph containers, bundle serialization, homophily statistics, synthesis.

A dataset lives on disk as a *bundle* directory:

    meta.json      {"name", "n", "m", "d", "num_classes"}
    edges.tsv      one "u<TAB>v" per line, 0-indexed, u < v, sorted
    features.csv   n rows of d comma-separated decimals (17 significant digits)
    labels.csv     one integer per line; -1 marks an unlabeled node
    split.csv      one of train|val|test|unlabeled per line (optional)

Files are UTF-8 with LF newlines and round-trip byte-identically.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError
from .rng import Rng

ROLE_TRAIN, ROLE_VAL, ROLE_TEST, ROLE_UNLABELED = 0, 1, 2, 3
_ROLE_NAMES = ("train", "val", "test", "unlabeled")
_ROLE_IDS = {name: i for i, name in enumerate(_ROLE_NAMES)}

_ATTN_ROW_TOL = 1e-9


class Graph:
    """Undirected simple graph stored as sorted neighbor lists plus CSR arrays.

    ``indptr``/``indices`` give the flattened directed view: the neighbors of
    node i are ``indices[indptr[i]:indptr[i+1]]``, sorted ascending. ``edges``
    is the (m, 2) array of deduplicated undirected pairs with u < v.
    """

    def __init__(self, n: int, edge_pairs) -> None:
        if n < 1:
            raise ContractError(f"graph needs at least one node, got n={n}")
        self.n = int(n)
        seen: set[tuple[int, int]] = set()
        dropped = 0
        for u, v in edge_pairs:
            u, v = int(u), int(v)
            if not (0 <= u < n and 0 <= v < n):
                raise ContractError(f"edge ({u},{v}) out of range for n={n}")
            if u == v:
                dropped += 1
                continue
            key = (u, v) if u < v else (v, u)
            if key in seen:
                dropped += 1
            else:
                seen.add(key)
        self.dropped_edges = dropped
        self.edges = (np.array(sorted(seen), dtype=np.int64).reshape(-1, 2)
                      if seen else np.zeros((0, 2), dtype=np.int64))
        self.m = self.edges.shape[0]

        neighbor_sets: list[list[int]] = [[] for _ in range(n)]
        for u, v in self.edges:
            neighbor_sets[u].append(int(v))
            neighbor_sets[v].append(int(u))
        self.neighbors = [sorted(ns) for ns in neighbor_sets]
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        for i, ns in enumerate(self.neighbors):
            self.indptr[i + 1] = self.indptr[i] + len(ns)
        self.indices = (np.concatenate([np.array(ns, dtype=np.int64)
                                        for ns in self.neighbors])
                        if self.indptr[-1] else np.zeros(0, dtype=np.int64))

    def degree(self, i: int) -> int:
        return int(self.indptr[i + 1] - self.indptr[i])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def has_edge(self, u: int, v: int) -> bool:
        if u > v:
            u, v = v, u
        lo, hi = self.indptr[u], self.indptr[u + 1]
        pos = np.searchsorted(self.indices[lo:hi], v)
        return pos < hi - lo and self.indices[lo + pos] == v

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.m})"


@dataclass
class DatasetBundle:
    """Graph topology plus features, labels, roles, and metadata."""

    graph: Graph
    features: np.ndarray            # (n, d) float64
    labels: np.ndarray              # (n,) int64, -1 when unlabeled
    roles: np.ndarray               # (n,) int8 of ROLE_* codes
    name: str = "unnamed"

    def __post_init__(self) -> None:
        n = self.graph.n
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.roles = np.ascontiguousarray(self.roles, dtype=np.int8)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ContractError(
                f"features must be (n, d) with n={n}, got {self.features.shape}")
        if self.labels.shape != (n,):
            raise ContractError(f"labels must have shape ({n},), got {self.labels.shape}")
        if self.roles.shape != (n,):
            raise ContractError(f"roles must have shape ({n},), got {self.roles.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain non-finite values")
        train_unlabeled = (self.roles == ROLE_TRAIN) & (self.labels < 0)
        if np.any(train_unlabeled):
            bad = int(np.flatnonzero(train_unlabeled)[0])
            raise ContractError(f"train node {bad} has no label")

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_classes(self) -> int:
        labeled = self.labels[self.labels >= 0]
        if labeled.size == 0:
            raise ContractError("bundle has no labeled nodes")
        return int(labeled.max()) + 1

    def mask(self, role: str) -> np.ndarray:
        if role not in _ROLE_IDS:
            raise ContractError(f"unknown role '{role}'; expected one of {_ROLE_NAMES}")
        return self.roles == _ROLE_IDS[role]

    def copy(self) -> "DatasetBundle":
        return DatasetBundle(
            graph=Graph(self.n, [tuple(e) for e in self.graph.edges]),
            features=self.features.copy(),
            labels=self.labels.copy(),
            roles=self.roles.copy(),
            name=self.name,
        )


@dataclass
class HomophilyReport:
    h_one_hop: float
    h_two_hop: float
    degree_histogram: dict[int, int] = field(default_factory=dict)
    max_degree: int = 0


# ---------------------------------------------------------------------------
# bundle serialization


def _write_text(path: str, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line)
            fh.write("\n")


def save_bundle(bundle: DatasetBundle, path: str) -> None:
    """Write the bundle directory; deterministic byte-for-byte output."""
    os.makedirs(path, exist_ok=True)
    meta = {
        "name": bundle.name,
        "n": bundle.n,
        "m": bundle.graph.m,
        "d": bundle.d,
        "num_classes": bundle.num_classes,
    }
    with open(os.path.join(path, "meta.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_text(os.path.join(path, "edges.tsv"),
                [f"{u}\t{v}" for u, v in bundle.graph.edges])
    _write_text(os.path.join(path, "features.csv"),
                [",".join("%.17g" % x for x in row) for row in bundle.features])
    _write_text(os.path.join(path, "labels.csv"),
                [str(int(y)) for y in bundle.labels])
    _write_text(os.path.join(path, "split.csv"),
                [_ROLE_NAMES[r] for r in bundle.roles])


def _read_lines(dirpath: str, fname: str) -> list[str]:
    full = os.path.join(dirpath, fname)
    if not os.path.isfile(full):
        raise DataError(f"bundle is missing required file '{fname}'", file=full)
    with open(full, "r", encoding="utf-8") as fh:
        return [ln.rstrip("\n") for ln in fh if ln.strip() != ""]


def load_bundle(path: str, split_seed: int = 0) -> DatasetBundle:
    """Read and validate a bundle directory.

    Duplicate and self-loop edges are dropped (the count is kept on the
    graph). A missing split.csv triggers deterministic split generation:
    20 train nodes per class, then 500 val / 1000 test when the node count
    permits, otherwise a 50/50 split of the remainder.
    """
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise DataError("bundle is missing required file 'meta.json'", file=meta_path)
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"meta.json is not valid JSON: {exc}", file=meta_path)
    for key in ("name", "n", "m", "d", "num_classes"):
        if key not in meta:
            raise DataError(f"meta.json lacks required key '{key}'", file=meta_path)
    n, d, num_classes = int(meta["n"]), int(meta["d"]), int(meta["num_classes"])

    edge_file = os.path.join(path, "edges.tsv")
    pairs: list[tuple[int, int]] = []
    for lineno, line in enumerate(_read_lines(path, "edges.tsv"), start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError("expected 'u<TAB>v'", file=edge_file, line=lineno)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError(f"non-integer endpoint in '{line}'", file=edge_file, line=lineno)
        if not (0 <= u < n and 0 <= v < n):
            raise DataError(f"endpoint out of range for n={n}", file=edge_file, line=lineno)
        pairs.append((u, v))
    graph = Graph(n, pairs)

    feat_file = os.path.join(path, "features.csv")
    feat_lines = _read_lines(path, "features.csv")
    if len(feat_lines) != n:
        raise DataError(f"expected {n} feature rows, found {len(feat_lines)}", file=feat_file)
    features = np.empty((n, d))
    for lineno, line in enumerate(feat_lines, start=1):
        cells = line.split(",")
        if len(cells) != d:
            raise DataError(f"expected {d} columns, found {len(cells)}",
                            file=feat_file, line=lineno)
        try:
            features[lineno - 1] = [float(c) for c in cells]
        except ValueError:
            raise DataError("non-numeric feature value", file=feat_file, line=lineno)

    label_file = os.path.join(path, "labels.csv")
    label_lines = _read_lines(path, "labels.csv")
    if len(label_lines) != n:
        raise DataError(f"expected {n} labels, found {len(label_lines)}", file=label_file)
    labels = np.empty(n, dtype=np.int64)
    for lineno, line in enumerate(label_lines, start=1):
        try:
            y = int(line)
        except ValueError:
            raise DataError(f"non-integer label '{line}'", file=label_file, line=lineno)
        if y != -1 and not 0 <= y < num_classes:
            raise DataError(f"label {y} out of range [0, {num_classes})",
                            file=label_file, line=lineno)
        labels[lineno - 1] = y

    split_file = os.path.join(path, "split.csv")
    if os.path.isfile(split_file):
        split_lines = _read_lines(path, "split.csv")
        if len(split_lines) != n:
            raise DataError(f"expected {n} split rows, found {len(split_lines)}",
                            file=split_file)
        roles = np.empty(n, dtype=np.int8)
        for lineno, line in enumerate(split_lines, start=1):
            if line not in _ROLE_IDS:
                raise DataError(f"unknown role '{line}'", file=split_file, line=lineno)
            roles[lineno - 1] = _ROLE_IDS[line]
    else:
        roles = make_split(labels, Rng(split_seed).child("split"))

    return DatasetBundle(graph=graph, features=features, labels=labels,
                         roles=roles, name=str(meta["name"]))


def make_split(labels: np.ndarray, rng: Rng, train_per_class: int = 20,
               val_size: int = 500, test_size: int = 1000) -> np.ndarray:
    """Standard-protocol split: fixed train nodes per class, then val/test.

    Falls back to a 50/50 val/test split of the remainder when the graph is
    too small for the requested sizes. Unlabeled nodes never enter train.
    """
    n = labels.shape[0]
    roles = np.full(n, ROLE_UNLABELED, dtype=np.int8)
    classes = sorted(int(c) for c in np.unique(labels[labels >= 0]))
    if not classes:
        raise ContractError("cannot build a split without labeled nodes")
    order = rng.permutation(n)
    for c in classes:
        members = [i for i in order if labels[i] == c]
        if len(members) <= train_per_class:
            raise ContractError(
                f"class {c} has {len(members)} nodes; needs > {train_per_class} "
                "to reserve training examples")
        for i in members[:train_per_class]:
            roles[i] = ROLE_TRAIN
    rest = [i for i in order if roles[i] == ROLE_UNLABELED and labels[i] >= 0]
    if len(rest) >= val_size + test_size:
        chosen_val, chosen_test = rest[:val_size], rest[val_size:val_size + test_size]
    else:
        half = len(rest) // 2
        chosen_val, chosen_test = rest[:half], rest[half:]
    for i in chosen_val:
        roles[i] = ROLE_VAL
    for i in chosen_test:
        roles[i] = ROLE_TEST
    return roles


# ---------------------------------------------------------------------------
# graph statistics


def homophily_ratio(bundle: DatasetBundle) -> float:
    """Fraction of edges whose endpoints carry the same label."""
    labels = bundle.labels
    if np.any(labels < 0):
        raise ContractError("homophily_ratio needs a fully labeled graph")
    edges = bundle.graph.edges
    if edges.shape[0] == 0:
        raise ContractError("homophily_ratio is undefined on an edgeless graph")
    same = labels[edges[:, 0]] == labels[edges[:, 1]]
    return float(same.sum()) / edges.shape[0]


def two_hop_homophily(bundle: DatasetBundle) -> float:
    """Label agreement over pairs at distance exactly two.

    For each node i the two-hop set is N(N(i)) minus i itself and minus its
    direct neighbors; the ratio is the matching fraction over all distinct
    unordered pairs.
    """
    labels = bundle.labels
    if np.any(labels < 0):
        raise ContractError("two_hop_homophily needs a fully labeled graph")
    g = bundle.graph
    match = 0
    total = 0
    for i in range(g.n):
        direct = set(g.neighbors[i])
        two_hop: set[int] = set()
        for j in direct:
            two_hop.update(g.neighbors[j])
        two_hop.discard(i)
        two_hop -= direct
        for k in two_hop:
            if k > i:  # each unordered pair once
                total += 1
                if labels[i] == labels[k]:
                    match += 1
    if total == 0:
        raise ContractError("graph has no two-hop pairs")
    return match / total


def homophily_report(bundle: DatasetBundle) -> HomophilyReport:
    degs = bundle.graph.degrees()
    hist: dict[int, int] = {}
    for dg in degs:
        hist[int(dg)] = hist.get(int(dg), 0) + 1
    return HomophilyReport(
        h_one_hop=homophily_ratio(bundle),
        h_two_hop=two_hop_homophily(bundle),
        degree_histogram=hist,
        max_degree=int(degs.max()) if degs.size else 0,
    )


def effective_degree(graph: Graph, attn: np.ndarray) -> np.ndarray:
    """Participation ratio 1/Σ_j m_ij² of each node's attention row.

    ``attn`` is laid out like ``graph.indices``: entry k weights the edge
    from node i to ``indices[k]`` for indptr[i] <= k < indptr[i+1]. Uniform
    rows give the raw degree; a single dominant neighbor gives 1. Isolated
    nodes report 0.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.shape != (graph.indptr[-1],):
        raise ContractError(
            f"attention must have one weight per directed edge "
            f"({int(graph.indptr[-1])}), got shape {attn.shape}")
    out = np.zeros(graph.n)
    for i in range(graph.n):
        row = attn[graph.indptr[i]:graph.indptr[i + 1]]
        if row.size == 0:
            continue
        if abs(row.sum() - 1.0) > _ATTN_ROW_TOL or np.any(row < 0):
            raise ContractError(f"attention row of node {i} is not a distribution "
                                f"(sum={row.sum():.12f})")
        out[i] = 1.0 / float((row * row).sum())
    return out


# ---------------------------------------------------------------------------
# synthesis


def synth_heterophily(n: int, num_classes: int, degree: int, p: float,
                      feature_noise: float, rng: Rng) -> DatasetBundle:
    """Generate a label-controlled graph with tunable edge homophily.

    Labels are balanced round-robin. Each node draws `degree` neighbors:
    with probability p a uniformly random same-class node, otherwise a
    uniformly random node of a uniformly random other class. Features are
    the one-hot class prototype plus Gaussian noise of the given scale.
    The split reserves 20 train nodes per class and halves the remainder
    into val/test.
    """
    if not 0.0 < p < 1.0 + 1e-12:
        raise ContractError(f"p must lie in (0, 1], got {p}")
    if num_classes < 2:
        raise ContractError("need at least two classes")
    per_class = n // num_classes
    if per_class < 22:
        raise ContractError(
            f"n={n} gives only {per_class} nodes per class; need >= 22 "
            "(20 train plus val/test)")
    if degree >= per_class:
        raise ContractError(f"degree {degree} infeasible with {per_class} nodes per class")

    labels = np.array([i % num_classes for i in range(n)], dtype=np.int64)
    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]

    edge_rng = rng.child("edges")
    pairs: list[tuple[int, int]] = []
    for i in range(n):
        c = int(labels[i])
        for _ in range(degree):
            if float(edge_rng.uniform(1, 1)[0, 0]) < p:
                pool = by_class[c]
                j = i
                while j == i:
                    j = int(pool[int(edge_rng.integers(0, pool.size))])
            else:
                other = int(edge_rng.integers(0, num_classes - 1))
                if other >= c:
                    other += 1
                pool = by_class[other]
                j = int(pool[int(edge_rng.integers(0, pool.size))])
            pairs.append((i, j))
    graph = Graph(n, pairs)

    feat_rng = rng.child("features")
    features = np.zeros((n, num_classes))
    features[np.arange(n), labels] = 1.0
    if feature_noise > 0.0:
        features += feat_rng.normal(n, num_classes, scale=feature_noise)

    roles = make_split(labels, rng.child("split"))
    return DatasetBundle(graph=graph, features=features, labels=labels,
                         roles=roles,
                         name=f"synth-p{p:g}-c{num_classes}-n{n}")
