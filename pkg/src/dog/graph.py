"""Attributed graph container, plain-text IO and structural quality metrics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

UNLABELED = -1
SPLITS = ("train", "val", "test", "other")


class GraphFormatError(ValueError):
    """Raised when graph files or arrays violate the attributed-graph contract."""


@dataclass
class AttributedGraph:
    """Undirected attributed graph with labels and a transductive split.

    ``edges`` is an ``(E, 2)`` int array of unordered pairs stored once as
    ``(min, max)`` and sorted lexicographically.  ``labels`` uses
    :data:`UNLABELED` for nodes without a class.  ``split`` holds one of
    ``"train"``, ``"val"``, ``"test"`` or ``"other"`` (in no evaluation set)
    per node.
    """

    attributes: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    _csr: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.attributes = np.ascontiguousarray(self.attributes, dtype=np.float64)
        if self.attributes.ndim != 2:
            raise GraphFormatError("attributes must be a 2-D matrix")
        n = self.attributes.shape[0]
        self.edges = canonical_edges(self.edges, n)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.split = np.asarray(self.split, dtype="<U5").reshape(-1)
        if self.labels.shape[0] != n or self.split.shape[0] != n:
            raise GraphFormatError("labels and split must have one entry per node")
        bad = ~np.isin(self.split, SPLITS)
        if bad.any():
            raise GraphFormatError(f"unknown split tag {self.split[bad][0]!r}")
        if np.any((self.split == "train") & (self.labels == UNLABELED)):
            raise GraphFormatError("every train node needs a label")
        if np.any(self.labels < UNLABELED):
            raise GraphFormatError("negative label ids are reserved")

    @property
    def n_nodes(self) -> int:
        return self.attributes.shape[0]

    @property
    def n_features(self) -> int:
        return self.attributes.shape[1]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.n_nodes else 0

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops (cached)."""
        if self._csr is None:
            n = self.n_nodes
            r, c = self.edges[:, 0], self.edges[:, 1]
            data = np.ones(2 * len(r))
            a = sp.csr_matrix(
                (data, (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)
            )
            a.sort_indices()
            self._csr = a
        return self._csr

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n_nodes)

    def nodes_in(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(a), int(b)) for a, b in self.edges}


def canonical_edges(edges, n_nodes: int) -> np.ndarray:
    """Validate and deduplicate an edge list into sorted ``(min, max)`` rows."""
    e = np.asarray(edges, dtype=np.int64)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = e.reshape(-1, 2)
    if e.min() < 0 or e.max() >= n_nodes:
        raise GraphFormatError(f"edge endpoint out of range [0, {n_nodes})")
    if np.any(e[:, 0] == e[:, 1]):
        raise GraphFormatError("self-loops are not allowed")
    e = np.sort(e, axis=1)
    keys = np.unique(e[:, 0] * n_nodes + e[:, 1])
    return np.stack([keys // n_nodes, keys % n_nodes], axis=1)


def _read_rows(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if line:
                yield lineno, line.split()


def load_graph(features_path, edges_path, labels_path) -> AttributedGraph:
    """Read the three whitespace-separated graph files.

    Duplicate or reversed edge lines collapse to a single undirected edge.
    """
    rows = []
    for lineno, parts in _read_rows(features_path):
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise GraphFormatError(f"{features_path}:{lineno}: non-numeric attribute") from None
        if len(rows[-1]) != len(rows[0]):
            raise GraphFormatError(f"{features_path}:{lineno}: ragged attribute row")
    x = np.array(rows, dtype=np.float64)
    n = x.shape[0]

    edges = []
    for lineno, parts in _read_rows(edges_path):
        if len(parts) != 2:
            raise GraphFormatError(f"{edges_path}:{lineno}: expected 'src dst'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{edges_path}:{lineno}: non-integer node id") from None
        if not (0 <= a < n and 0 <= b < n):
            raise GraphFormatError(f"{edges_path}:{lineno}: endpoint out of range [0, {n})")
        if a == b:
            raise GraphFormatError(f"{edges_path}:{lineno}: self-loop")
        edges.append((a, b))

    labels, split = [], []
    for lineno, parts in _read_rows(labels_path):
        if len(parts) != 2:
            raise GraphFormatError(f"{labels_path}:{lineno}: expected 'label split'")
        lab, tag = parts
        try:
            labels.append(UNLABELED if lab == "-" else int(lab))
        except ValueError:
            raise GraphFormatError(f"{labels_path}:{lineno}: bad label {lab!r}") from None
        split.append(tag)
    if len(labels) != n:
        raise GraphFormatError(f"{labels_path}: {len(labels)} label rows for {n} nodes")
    return AttributedGraph(x, np.array(edges, dtype=np.int64).reshape(-1, 2), labels, split)


def save_graph(g: AttributedGraph, directory, prefix: str = "") -> dict[str, str]:
    """Write ``features.txt``, ``edges.txt`` and ``labels.txt`` into ``directory``."""
    os.makedirs(directory, exist_ok=True)
    paths = {k: os.path.join(directory, f"{prefix}{k}.txt") for k in ("features", "edges", "labels")}
    np.savetxt(paths["features"], g.attributes, fmt="%.17g")
    np.savetxt(paths["edges"], g.edges, fmt="%d")
    with open(paths["labels"], "w") as fh:
        for lab, tag in zip(g.labels, g.split):
            fh.write(f"{'-' if lab == UNLABELED else int(lab)} {tag}\n")
    return paths


def homophily_ratio(g: AttributedGraph) -> float:
    """Fraction of labeled-endpoint edges joining same-class nodes."""
    return edge_homophily(g.edges, g.labels)


def edge_homophily(edges: np.ndarray, labels: np.ndarray) -> float:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    la, lb = labels[edges[:, 0]], labels[edges[:, 1]]
    counted = (la != UNLABELED) & (lb != UNLABELED)
    if not counted.any():
        raise ValueError("no edge has two labeled endpoints")
    return float(np.mean(la[counted] == lb[counted]))


def average_degree(g: AttributedGraph) -> float:
    if g.n_nodes == 0:
        return 0.0
    return 2.0 * g.n_edges / g.n_nodes
