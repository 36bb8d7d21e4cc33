"""Synthetic benchmark graphs and converters for public citation datasets."""

from __future__ import annotations

import os
import pickle
import sys

import numpy as np
import scipy.sparse as sp

from .graph import AttributedGraph, canonical_edges, load_graph, save_graph

CORA_ENV = "DOG_CORA_DIR"


def make_attributed_sbm(
    n_per_class: int = 30,
    n_classes: int = 3,
    n_features: int = 40,
    p_in: float = 0.15,
    p_out: float = 0.01,
    word_rate: float = 0.15,
    signal: float = 0.6,
    n_train_per_class: int = 5,
    n_val: int | None = None,
    seed: int = 0,
) -> AttributedGraph:
    """Stochastic block model with binary bag-of-words attributes.

    Each class owns a block of ``n_features // n_classes`` preferred words that
    fire with probability ``word_rate * (1 + signal * n_classes)``; other words
    fire at ``word_rate``.  Split: ``n_train_per_class`` train nodes per class,
    ``n_val`` validation nodes (default: a quarter of the rest), remainder test.
    """
    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)
    labels = labels[rng.permutation(n)]

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    upper = np.triu(rng.random((n, n)) < prob, k=1)
    edges = np.argwhere(upper)

    block = max(1, n_features // n_classes)
    rate = np.full((n_classes, n_features), word_rate)
    for c in range(n_classes):
        rate[c, c * block : (c + 1) * block] = min(0.95, word_rate * (1 + signal * n_classes))
    x = (rng.random((n, n_features)) < rate[labels]).astype(np.float64)

    split = np.full(n, "test", dtype="<U5")
    order = rng.permutation(n)
    chosen = np.concatenate([order[labels[order] == c][:n_train_per_class] for c in range(n_classes)])
    split[chosen] = "train"
    rest = order[split[order] != "train"]
    n_val = len(rest) // 4 if n_val is None else n_val
    split[rest[:n_val]] = "val"
    return AttributedGraph(x, canonical_edges(edges, n), labels, split)


def make_cora_like(scale: float = 1.0, seed: int = 0) -> AttributedGraph:
    """A citation-graph surrogate with Cora's shape (7 classes, sparse binary
    words, mean degree near 4, homophily near 0.8, 20 train labels per class).

    ``scale`` shrinks node and word counts for quick runs.  Used for demos and
    smoke tests only; it is not a stand-in for the real benchmark numbers.
    """
    n_classes = 7
    n_per_class = max(30, int(round(387 * scale)))
    n = n_per_class * n_classes
    n_features = max(70, int(round(1433 * scale)))
    target_deg, homophily = 3.9, 0.81
    p_in = target_deg * homophily / n_per_class
    p_out = target_deg * (1 - homophily) / (n - n_per_class)
    n_val = min(500, (n - 20 * n_classes) // 3)
    return make_attributed_sbm(
        n_per_class,
        n_classes,
        n_features,
        p_in=p_in,
        p_out=p_out,
        word_rate=0.009,
        signal=1.2,
        n_train_per_class=20,
        n_val=n_val,
        seed=seed,
    )


def _load_pickle(path):
    with open(path, "rb") as fh:
        if sys.version_info >= (3, 0):
            return pickle.load(fh, encoding="latin1")
        return pickle.load(fh)


def convert_planetoid(raw_dir: str, name: str, out_dir: str) -> AttributedGraph:
    """Convert the ``ind.<name>.*`` pickles into the plain-text graph format.

    Uses the standard split: the first ``len(y)`` nodes train, the next 500
    validation, the listed test indices test, everything else ``other``.
    """
    objs = {}
    for key in ("x", "y", "tx", "ty", "allx", "ally", "graph"):
        objs[key] = _load_pickle(os.path.join(raw_dir, f"ind.{name}.{key}"))
    test_idx = np.loadtxt(os.path.join(raw_dir, f"ind.{name}.test.index"), dtype=np.int64)
    test_sorted = np.sort(test_idx)
    allx, tx = sp.csr_matrix(objs["allx"]), sp.csr_matrix(objs["tx"])
    feats = sp.vstack([allx, tx]).tolil()
    feats[test_idx, :] = feats[test_sorted, :]
    ys = np.vstack([objs["ally"], objs["ty"]])
    ys[test_idx, :] = ys[test_sorted, :]
    n = feats.shape[0]
    labels = np.where(ys.sum(1) > 0, ys.argmax(1), -1)

    pairs = [(a, b) for a, nbrs in objs["graph"].items() for b in nbrs if a != b and a < n and b < n]
    edges = canonical_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2), n)

    split = np.full(n, "other", dtype="<U5")
    n_train = len(objs["y"])
    split[np.arange(n_train)] = "train"
    split[n_train : n_train + 500] = "val"
    split[test_idx] = "test"
    g = AttributedGraph(np.asarray(feats.todense(), dtype=np.float64), edges, labels, split)
    save_graph(g, out_dir)
    return g


def convert_linqs(content_path: str, cites_path: str, out_dir: str, seed: int = 0) -> AttributedGraph:
    """Convert ``<name>.content`` / ``<name>.cites`` files.

    Document ids map to node ids in file order and class names to ids in sorted
    order.  The split mimics the usual one: 20 train nodes per class, 500
    validation, 1000 test, chosen with ``seed``.
    """
    ids, rows, names = [], [], []
    with open(content_path) as fh:
        for line in fh:
            parts = line.split()
            if parts:
                ids.append(parts[0])
                rows.append([float(v) for v in parts[1:-1]])
                names.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(names))
    labels = np.array([classes.index(c) for c in names], dtype=np.int64)
    pairs = []
    with open(cites_path) as fh:
        for line in fh:
            parts = line.split()
            if len(parts) == 2 and parts[0] in index and parts[1] in index:
                a, b = index[parts[0]], index[parts[1]]
                if a != b:
                    pairs.append((a, b))
    n = len(ids)
    edges = canonical_edges(np.array(pairs, dtype=np.int64).reshape(-1, 2), n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    split = np.full(n, "other", dtype="<U5")
    for c in range(len(classes)):
        split[order[labels[order] == c][:20]] = "train"
    rest = order[split[order] != "train"]
    split[rest[:500]] = "val"
    split[rest[500:1500]] = "test"
    g = AttributedGraph(np.array(rows), edges, labels, split)
    save_graph(g, out_dir)
    return g


def find_cora(directory: str | None = None) -> str | None:
    """Directory holding converted Cora text files, from ``directory`` or ``$DOG_CORA_DIR``."""
    directory = directory or os.environ.get(CORA_ENV)
    if not directory:
        return None
    files = [os.path.join(directory, f"{k}.txt") for k in ("features", "edges", "labels")]
    return directory if all(os.path.exists(f) for f in files) else None


def load_graph_dir(directory: str) -> AttributedGraph:
    return load_graph(*(os.path.join(directory, f"{k}.txt") for k in ("features", "edges", "labels")))
