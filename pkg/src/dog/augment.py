"""Generation of synthetic nodes and assembly of the augmented graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clustering import ClusterAssignment
from .gae import GaeDecoder
from .graph import UNLABELED, AttributedGraph, average_degree, edge_homophily, homophily_ratio
from .ldm import Denoiser, DiffusionSchedule, cfg_sample_batch


@dataclass
class SyntheticBatch:
    """Synthetic nodes; ``edges[:, 0]`` indexes synthetic nodes, ``edges[:, 1]`` original ones."""

    latents: np.ndarray
    labels: np.ndarray
    attributes: np.ndarray
    edges: np.ndarray

    @property
    def n_syn(self) -> int:
        return len(self.labels)

    def adjacency(self, n_original: int) -> np.ndarray:
        a = np.zeros((self.n_syn, n_original), dtype=np.int8)
        a[self.edges[:, 0], self.edges[:, 1]] = 1
        return a

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_syn)

    @classmethod
    def empty(cls, latent_dim: int, n_features: int) -> "SyntheticBatch":
        return cls(
            np.zeros((0, latent_dim)),
            np.zeros(0, dtype=np.int64),
            np.zeros((0, n_features)),
            np.zeros((0, 2), dtype=np.int64),
        )


@dataclass
class AugmentedGraph:
    """Original graph plus synthetic nodes at ids ``N .. N + N' - 1`` (all tagged train)."""

    base: AttributedGraph
    syn: SyntheticBatch
    graph: AttributedGraph

    @property
    def n_total(self) -> int:
        return self.graph.n_nodes

    @property
    def synthetic_ids(self) -> np.ndarray:
        return np.arange(self.base.n_nodes, self.n_total)


def synthetic_labels(n_classes: int, n_per_class: int) -> np.ndarray:
    return np.repeat(np.arange(n_classes), n_per_class)


def generate_synthetic_latents(
    den: Denoiser,
    n_per_class: int,
    omega: float,
    sched: DiffusionSchedule,
    seed: int,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """``n_per_class`` guided samples per class; sample ``i`` uses RNG stream ``(seed, i)``."""
    labels = synthetic_labels(den.n_classes, n_per_class)
    out = []
    for s in range(0, len(labels), chunk):
        idx = np.arange(s, min(s + chunk, len(labels)))
        rngs = [np.random.default_rng([seed, int(i)]) for i in idx]
        out.append(cfg_sample_batch(den, labels[idx], omega, sched, rngs))
    latents = np.vstack(out) if out else np.zeros((0, den.latent_dim))
    return latents, labels


def decode_synthetic_structures(
    dec: GaeDecoder,
    latents: np.ndarray,
    clusters: ClusterAssignment,
    threshold: float = 0.5,
    max_degree: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Attributes and ``(synthetic, original)`` edge pairs for each latent.

    Clusters whose inter score exceeds ``threshold`` are expanded through the
    shared intra decoder; each surviving slot maps to the member with that
    within-cluster index.  A latent with no surviving slot is linked to the
    single (cluster, slot) maximizing ``inter * intra``.  ``max_degree`` keeps
    only the highest-scoring slots.
    """
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    n = latents.shape[0]
    if n == 0:
        return np.zeros((0, dec.attr[-1].n_out)), np.zeros((0, 2), dtype=np.int64)
    x_syn, _ = dec.decode_attributes(latents)
    inter, _ = dec.inter.forward(latents)
    table = clusters.member_table()
    sizes = clusters.sizes

    owner, clus = np.nonzero(inter > threshold)
    rows, cols, scores = [], [], []
    if len(owner):
        intra, _ = dec.decode_intra(latents[owner], clus)
        valid = np.arange(dec.capacity)[None, :] < sizes[clus][:, None]
        hit = (intra > threshold) & valid
        p, m = np.nonzero(hit)
        rows.append(owner[p])
        cols.append(table[clus[p], m])
        scores.append(inter[owner[p], clus[p]] * intra[p, m])

    got = np.zeros(n, dtype=bool)
    if rows:
        got[rows[0]] = True
    for i in np.flatnonzero(~got):
        all_k = np.arange(dec.k)
        intra, _ = dec.decode_intra(np.repeat(latents[i : i + 1], dec.k, axis=0), all_k)
        s = inter[i][:, None] * intra
        s[np.arange(dec.capacity)[None, :] >= sizes[:, None]] = -np.inf
        k, m = np.unravel_index(int(np.argmax(s)), s.shape)
        rows.append(np.array([i]))
        cols.append(np.array([table[k, m]]))
        scores.append(np.array([s[k, m]]))

    r, c, sc = np.concatenate(rows), np.concatenate(cols), np.concatenate(scores)
    order = np.lexsort((c, -sc, r))
    r, c, sc = r[order], c[order], sc[order]
    if max_degree is not None:
        rank = np.arange(len(r)) - np.searchsorted(r, r)
        keep = rank < max_degree
        r, c = r[keep], c[keep]
    edges = np.stack([r, c], axis=1).astype(np.int64)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return x_syn, edges


def assemble_augmented_graph(g: AttributedGraph, syn: SyntheticBatch) -> AugmentedGraph:
    """Append synthetic nodes, their labels (tagged train) and their edges to original nodes."""
    n = g.n_nodes
    if syn.n_syn and syn.attributes.shape[1] != g.n_features:
        raise ValueError(f"synthetic attributes have width {syn.attributes.shape[1]}, graph has {g.n_features}")
    if len(syn.attributes) != syn.n_syn:
        raise ValueError("one attribute row per synthetic node required")
    if len(syn.edges) and (syn.edges[:, 1].max() >= n or syn.edges[:, 0].max() >= syn.n_syn):
        raise ValueError("synthetic edge refers to a node outside the graph")
    attrs = np.vstack([g.attributes, syn.attributes]) if syn.n_syn else g.attributes.copy()
    new_edges = np.stack([syn.edges[:, 0] + n, syn.edges[:, 1]], axis=1) if len(syn.edges) else np.zeros((0, 2), np.int64)
    merged = AttributedGraph(
        attrs,
        np.vstack([g.edges, new_edges]),
        np.concatenate([g.labels, syn.labels]),
        np.concatenate([g.split, np.full(syn.n_syn, "train")]),
    )
    return AugmentedGraph(g, syn, merged)


def synthetic_homophily(aug: AugmentedGraph) -> float:
    """Share of synthetic edges whose original endpoint carries the synthetic node's class."""
    e = aug.syn.edges
    labels = np.concatenate([aug.syn.labels, aug.base.labels])
    return edge_homophily(np.stack([e[:, 0], e[:, 1] + aug.syn.n_syn], axis=1), labels)


def synthetic_average_degree(aug: AugmentedGraph) -> float:
    if aug.syn.n_syn == 0:
        raise ValueError("no synthetic nodes")
    return len(aug.syn.edges) / aug.syn.n_syn


def structure_metrics(aug: AugmentedGraph) -> dict:
    """Homophily and average degree of the original graph and of the synthetic structure."""
    out = {"original_homophily": homophily_ratio(aug.base), "original_avg_degree": average_degree(aug.base)}
    if aug.syn.n_syn:
        labeled = aug.base.labels[aug.syn.edges[:, 1]] != UNLABELED
        out["synthetic_homophily"] = synthetic_homophily(aug) if labeled.any() else None
        out["synthetic_avg_degree"] = synthetic_average_degree(aug)
    else:
        out["synthetic_homophily"] = None
        out["synthetic_avg_degree"] = None
    return out
