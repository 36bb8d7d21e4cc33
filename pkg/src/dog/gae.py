"""Graph autoencoder with a bi-level neighborhood decoder.

The encoder turns node ``i`` into a latent ``z_i`` from its attributes and
the position-embedded attributes of its closed neighborhood (two attention
layers).  The decoder reconstructs attributes with three dense layers, the
inter-cluster map with one sigmoid layer, and each intra-cluster row with a
sigmoid layer shared across clusters and conditioned on a cluster embedding.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp

from .clustering import ClusterAssignment, NeighborMaps, build_neighbor_maps
from .graph import AttributedGraph
from .nn import (
    Dense,
    Embedding,
    GraphAttention,
    OptimState,
    adam_step,
    copy_params,
    ema_update,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_params,
    positional_table,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass
class GaeConfig:
    hidden: int = 256
    latent_dim: int = 64
    phase1_epochs: int = 1000
    phase2_epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-5
    ema_decay: float = 0.995
    batch_size: int = 128
    n_neg_clusters: int = 5
    use_pos: bool = True
    attr_activation: str = "leaky_relu"
    seed: int = 0


@dataclass
class EncoderInputs:
    """Per-graph tensors the encoder reads: raw and position-embedded attributes
    plus the CSR structure of the closed neighborhoods ``N(i)`` (self included)."""

    x: np.ndarray
    x_pos: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_graph(cls, g: AttributedGraph, use_pos: bool = True) -> "EncoderInputs":
        x = g.attributes
        width = x.shape[1] + x.shape[1] % 2
        x_pad = np.zeros((g.n_nodes, width))
        x_pad[:, : x.shape[1]] = x
        if use_pos:
            x_pad += positional_table(np.arange(g.n_nodes), width)
        closed = (g.adjacency() + sp.identity(g.n_nodes, format="csr")).tocsr()
        closed.sort_indices()
        return cls(x, x_pad, closed.indptr.astype(np.int64), closed.indices.astype(np.int64))

    def neighbors(self, nodes: np.ndarray):
        """Concatenated neighbor ids of ``nodes`` and the owning position of each."""
        starts, ends = self.indptr[nodes], self.indptr[nodes + 1]
        lens = ends - starts
        owner = np.repeat(np.arange(len(nodes)), lens)
        offs = np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
        return self.indices[np.repeat(starts, lens) + offs], owner


@dataclass
class GaeEncoder:
    f: Dense
    attn1: GraphAttention
    attn2: GraphAttention
    f_prime: Dense

    @classmethod
    def init(cls, rng, n_features: int, hidden: int, latent_dim: int) -> "GaeEncoder":
        width = n_features + n_features % 2
        return cls(
            f=Dense.init(rng, n_features, hidden, "relu"),
            attn1=GraphAttention.init(rng, width, hidden),
            attn2=GraphAttention.init(rng, hidden, hidden),
            f_prime=Dense.init(rng, 2 * hidden, latent_dim, "identity"),
        )

    @property
    def latent_dim(self) -> int:
        return self.f_prime.n_out

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("f", "attn1", "attn2", "f_prime"):
            for k, v in getattr(self, name).params().items():
                out[f"enc.{name}.{k}"] = v
        return out

    def forward(self, inp: EncoderInputs, batch: np.ndarray):
        batch = np.asarray(batch, dtype=np.int64)
        nb2, dst2 = inp.neighbors(batch)
        hop1 = np.unique(np.concatenate([batch, nb2]))
        nb1, dst1 = inp.neighbors(hop1)
        hop2 = np.unique(np.concatenate([hop1, nb1]))
        h1, c1 = self.attn1.forward(
            inp.x_pos[hop2], np.searchsorted(hop2, hop1), dst1, np.searchsorted(hop2, nb1)
        )
        h2, c2 = self.attn2.forward(
            h1, np.searchsorted(hop1, batch), dst2, np.searchsorted(hop1, nb2)
        )
        fx, cf = self.f.forward(inp.x[batch])
        z, cfp = self.f_prime.forward(np.concatenate([h2, fx], axis=1))
        return z, (c1, c2, cf, cfp, h2.shape[1])

    def backward(self, cache, d_z):
        c1, c2, cf, cfp, width = cache
        d_cat, g_fp = self.f_prime.backward(cfp, d_z)
        d_h1, g_a2 = self.attn2.backward(c2, d_cat[:, :width])
        _, g_a1 = self.attn1.backward(c1, d_h1)
        _, g_f = self.f.backward(cf, d_cat[:, width:])
        grads = {}
        for name, g in (("f", g_f), ("attn1", g_a1), ("attn2", g_a2), ("f_prime", g_fp)):
            for k, v in g.items():
                grads[f"enc.{name}.{k}"] = v
        return grads


def encode_node(enc: GaeEncoder, g: AttributedGraph | EncoderInputs, i: int) -> np.ndarray:
    inp = g if isinstance(g, EncoderInputs) else EncoderInputs.from_graph(g)
    z, _ = enc.forward(inp, np.array([i]))
    return z[0]


def encode_all(enc: GaeEncoder, inp: EncoderInputs, chunk: int = 256) -> np.ndarray:
    n = inp.x.shape[0]
    return np.vstack([enc.forward(inp, np.arange(s, min(s + chunk, n)))[0] for s in range(0, n, chunk)])


@dataclass
class GaeDecoder:
    attr: list[Dense]
    inter: Dense
    cluster_embed: Embedding
    g: Dense
    intra: Dense
    cluster_sizes: np.ndarray = field(repr=False)

    @classmethod
    def init(cls, rng, n_features, hidden, latent_dim, clusters: ClusterAssignment, attr_activation="leaky_relu") -> "GaeDecoder":
        return cls(
            attr=[
                Dense.init(rng, latent_dim, hidden, attr_activation),
                Dense.init(rng, hidden, hidden, attr_activation),
                Dense.init(rng, hidden, n_features, "identity"),
            ],
            inter=Dense.init(rng, latent_dim, clusters.k, "sigmoid"),
            cluster_embed=Embedding.init(rng, clusters.k + 1, latent_dim),
            g=Dense.init(rng, latent_dim, latent_dim, "relu"),
            intra=Dense.init(rng, 2 * latent_dim, clusters.capacity, "sigmoid"),
            cluster_sizes=clusters.sizes.copy(),
        )

    @property
    def k(self) -> int:
        return self.inter.n_out

    @property
    def capacity(self) -> int:
        return self.intra.n_out

    def attr_params(self):
        return {f"dec.attr{k}": v for k, v in mlp_params(self.attr, "").items()}

    def edge_params(self):
        out = {f"dec.inter.{k}": v for k, v in self.inter.params().items()}
        out["dec.cluster_embed.table"] = self.cluster_embed.table
        out.update({f"dec.g.{k}": v for k, v in self.g.params().items()})
        out.update({f"dec.intra.{k}": v for k, v in self.intra.params().items()})
        return out

    def params(self):
        return {**self.attr_params(), **self.edge_params()}

    def slot_mask(self, clusters: np.ndarray) -> np.ndarray:
        """True for intra slots that correspond to an existing cluster member."""
        return np.arange(self.capacity)[None, :] < self.cluster_sizes[clusters][:, None]

    def decode_attributes(self, z):
        return mlp_forward(self.attr, z)

    def decode_intra(self, z_rows, clusters):
        q, ce = self.cluster_embed.forward(clusters)
        gq, cg = self.g.forward(q)
        out, ci = self.intra.forward(np.concatenate([z_rows, gq], axis=1))
        return out, (ce, cg, ci)

    def intra_backward(self, cache, d_out):
        ce, cg, ci = cache
        d_in, g_i = self.intra.backward(ci, d_out)
        width = d_in.shape[1] - self.g.n_out
        d_z, d_gq = d_in[:, :width], d_in[:, width:]
        d_q, g_g = self.g.backward(cg, d_gq)
        _, g_e = self.cluster_embed.backward(ce, d_q)
        grads = {f"dec.intra.{k}": v for k, v in g_i.items()}
        grads.update({f"dec.g.{k}": v for k, v in g_g.items()})
        grads["dec.cluster_embed.table"] = g_e["table"]
        return d_z, grads


def _rows(z, fn):
    z = np.asarray(z, dtype=np.float64)
    out = fn(np.atleast_2d(z))
    return out[0] if z.ndim == 1 else out


def decode_node_attributes(dec: GaeDecoder, z: np.ndarray) -> np.ndarray:
    """Attribute reconstruction for one latent (1-D) or a batch (2-D)."""
    return _rows(z, lambda v: dec.decode_attributes(v)[0])


def decode_inter_cluster(dec: GaeDecoder, z: np.ndarray) -> np.ndarray:
    return _rows(z, lambda v: dec.inter.forward(v)[0])


def decode_intra_cluster(dec: GaeDecoder, z: np.ndarray, k: int) -> np.ndarray:
    if not 0 <= k < dec.k:
        raise ValueError(f"cluster {k} outside [0, {dec.k})")
    return _rows(z, lambda v: dec.decode_intra(v, np.full(len(v), k))[0])


def binarize(scores: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(scores) > threshold


def sample_intra_pairs(batch, nm: NeighborMaps, n_neg: int, rng: np.random.Generator | None):
    """(batch position, cluster, target row) for every positive cluster of each
    batch node plus up to ``n_neg`` clusters it has no edge into."""
    batch = np.asarray(batch, dtype=np.int64)
    n_nodes, k = nm.inter.shape
    ptr = np.searchsorted(nm.pairs[:, 0], np.arange(n_nodes + 1))
    lens = ptr[batch + 1] - ptr[batch]
    pos_rows = np.repeat(ptr[batch], lens) + (
        np.arange(lens.sum()) - np.repeat(np.cumsum(lens) - lens, lens)
    )
    owner = [np.repeat(np.arange(len(batch)), lens)]
    clus = [nm.pairs[pos_rows, 1]]
    targets = [nm.intra[pos_rows].astype(np.float64)]
    if n_neg > 0 and rng is not None:
        keys = rng.random((len(batch), k))
        keys[nm.inter[batch]] = np.inf
        take = np.argsort(keys, axis=1, kind="stable")[:, :n_neg]
        ok = np.isfinite(np.take_along_axis(keys, take, axis=1))
        b_idx = np.repeat(np.arange(len(batch)), take.shape[1]).reshape(take.shape)
        owner.append(b_idx[ok])
        clus.append(take[ok])
        targets.append(np.zeros((int(ok.sum()), nm.intra.shape[1])))
    return np.concatenate(owner), np.concatenate(clus), np.vstack(targets)


def gae_loss(
    batch,
    enc: GaeEncoder,
    dec: GaeDecoder,
    inp: EncoderInputs,
    nm: NeighborMaps,
    *,
    edges: bool = True,
    n_neg: int = 5,
    rng: np.random.Generator | None = None,
    intra_pairs=None,
):
    """Reconstruction loss averaged over the batch nodes, with gradients.

    Per node: squared attribute error, plus (if ``edges``) squared error of
    the inter-cluster row and of the intra rows of its positive clusters and
    sampled negative clusters, slots past each cluster's size masked out.
    ``intra_pairs`` fixes the (owner, cluster, target) triples explicitly.
    Returns ``(loss, grads, parts)``.
    """
    batch = np.asarray(batch, dtype=np.int64)
    nb = len(batch)
    z, enc_cache = enc.forward(inp, batch)
    x_hat, attr_caches = dec.decode_attributes(z)
    diff = x_hat - inp.x[batch]
    node = float((diff**2).sum()) / nb
    d_xhat = 2.0 * diff / nb
    d_z, grads = mlp_backward(dec.attr, attr_caches, d_xhat, "dec.attr")
    parts = {"node": node, "inter": 0.0, "intra": 0.0}
    if edges:
        c_hat, ci = dec.inter.forward(z)
        c_diff = c_hat - nm.inter[batch]
        parts["inter"] = float((c_diff**2).sum()) / nb
        d_zi, g_inter = dec.inter.backward(ci, 2.0 * c_diff / nb)
        d_z = d_z + d_zi
        grads.update({f"dec.inter.{k}": v for k, v in g_inter.items()})

        owner, clus, target = intra_pairs if intra_pairs is not None else sample_intra_pairs(batch, nm, n_neg, rng)
        if len(owner):
            m_hat, cm = dec.decode_intra(z[owner], clus)
            m_diff = (m_hat - target) * dec.slot_mask(clus)
            parts["intra"] = float((m_diff**2).sum()) / nb
            d_zo, g_intra = dec.intra_backward(cm, 2.0 * m_diff / nb)
            np.add.at(d_z, owner, d_zo)
        else:
            g_intra = {k: np.zeros_like(v) for k, v in dec.edge_params().items() if not k.startswith("dec.inter")}
        grads.update(g_intra)
    grads.update(enc.backward(enc_cache, d_z))
    return node + parts["inter"] + parts["intra"], grads, parts


@dataclass
class GaeModel:
    encoder: GaeEncoder
    decoder: GaeDecoder
    ema: dict
    config: GaeConfig
    history: list = field(default_factory=list)

    def params(self):
        return {**self.encoder.params(), **self.decoder.params()}

    def with_ema(self) -> "GaeModel":
        """Deep copy whose live weights are the EMA weights."""
        enc, dec = _init_modules(self.config, self.encoder.f.n_in, self.decoder)
        clone = GaeModel(enc, dec, copy_params(self.ema), self.config, list(self.history))
        for k, v in clone.params().items():
            v[...] = self.ema[k]
        return clone


def _init_modules(cfg: GaeConfig, n_features: int, clusters_or_dec):
    rng = np.random.default_rng(cfg.seed)
    enc = GaeEncoder.init(rng, n_features, cfg.hidden, cfg.latent_dim)
    if isinstance(clusters_or_dec, GaeDecoder):
        sizes = clusters_or_dec.cluster_sizes
        fake = ClusterAssignment(len(sizes), clusters_or_dec.capacity, np.repeat(np.arange(len(sizes)), sizes))
        dec = GaeDecoder.init(rng, n_features, cfg.hidden, cfg.latent_dim, fake, cfg.attr_activation)
    else:
        dec = GaeDecoder.init(rng, n_features, cfg.hidden, cfg.latent_dim, clusters_or_dec, cfg.attr_activation)
    return enc, dec


def train_gae(
    g: AttributedGraph,
    clusters: ClusterAssignment,
    config: GaeConfig | None = None,
    nm: NeighborMaps | None = None,
) -> GaeModel:
    """Two-phase training: attributes only, then attributes plus both maps."""
    cfg = config or GaeConfig()
    nm = nm if nm is not None else build_neighbor_maps(g, clusters)
    inp = EncoderInputs.from_graph(g, cfg.use_pos)
    enc, dec = _init_modules(cfg, g.n_features, clusters)
    model = GaeModel(enc, dec, {}, cfg)
    params = model.params()
    model.ema = copy_params(params)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    n = g.n_nodes
    for epoch in range(cfg.phase1_epochs + cfg.phase2_epochs):
        edges = epoch >= cfg.phase1_epochs
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            batch = order[s : s + cfg.batch_size]
            loss, grads, _ = gae_loss(batch, enc, dec, inp, nm, edges=edges, n_neg=cfg.n_neg_clusters, rng=rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite GAE loss at epoch {epoch} (phase {1 + edges})")
            adam_step(params, grads, opt)
            ema_update(model.ema, params, cfg.ema_decay, opt.step)
            total += loss * len(batch)
        model.history.append({"epoch": epoch, "phase": 1 + int(edges), "loss": total / n})
        if epoch % 50 == 0:
            log.debug("gae epoch %d phase %d loss %.6f", epoch, 1 + edges, total / n)
    return model


def save_gae(path: str, model: GaeModel, extra_meta: dict | None = None) -> None:
    tensors = dict(model.params())
    tensors.update({f"ema/{k}": v for k, v in model.ema.items()})
    tensors["cluster_sizes"] = model.decoder.cluster_sizes.astype(np.float64)
    meta = {"config": asdict(model.config), "n_features": model.encoder.f.n_in, **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_gae(path: str) -> GaeModel:
    tensors, meta = load_checkpoint(path)
    cfg = GaeConfig(**meta["config"])
    sizes = tensors["cluster_sizes"].astype(np.int64)
    capacity = tensors["dec.intra.bias"].shape[0]
    clusters = ClusterAssignment(len(sizes), capacity, np.repeat(np.arange(len(sizes)), sizes))
    enc, dec = _init_modules(cfg, meta["n_features"], clusters)
    model = GaeModel(enc, dec, {}, cfg)
    params = model.params()
    for k, v in params.items():
        v[...] = tensors[k]
    model.ema = {k: tensors[f"ema/{k}"].copy() for k in params}
    return model
