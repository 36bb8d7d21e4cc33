"""Small numpy network toolkit with explicit per-layer adjoints.

Everything runs in float64 so analytic gradients can be compared against
central differences.  Layers are plain dataclasses holding their arrays;
``forward`` returns ``(output, cache)`` and ``backward(cache, d_out)``
returns ``(d_input, {param_name: grad})``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

ACTIVATIONS = ("relu", "leaky_relu", "elu", "identity", "sigmoid")
LEAKY_SLOPE = 0.2


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "leaky_relu":
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    if name == "elu":
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))
    if name == "identity":
        return x
    if name == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, pre: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at ``pre`` (``out`` = act(pre))."""
    if name == "relu":
        return (pre > 0).astype(pre.dtype)
    if name == "leaky_relu":
        return np.where(pre > 0, 1.0, LEAKY_SLOPE)
    if name == "elu":
        return np.where(pre > 0, 1.0, out + 1.0)
    if name == "identity":
        return np.ones_like(pre)
    if name == "sigmoid":
        return out * (1.0 - out)
    raise ValueError(f"unknown activation {name!r}")


# kinks where finite differences are not meaningful
KINKED = {"relu", "leaky_relu", "elu"}


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Dense:
    """``y = act(x W^T + b)`` applied row-wise to a batch ``x`` of shape (n, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("weight/bias shape mismatch")

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "relu") -> "Dense":
        return cls(glorot(rng, n_out, n_in), np.zeros(n_out), activation)

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input width {self.n_in}, got {x.shape[-1]}")
        pre = x @ self.weight.T + self.bias
        out = activate(self.activation, pre)
        return out, (x, pre, out)

    def backward(self, cache, d_out):
        x, pre, out = cache
        d_pre = d_out * activation_grad(self.activation, pre, out)
        return d_pre @ self.weight, {"weight": d_pre.T @ x, "bias": d_pre.sum(0)}


def mlp_apply(layers: list[Dense], x: np.ndarray) -> np.ndarray:
    """Compose ``layers`` on a vector or a batch of row vectors."""
    single = x.ndim == 1
    h = x[None, :] if single else x
    for layer in layers:
        h, _ = layer.forward(h)
    return h[0] if single else h


def mlp_forward(layers: list[Dense], x):
    caches = []
    for layer in layers:
        x, c = layer.forward(x)
        caches.append(c)
    return x, caches


def mlp_backward(layers: list[Dense], caches, d_out, prefix: str):
    grads = {}
    for idx in range(len(layers) - 1, -1, -1):
        d_out, g = layers[idx].backward(caches[idx], d_out)
        for k, v in g.items():
            grads[f"{prefix}{idx}.{k}"] = v
    return d_out, grads


def mlp_params(layers: list[Dense], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}{i}.{k}": v for i, layer in enumerate(layers) for k, v in layer.params().items()}


@dataclass
class GraphAttention:
    """Single-head attention aggregation with LeakyReLU(0.2) scoring and ELU output.

    For an output node ``i`` with neighbor set ``N(i)``::

        e_ij  = leaky_relu(a[:out] . W h_i + a[out:] . W h_j)
        alpha = softmax_j(e_ij)
        out_i = elu(sum_j alpha_ij W h_j)
    """

    weight: np.ndarray
    attn: np.ndarray

    @classmethod
    def init(cls, rng, n_in: int, n_out: int) -> "GraphAttention":
        return cls(glorot(rng, n_out, n_in), glorot(rng, 1, 2 * n_out)[0])

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "attn": self.attn}

    def forward(self, h_src, centers, dst, src):
        """Aggregate rows of ``h_src`` along edges ``src -> dst``.

        ``centers[i]`` is the row of ``h_src`` holding output node ``i`` itself;
        every output node must appear in ``dst`` at least once.
        """
        n_out = len(centers)
        if n_out and np.bincount(dst, minlength=n_out).min() == 0:
            raise ValueError("every output node needs a nonempty neighbor list")
        o = self.n_out
        wh = h_src @ self.weight.T
        s_c = wh[centers] @ self.attn[:o]
        s_n = wh @ self.attn[o:]
        pre = s_c[dst] + s_n[src]
        e = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
        e_max = np.full(n_out, -np.inf)
        np.maximum.at(e_max, dst, e)
        ex = np.exp(e - e_max[dst])
        alpha = ex / np.bincount(dst, ex, minlength=n_out)[dst]
        s = sp.csr_matrix((alpha, (dst, src)), shape=(n_out, h_src.shape[0]))
        agg = s @ wh
        out = np.where(agg > 0, agg, np.expm1(np.minimum(agg, 0.0)))
        return out, (h_src, centers, dst, src, wh, pre, alpha, s, agg, out)

    def backward(self, cache, d_out):
        h_src, centers, dst, src, wh, pre, alpha, s, agg, out = cache
        o = self.n_out
        n_out = len(centers)
        d_agg = d_out * np.where(agg > 0, 1.0, out + 1.0)
        d_wh = s.T @ d_agg
        d_alpha = np.einsum("ij,ij->i", d_agg[dst], wh[src])
        d_e = alpha * (d_alpha - np.bincount(dst, alpha * d_alpha, minlength=n_out)[dst])
        d_pre = d_e * np.where(pre > 0, 1.0, LEAKY_SLOPE)
        d_sc = np.bincount(dst, d_pre, minlength=n_out)
        d_sn = np.bincount(src, d_pre, minlength=h_src.shape[0])
        d_attn = np.concatenate([wh[centers].T @ d_sc, wh.T @ d_sn])
        d_wh += d_sn[:, None] * self.attn[o:]
        np.add.at(d_wh, centers, d_sc[:, None] * self.attn[:o])
        return d_wh @ self.weight, {"weight": d_wh.T @ h_src, "attn": d_attn}


def attention_aggregate(layer: GraphAttention, center: np.ndarray, neighbors) -> np.ndarray:
    """Aggregate one node's neighbor vectors (the list should include the node itself)."""
    neighbors = list(neighbors)
    if not neighbors:
        raise ValueError("neighbor list is empty")
    h = np.vstack([center] + neighbors)
    src = np.arange(1, len(neighbors) + 1)
    out, _ = layer.forward(h, np.array([0]), np.zeros(len(neighbors), dtype=np.int64), src)
    return out[0]


def positional_table(indices, dim: int) -> np.ndarray:
    """Sinusoidal embeddings, one row per index: sin on even, cos on odd slots."""
    if dim % 2:
        raise ValueError("positional embedding dimension must be even")
    p = np.asarray(indices, dtype=np.float64).reshape(-1, 1)
    freq = 1.0 / 10000.0 ** (np.arange(0, dim, 2) / dim)
    out = np.empty((p.shape[0], dim))
    out[:, 0::2] = np.sin(p * freq)
    out[:, 1::2] = np.cos(p * freq)
    return out


def positional_embedding(index: int, dim: int) -> np.ndarray:
    return positional_table([index], dim)[0]


@dataclass
class Embedding:
    """Lookup table; for conditioning tables the last row is the null token."""

    table: np.ndarray

    @classmethod
    def init(cls, rng, n_rows: int, dim: int, std: float = 0.02) -> "Embedding":
        return cls(rng.normal(0.0, std, size=(n_rows, dim)))

    def params(self):
        return {"table": self.table}

    def forward(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return self.table[ids], ids

    def backward(self, ids, d_out):
        g = np.zeros_like(self.table)
        np.add.at(g, ids, d_out)
        return None, {"table": g}


def label_embedding(table: np.ndarray, label: int | None) -> np.ndarray:
    """Row for ``label``; ``None`` selects the trailing null-token row."""
    n_labels = table.shape[0] - 1
    if label is None:
        return table[n_labels]
    if not 0 <= label < n_labels:
        raise ValueError(f"label {label} outside [0, {n_labels})")
    return table[label]


@dataclass
class OptimState:
    """Adam moments and hyperparameters.

    ``decoupled=True`` gives AdamW (decay applied to the weights directly);
    otherwise the decay is added to the gradient as an L2 term.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled: bool = False
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimState) -> None:
    """Update ``params`` in place; names missing from ``grads`` are left alone."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay and state.decoupled:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def ema_decay_at(decay: float, step: int | None) -> float:
    """Warmed-up decay ``min(decay, (1 + step) / (10 + step))``; ``step=None`` disables warmup."""
    if step is None:
        return decay
    return min(decay, (1.0 + step) / (10.0 + step))


def ema_update(ema: dict, params: dict, decay: float, step: int | None = None) -> dict:
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must lie in [0, 1)")
    decay = ema_decay_at(decay, step)
    for name, p in params.items():
        e = ema[name]
        e *= decay
        e += (1.0 - decay) * p
    return ema


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


def load_params(params: dict, values: dict) -> None:
    """Copy ``values`` into the live arrays of ``params``."""
    for k, v in values.items():
        if params[k].shape != v.shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {v.shape}")
        params[k][...] = v


def grad_check(
    fn: Callable[[], tuple[float, dict]],
    params: dict,
    eps: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``fn()`` evaluates the loss at the current contents of ``params`` and
    returns ``(loss, grads)``.  The arrays are perturbed in place and restored.
    Per tensor the gap is ``max|a - n| / max(max|a|, max|n|, 1e-12)``.
    ``max_entries`` checks a random subset of entries of larger tensors.
    """
    _, analytic = fn()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        a = analytic.get(name)
        if a is None:
            a = np.zeros_like(p)
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        num = np.empty(len(idx))
        for n, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + eps
            fp, _ = fn()
            flat[j] = orig - eps
            fm, _ = fn()
            flat[j] = orig
            num[n] = (fp - fm) / (2.0 * eps)
        ana = a.reshape(-1)[idx]
        scale = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(ana - num).max(initial=0.0) / scale))
    return worst


_MAGIC = b"DOGCKPT1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write a manifest (JSON) followed by row-major little-endian float64 blobs."""
    manifest = {"meta": meta or {}, "tensors": []}
    offset = 0
    blobs = []
    for name in tensors:
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        manifest["tensors"].append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n))
        body = fh.read()
    out = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"])
        out[t["name"]] = arr.reshape(tuple(t["shape"])).astype(np.float64)
    return out, manifest["meta"]
