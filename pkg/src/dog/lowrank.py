"""Node classification with a truncated-nuclear-norm penalty on penultimate features.

Also holds the spectral diagnostics: the gram spectrum of the features, the
eigen-projection of the labels onto it, and the closed-form residual of
gradient descent on a linear squared-loss classifier.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .graph import UNLABELED, AttributedGraph
from .nn import OptimState, adam_step

DEFAULT_GAMMA_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_TAU_GRID = (0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5)
DEFAULT_BETA_GRID = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10)


@dataclass(frozen=True)
class GramSpectrum:
    """Leading ``min(N, d)`` eigenvalues of ``K = H H^T`` (descending, clipped at 0)
    and orthonormal eigenvectors for the nonzero ones."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _companion(h: np.ndarray):
    """Eigenpairs of ``H^T H`` in descending order."""
    lam, v = np.linalg.eigh(h.T @ h)
    return lam[::-1], v[:, ::-1]


def gram_matrix(h: np.ndarray, rtol: float = 1e-10) -> GramSpectrum:
    h = np.asarray(h, dtype=np.float64)
    n, d = h.shape
    if d < n:
        lam, v = _companion(h)
        lam = np.maximum(lam, 0.0)
        keep = lam > rtol * max(lam[0], 1e-300)
        u = h @ v[:, keep] / np.sqrt(lam[keep])
    else:
        lam, u = np.linalg.eigh(h @ h.T)
        lam, u = np.maximum(lam[::-1], 0.0), u[:, ::-1]
        keep = lam > rtol * max(lam[0], 1e-300)
        u = u[:, keep]
    return GramSpectrum(lam, u)


def truncated_nuclear_norm(h: np.ndarray, r0: int) -> tuple[float, np.ndarray]:
    """Sum of the eigenvalues of ``H H^T`` past the ``r0`` largest, and its gradient.

    The gradient ``2 P H`` projects onto the trailing eigenvectors; at
    repeated eigenvalues the computed eigenbasis picks the subgradient.
    """
    h = np.asarray(h, dtype=np.float64)
    n, d = h.shape
    if not 0 <= r0 < min(n, d):
        raise ValueError(f"r0={r0} outside [0, {min(n, d)})")
    if d <= n:
        _, v = _companion(h)
        tail = h @ v[:, r0:]
        return float((tail**2).sum()), 2.0 * tail @ v[:, r0:].T
    lam, u = np.linalg.eigh(h @ h.T)
    u_tail = u[:, ::-1][:, r0:n]
    proj = u_tail.T @ h
    return float((proj**2).sum()), 2.0 * u_tail @ proj


def rank_from_ratio(gamma: float, n: int, d: int) -> int:
    if not 0.0 < gamma < 1.0:
        raise ValueError("rank ratio must lie in (0, 1)")
    return min(math.ceil(gamma * min(n, d)), min(n, d) - 1)


@dataclass(frozen=True)
class LowRankConfig:
    """``features`` picks the H the penalty sees: the dropout forward pass
    (``"train"``) or a separate dropout-free pass (``"eval"``)."""

    tau: float = 0.1
    gamma: float = 0.2
    eta: float = 0.01
    features: str = "train"

    def __post_init__(self):
        if self.features not in ("train", "eval"):
            raise ValueError(f"features must be 'train' or 'eval', got {self.features!r}")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass(frozen=True)
class GcnTrainConfig:
    hidden: int = 64
    feat_dim: int = 64
    epochs: int = 200
    dropout: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    select_on_val: bool = True
    row_normalize: bool = True
    seed: int = 0


@dataclass
class GcnModel:
    """Two symmetric-normalized propagation layers then a linear classifier (no biases).

    With ``row_normalize`` the graph's attribute rows are scaled to unit L1 norm
    before the first layer.
    """

    w1: np.ndarray
    w2: np.ndarray
    w_cls: np.ndarray
    row_normalize: bool = False

    @classmethod
    def init(cls, rng, n_features: int, hidden: int, feat_dim: int, n_classes: int) -> "GcnModel":
        def glorot(a, b):
            lim = math.sqrt(6.0 / (a + b))
            return rng.uniform(-lim, lim, size=(a, b))

        return cls(glorot(n_features, hidden), glorot(hidden, feat_dim), glorot(feat_dim, n_classes))

    def params(self):
        return {"w1": self.w1, "w2": self.w2, "w_cls": self.w_cls}


def normalized_adjacency(g: AttributedGraph) -> sp.csr_matrix:
    """``D^-1/2 (A + I) D^-1/2`` as a sparse matrix."""
    a = g.adjacency() + sp.identity(g.n_nodes, format="csr")
    d = np.asarray(a.sum(1)).ravel()
    inv = sp.diags(1.0 / np.sqrt(d))
    return (inv @ a @ inv).tocsr()


def row_normalized(x: np.ndarray) -> np.ndarray:
    """Rows divided by their L1 norm; all-zero rows stay zero."""
    s = np.abs(x).sum(1, keepdims=True)
    return x / np.where(s > 0, s, 1.0)


def gcn_forward(model: GcnModel, g, x=None, *, a_hat=None, dropout: float = 0.0, rng=None):
    """Returns ``(H, logits, cache)``; dropout (inverted) is active only when ``rng`` is given."""
    if a_hat is None:
        a_hat = normalized_adjacency(g)
    if x is None:
        x = row_normalized(g.attributes) if model.row_normalize else g.attributes
    keep = 1.0 - dropout

    def drop(v):
        if rng is None or dropout == 0.0:
            return v, None
        mask = (rng.random(v.shape) < keep) / keep
        return v * mask, mask

    x0, m0 = drop(x)
    p1 = a_hat @ (x0 @ model.w1)
    h1 = np.maximum(p1, 0.0)
    x1, m1 = drop(h1)
    p2 = a_hat @ (x1 @ model.w2)
    h = np.maximum(p2, 0.0)
    logits = h @ model.w_cls
    return h, logits, (a_hat, x0, m1, p1, x1, p2, h)


def gcn_backward(model: GcnModel, cache, d_logits, d_h_extra=None):
    a_hat, x0, m1, p1, x1, p2, h = cache
    grads = {"w_cls": h.T @ d_logits}
    d_h = d_logits @ model.w_cls.T
    if d_h_extra is not None:
        d_h = d_h + d_h_extra
    d_q2 = a_hat.T @ (d_h * (p2 > 0))
    grads["w2"] = x1.T @ d_q2
    d_h1 = d_q2 @ model.w2.T
    if m1 is not None:
        d_h1 = d_h1 * m1
    d_q1 = a_hat.T @ (d_h1 * (p1 > 0))
    grads["w1"] = x0.T @ d_q1
    return grads


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy (= KL to one-hot targets) and its gradient wrt ``logits``."""
    z = logits - logits.max(1, keepdims=True)
    lse = np.log(np.exp(z).sum(1, keepdims=True))
    logp = z - lse
    m = len(labels)
    loss = -float(logp[np.arange(m), labels].sum()) / m
    grad = np.exp(logp)
    grad[np.arange(m), labels] -= 1.0
    return loss, grad / m


def evaluate_accuracy(model: GcnModel, g: AttributedGraph, split="test", a_hat=None) -> float:
    """Argmax accuracy over the nodes of ``split`` (a tag or an index array)."""
    idx = g.nodes_in(split) if isinstance(split, str) else np.asarray(split)
    if len(idx) == 0:
        raise ValueError("evaluation split is empty")
    if np.any(g.labels[idx] == UNLABELED):
        raise ValueError("evaluation split contains unlabeled nodes")
    _, logits, _ = gcn_forward(model, g, a_hat=a_hat)
    return float(np.mean(np.argmax(logits[idx], axis=1) == g.labels[idx]))


@dataclass
class TrainResult:
    model: GcnModel
    history: list = field(default_factory=list)
    r0: int | None = None


def train_node_classifier(
    g,
    cfg: LowRankConfig | None = None,
    train_cfg: GcnTrainConfig | None = None,
    n_classes: int | None = None,
) -> TrainResult:
    """Full-batch Adam on mean cross-entropy over train nodes plus ``tau * ||H||_{r0}``.

    ``cfg=None`` (or ``tau == 0``) trains a plain GCN.  ``g`` may be an
    augmented graph, in which case its merged graph is used.
    """
    g = getattr(g, "graph", g)
    tc = train_cfg or GcnTrainConfig()
    train = g.nodes_in("train")
    if len(train) == 0:
        raise ValueError("no labeled training nodes")
    n_classes = n_classes or g.n_classes
    rng = np.random.default_rng(tc.seed)
    model = GcnModel.init(rng, g.n_features, tc.hidden, tc.feat_dim, n_classes)
    model.row_normalize = tc.row_normalize
    params = model.params()
    opt = OptimState(lr=cfg.eta if cfg is not None else tc.lr, weight_decay=tc.weight_decay)
    a_hat = normalized_adjacency(g)
    tau = cfg.tau if cfg is not None else 0.0
    r0 = rank_from_ratio(cfg.gamma, g.n_nodes, tc.feat_dim) if cfg is not None else None
    val = g.nodes_in("val")
    val = val[g.labels[val] != UNLABELED]
    test = g.nodes_in("test")
    test = test[g.labels[test] != UNLABELED]
    y_train = g.labels[train]
    result = TrainResult(model, r0=r0)
    best_val, best = -1.0, None
    for epoch in range(tc.epochs):
        h, logits, cache = gcn_forward(model, g, a_hat=a_hat, dropout=tc.dropout, rng=rng)
        ce, d_sub = softmax_xent(logits[train], y_train)
        d_logits = np.zeros_like(logits)
        d_logits[train] = d_sub
        tnn, d_h, extra = None, None, None
        if tau > 0 and cfg.features == "eval":
            h_clean, logits_clean, cache_clean = gcn_forward(model, g, a_hat=a_hat)
            tnn, g_tnn = truncated_nuclear_norm(h_clean, r0)
            extra = gcn_backward(model, cache_clean, np.zeros_like(logits_clean), tau * g_tnn)
        elif tau > 0:
            tnn, g_tnn = truncated_nuclear_norm(h, r0)
            d_h = tau * g_tnn
        loss = ce + (tau * tnn if tnn is not None else 0.0)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
        grads = gcn_backward(model, cache, d_logits, d_h)
        if extra is not None:
            grads = {k: v + extra[k] for k, v in grads.items()}
        adam_step(params, grads, opt)

        h_eval, logits_eval, _ = gcn_forward(model, g, a_hat=a_hat)
        pred = np.argmax(logits_eval, axis=1)
        row = {
            "epoch": epoch,
            "train_loss": loss,
            "tnn": tnn if tnn is not None else float("nan"),
            "val_acc": float(np.mean(pred[val] == g.labels[val])) if len(val) else float("nan"),
            "test_acc": float(np.mean(pred[test] == g.labels[test])) if len(test) else float("nan"),
        }
        result.history.append(row)
        if tc.select_on_val and len(val) and row["val_acc"] > best_val:
            best_val = row["val_acc"]
            best = {k: v.copy() for k, v in params.items()}
    if best is not None:
        for k, v in params.items():
            v[...] = best[k]
    return result


def feature_tnn(model: GcnModel, g, r0: int) -> float:
    """Truncated nuclear norm of eval-mode penultimate features."""
    h, _, _ = gcn_forward(model, getattr(g, "graph", g))
    return truncated_nuclear_norm(h, r0)[0]


def linear_gd_oracle(h, y, labeled, eta: float, t: int):
    """Labeled-set residual of ``t`` gradient steps on ``0.5 ||[HW - Y]_L||^2``
    from ``W = 0``, and the closed form ``-(I - eta K_LL)^t Y_L``."""
    h = np.asarray(h, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    labeled = np.asarray(labeled)
    lam_max = np.linalg.norm(h, 2) ** 2
    if not 0.0 < eta < 1.0 / lam_max:
        raise ValueError(f"eta={eta} outside the stable range (0, {1.0 / lam_max:.6g})")
    h_l, y_l = h[labeled], y[labeled]
    w = np.zeros((h.shape[1], y.shape[1]))
    for _ in range(t):
        w = w - eta * h_l.T @ (h @ w - y)[labeled]
    iterative = (h @ w)[labeled] - y_l
    k_ll = h_l @ h_l.T
    closed = -np.linalg.matrix_power(np.eye(len(labeled)) - eta * k_ll, t) @ y_l
    return iterative, closed


def eigen_projection(spectrum: GramSpectrum, y: np.ndarray):
    """Per-class projections of label columns on the eigenvectors and the
    class-averaged cumulative concentration curve.

    Each column is normalized by the norm of its component inside the
    eigenvector span, so the curve ends at exactly 1.
    """
    u = spectrum.eigenvectors
    y = np.asarray(y, dtype=np.float64)
    raw = u.T @ y
    norms = np.linalg.norm(y, axis=0)
    if np.any(norms == 0):
        raise ValueError(f"class {int(np.flatnonzero(norms == 0)[0])} has no labeled mass")
    in_span = np.linalg.norm(raw, axis=0)
    if np.any(in_span <= 1e-300):
        raise ValueError("a label column is orthogonal to every feature eigenvector")
    p = (raw / in_span).T
    curve = np.sqrt(np.cumsum(p**2, axis=1)).mean(0)
    return p, curve


def one_hot_training_labels(g: AttributedGraph, n_classes: int | None = None) -> np.ndarray:
    """One-hot rows for train-tagged nodes, zero rows elsewhere."""
    n_classes = n_classes or g.n_classes
    y = np.zeros((g.n_nodes, n_classes))
    train = g.nodes_in("train")
    y[train, g.labels[train]] = 1.0
    return y


@dataclass(frozen=True)
class CvBudget:
    folds: int = 5
    data_fraction: float = 0.2
    epoch_fraction: float = 0.4
    seed: int = 0


def _stratified_subset(labels, idx, fraction, rng):
    chosen = []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        take = max(1, int(round(fraction * len(members))))
        chosen.append(rng.permutation(members)[:take])
    return np.sort(np.concatenate(chosen))


def _stratified_folds(labels, idx, k, rng):
    folds = [[] for _ in range(k)]
    for c in np.unique(labels[idx]):
        members = rng.permutation(idx[labels[idx] == c])
        for j, node in enumerate(members):
            folds[j % k].append(node)
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def cross_validate(
    g: AttributedGraph,
    grids: dict | None = None,
    budget: CvBudget | None = None,
    train_cfg: GcnTrainConfig | None = None,
    augment_for_beta=None,
    tnn_features: str = "train",
):
    """Grid search over ``gamma``, ``tau`` and ``beta`` by k-fold CV on a subset
    of the training nodes with a shortened epoch budget.

    ``augment_for_beta(beta)`` must return the graph (original nodes first,
    synthetic nodes appended as train) to use for that ``beta``; without it
    the ``beta`` grid must have one entry.  Ties resolve to the
    lexicographically smallest ``(beta, tau, gamma)``.
    """
    grids = grids or {"gamma": DEFAULT_GAMMA_GRID, "tau": DEFAULT_TAU_GRID, "beta": DEFAULT_BETA_GRID}
    gammas, taus = tuple(grids["gamma"]), tuple(grids["tau"])
    betas = tuple(grids.get("beta", (0,)))
    if not (gammas and taus and betas):
        raise ValueError("every grid needs at least one value")
    if augment_for_beta is None and len(betas) > 1:
        raise ValueError("searching over beta needs augment_for_beta")
    budget = budget or CvBudget()
    tc = train_cfg or GcnTrainConfig()
    tc = replace(tc, epochs=max(1, math.ceil(budget.epoch_fraction * tc.epochs)), select_on_val=False)
    rng = np.random.default_rng(budget.seed)
    n0 = g.n_nodes
    train = g.nodes_in("train")
    subset = _stratified_subset(g.labels, train, budget.data_fraction, rng)
    folds = _stratified_folds(g.labels, subset, budget.folds, rng)
    classes = set(np.unique(g.labels[subset]).tolist())
    n_classes = g.n_classes

    scores = {}
    for beta in sorted(betas):
        base = augment_for_beta(beta) if augment_for_beta is not None else g
        base = getattr(base, "graph", base)
        for f, held in enumerate(folds):
            fit = np.setdiff1d(subset, held)
            if set(np.unique(g.labels[fit]).tolist()) != classes or len(held) == 0:
                raise ValueError(f"fold {f} leaves a class without training nodes")
        for tau, gamma in itertools.product(sorted(taus), sorted(gammas)):
            accs = []
            for held in folds:
                fit = np.setdiff1d(subset, held)
                split = np.full(base.n_nodes, "other", dtype="<U5")
                split[n0:] = "train"
                split[fit] = "train"
                split[held] = "val"
                labels = base.labels.copy()
                fold_graph = AttributedGraph(base.attributes, base.edges, labels, split)
                lr_cfg = LowRankConfig(tau, gamma, tc.lr, tnn_features) if tau > 0 else None
                res = train_node_classifier(fold_graph, lr_cfg, tc, n_classes=n_classes)
                accs.append(evaluate_accuracy(res.model, fold_graph, held))
            scores[(beta, tau, gamma)] = float(np.mean(accs))
    best_key, best_score = None, -np.inf
    for key in sorted(scores):
        if scores[key] > best_score + 1e-12:
            best_key, best_score = key, scores[key]
    beta, tau, gamma = best_key
    return {"gamma": gamma, "tau": tau, "beta": beta, "score": best_score, "scores": scores}
