"""Class-conditional DDPM over autoencoder latents with classifier-free guidance."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nn import (
    Dense,
    Embedding,
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


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays are indexed by ``t - 1`` for steps ``t = 1..T``."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray

    @property
    def t_max(self) -> int:
        return len(self.betas)


def make_schedule(t_max: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule; the reverse-process noise scale is ``sqrt(beta_t)``."""
    if t_max < 1:
        raise ValueError("t_max must be at least 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, t_max)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas, alphas, np.cumprod(alphas), np.sqrt(betas))


def default_schedule(t_max: int = 1000) -> DiffusionSchedule:
    """The 1e-4..0.02 linear schedule at T=1000, betas rescaled by 1000/T otherwise
    so that the terminal signal level stays near zero for short chains."""
    scale = 1000.0 / t_max
    return make_schedule(t_max, 1e-4 * scale, min(0.02 * scale, 0.999))


def _check_t(t, sched: DiffusionSchedule):
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.t_max):
        raise ValueError(f"diffusion step outside [1, {sched.t_max}]")
    return t


def q_sample(z0, t, eps, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form marginal ``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` may be per-row."""
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t - 1]
    if np.ndim(z0) == 2:
        ab = np.broadcast_to(ab, (np.shape(z0)[0],))[:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def q_step(z_prev, t: int, eps, sched: DiffusionSchedule) -> np.ndarray:
    """One Markov step ``z_t ~ N(sqrt(1 - beta_t) z_{t-1}, beta_t I)``."""
    b = sched.betas[_check_t(t, sched) - 1]
    return np.sqrt(1.0 - b) * z_prev + np.sqrt(b) * eps


@dataclass
class Denoiser:
    """Noise predictor ``eps(z_t, t, label)``: a three-layer MLP over
    ``[z_t, label embedding, sinusoidal time embedding]``.

    Label id ``n_classes`` is the null token.  ``shift``/``scale`` map the
    standardized diffusion space back to raw latent units.
    """

    mlp: list[Dense]
    label: Embedding
    time_dim: int
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def init(cls, rng, latent_dim: int, n_classes: int, hidden: int = 512, label_dim: int = 64, time_dim: int = 64):
        width = latent_dim + label_dim + time_dim
        return cls(
            mlp=[
                Dense.init(rng, width, hidden, "relu"),
                Dense.init(rng, hidden, hidden, "relu"),
                Dense.init(rng, hidden, latent_dim, "identity"),
            ],
            label=Embedding.init(rng, n_classes + 1, label_dim),
            time_dim=time_dim,
            shift=np.zeros(latent_dim),
            scale=np.ones(latent_dim),
        )

    @property
    def latent_dim(self) -> int:
        return self.mlp[-1].n_out

    @property
    def n_classes(self) -> int:
        return self.label.table.shape[0] - 1

    @property
    def null_label(self) -> int:
        return self.n_classes

    def params(self):
        out = {f"den.mlp{k}": v for k, v in mlp_params(self.mlp, "").items()}
        out["den.label.table"] = self.label.table
        return out

    def _inputs(self, z_t, t, labels):
        z_t = np.atleast_2d(z_t)
        n = z_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (n,))
        emb, ids = self.label.forward(labels)
        return np.concatenate([z_t, emb, positional_table(t, self.time_dim)], axis=1), ids

    def predict(self, z_t, t, labels) -> np.ndarray:
        x, _ = self._inputs(z_t, t, labels)
        out, _ = mlp_forward(self.mlp, x)
        return out

    def forward(self, z_t, t, labels):
        x, ids = self._inputs(z_t, t, labels)
        out, caches = mlp_forward(self.mlp, x)
        return out, (caches, ids)

    def backward(self, cache, d_out):
        caches, ids = cache
        d_x, grads = mlp_backward(self.mlp, caches, d_out, "den.mlp")
        d = self.latent_dim
        _, g = self.label.backward(ids, d_x[:, d : d + self.label.table.shape[1]])
        grads["den.label.table"] = g["table"]
        return grads


def ldm_loss(
    den,
    z0,
    labels,
    sched: DiffusionSchedule,
    p_uncond: float,
    rng: np.random.Generator | None = None,
    *,
    t=None,
    eps=None,
    drop=None,
    with_grad: bool = True,
):
    """Mean over the batch of ``||eps - eps_theta(z_t, t, label)||^2``.

    ``t``, ``eps`` and ``drop`` (label-dropout mask) are drawn from ``rng`` in
    that order unless given.  ``den`` only needs ``predict`` when
    ``with_grad`` is False.  Returns ``(loss, grads or None)``.
    """
    if not 0.0 <= p_uncond < 1.0 + 1e-12:
        raise ValueError("p_uncond must lie in [0, 1]")
    z0 = np.atleast_2d(z0)
    n = z0.shape[0]
    if t is None:
        t = rng.integers(1, sched.t_max + 1, size=n)
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    if drop is None:
        drop = rng.random(n) < p_uncond
    cond = np.where(drop, den.null_label, np.asarray(labels, dtype=np.int64))
    z_t = q_sample(z0, t, eps, sched)
    if not with_grad:
        diff = den.predict(z_t, t, cond) - eps
        return float((diff**2).sum()) / n, None
    pred, cache = den.forward(z_t, t, cond)
    diff = pred - eps
    return float((diff**2).sum()) / n, den.backward(cache, 2.0 * diff / n)


@dataclass
class LdmConfig:
    epochs: int = 3000
    t_max: int = 1000
    beta_start: float | None = None
    beta_end: float | None = None
    hidden: int = 512
    label_dim: int = 64
    time_dim: int = 64
    lr: float = 2e-4
    weight_decay: float = 1e-4
    ema_decay: float = 0.995
    p_uncond: float = 0.1
    batch_size: int = 64
    standardize: bool = True
    seed: int = 0

    def schedule(self) -> DiffusionSchedule:
        if self.beta_start is None or self.beta_end is None:
            return default_schedule(self.t_max)
        return make_schedule(self.t_max, self.beta_start, self.beta_end)


@dataclass
class LdmModel:
    denoiser: Denoiser
    ema: dict
    config: LdmConfig
    history: list = field(default_factory=list)

    @property
    def schedule(self) -> DiffusionSchedule:
        return self.config.schedule()

    def ema_denoiser(self) -> Denoiser:
        den = _init_denoiser(self.config, self.denoiser.latent_dim, self.denoiser.n_classes)
        for k, v in den.params().items():
            v[...] = self.ema[k]
        den.shift, den.scale = self.denoiser.shift.copy(), self.denoiser.scale.copy()
        return den


def _init_denoiser(cfg: LdmConfig, latent_dim: int, n_classes: int) -> Denoiser:
    rng = np.random.default_rng(cfg.seed)
    return Denoiser.init(rng, latent_dim, n_classes, cfg.hidden, cfg.label_dim, cfg.time_dim)


def train_ldm(latents: np.ndarray, labels: np.ndarray, config: LdmConfig | None = None, n_classes: int | None = None) -> LdmModel:
    """Fit the noise predictor on labeled latents with AdamW and track an EMA copy."""
    cfg = config or LdmConfig()
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    den = _init_denoiser(cfg, latents.shape[1], n_classes)
    if cfg.standardize:
        den.shift = latents.mean(0)
        den.scale = latents.std(0) + 1e-8
    z = (latents - den.shift) / den.scale
    sched = cfg.schedule()
    params = den.params()
    model = LdmModel(den, copy_params(params), cfg)
    opt = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay, decoupled=True)
    rng = np.random.default_rng([cfg.seed, 2])
    n = len(z)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            b = order[s : s + cfg.batch_size]
            loss, grads = ldm_loss(den, z[b], labels[b], sched, cfg.p_uncond, rng)
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite diffusion loss at epoch {epoch}")
            adam_step(params, grads, opt)
            ema_update(model.ema, params, cfg.ema_decay, opt.step)
            total += loss * len(b)
        model.history.append({"epoch": epoch, "loss": total / n})
    return model


def _reverse_step(z, t, eps_hat, sched, noise):
    b = sched.betas[t - 1]
    mean = (z - b / math.sqrt(1.0 - sched.alpha_bars[t - 1]) * eps_hat) / math.sqrt(sched.alphas[t - 1])
    return mean if t == 1 else mean + sched.sigmas[t - 1] * noise


def _draw_streams(rngs, t_max, dim):
    """Per-sample starting point and per-step noise, drawn in sampling order."""
    starts, noises = [], []
    for r in rngs:
        starts.append(r.standard_normal(dim))
        noises.append(r.standard_normal((max(t_max - 1, 0), dim)))
    return np.array(starts), np.array(noises)


def cfg_sample_batch(den: Denoiser, labels, omega: float, sched: DiffusionSchedule, rngs) -> np.ndarray:
    """Guided ancestral sampling for several labels at once, one RNG per sample.

    ``eps~ = (1 + omega) eps(z, t, y) - omega eps(z, t, null)``.  Results are
    returned in raw latent units (``shift``/``scale`` undone).
    """
    if omega < 0:
        raise ValueError("guidance strength must be nonnegative")
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    if n == 0:
        return np.zeros((0, den.latent_dim))
    z, noises = _draw_streams(rngs, sched.t_max, den.latent_dim)
    null = np.full(n, den.null_label)
    for t in range(sched.t_max, 0, -1):
        both = den.predict(np.vstack([z, z]), t, np.concatenate([labels, null]))
        eps_hat = (1.0 + omega) * both[:n] - omega * both[n:]
        z = _reverse_step(z, t, eps_hat, sched, noises[:, sched.t_max - t] if t > 1 else None)
    return z * den.scale + den.shift


def cfg_sample(den: Denoiser, label: int, omega: float, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    return cfg_sample_batch(den, [label], omega, sched, [rng])[0]


def ancestral_sample(den: Denoiser, label: int, sched: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Unguided conditional sampling; consumes ``rng`` exactly like :func:`cfg_sample`."""
    z, noises = _draw_streams([rng], sched.t_max, den.latent_dim)
    for t in range(sched.t_max, 0, -1):
        eps_hat = den.predict(z, t, [label])
        z = _reverse_step(z, t, eps_hat, sched, noises[:, sched.t_max - t] if t > 1 else None)
    return (z * den.scale + den.shift)[0]


def save_ldm(path: str, model: LdmModel, extra_meta: dict | None = None) -> None:
    den = model.denoiser
    tensors = dict(den.params())
    tensors.update({f"ema/{k}": v for k, v in model.ema.items()})
    tensors["shift"], tensors["scale"] = den.shift, den.scale
    meta = {"config": asdict(model.config), "latent_dim": den.latent_dim, "n_classes": den.n_classes, **(extra_meta or {})}
    save_checkpoint(path, tensors, meta)
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_ldm(path: str) -> LdmModel:
    tensors, meta = load_checkpoint(path)
    cfg = LdmConfig(**meta["config"])
    den = _init_denoiser(cfg, meta["latent_dim"], meta["n_classes"])
    params = den.params()
    for k, v in params.items():
        v[...] = tensors[k]
    den.shift, den.scale = tensors["shift"], tensors["scale"]
    return LdmModel(den, {k: tensors[f"ema/{k}"].copy() for k in params}, cfg)
