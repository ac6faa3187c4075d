"""Bi-level training: per-user inner adaptation, outer meta-update of (theta, phi).

Modes form a lattice over one code path:

* ``basic``: no inner steps, no weighting network; plain training on query loss.
* ``maml``: J plain-gradient inner steps on the unit-weighted support loss.
* ``melo``: as ``maml`` but positions are weighted by the rating-sequence encoder.
* ``focal``: as ``maml`` with the focal regression loss.
* ``stats``: as ``maml`` with one MLP weight per sub-sequence from statistics.

Episodes in a meta-batch are processed together: parameters get a leading
episode axis, and since the batched loss is a sum of per-episode losses, each
episode's slice of the gradient is exactly its own gradient.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import lossfx
from .autodiff import Tensor
from .data import Episode, EpisodeBatch, SubBatch, collate
from .recommender import (
    RecommenderConfig,
    final_position_mask,
    forward,
    init_params,
    itemwise_loss,
    param_shapes,
)

log = logging.getLogger(__name__)

MODES = ("basic", "maml", "melo", "focal", "stats")


@dataclass
class TrainConfig:
    mode: str = "melo"
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    outer_lr_min: float | None = None
    inner_steps: int = 3
    meta_batch_size: int = 8
    episodes_total: int = 3000
    clip_norm: float = 5.0
    first_order: bool = False
    val_every: int = 250
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    final_position_only: bool = False
    focal_gamma: float = 1.0
    force_unit_weights: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0:
            raise ValueError("inner_steps must be >= 0")
        if self.meta_batch_size < 1:
            raise ValueError("meta_batch_size must be >= 1")
        if self.episodes_total < 0:
            raise ValueError("episodes_total must be >= 0")

    @property
    def lr_min(self) -> float:
        return self.outer_lr / 100.0 if self.outer_lr_min is None else self.outer_lr_min


def cosine_lr(step: int, total: int, base: float, minimum: float) -> float:
    """Cosine annealing from ``base`` at step 0 to ``minimum`` at ``total``."""
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return minimum + (base - minimum) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not math.isfinite(norm):
        raise ad.NonFiniteError("non-finite aggregate gradient")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return {k: g * scale for k, g in grads.items()}, norm
    return dict(grads), norm


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            m = self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            params[k] = params[k] - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out


# ------------------------------------------------------------------- adaptation


def expand(params: Mapping[str, Tensor], n: int) -> dict[str, Tensor]:
    """Give each shared parameter a leading axis of ``n`` identical copies."""
    out = {}
    for k, t in params.items():
        t1 = ad.reshape(t, (1,) + t.shape)
        out[k] = ad.broadcast_to(t1, (n,) + t.shape)
    return out


def adapt(
    params: Mapping[str, Tensor],
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    alpha: float,
    steps: int,
    first_order: bool = False,
    track: bool = True,
) -> tuple[dict[str, Tensor], list[float]]:
    """``steps`` rounds of ``p <- p - alpha * d loss / d p``.

    With ``track`` the result stays differentiable with respect to the initial
    ``params`` (through the gradients too unless ``first_order``). Without it,
    each step starts from fresh leaves, which is all evaluation needs.
    """
    names = list(params)
    cur = dict(params)
    losses = []
    for _ in range(steps):
        loss = loss_fn(cur)
        losses.append(loss.item())
        second = track and not first_order
        grads = ad.grad(loss, [cur[n] for n in names], create_graph=second)
        if track:
            cur = {n: cur[n] - alpha * g for n, g in zip(names, grads)}
        else:
            cur = {n: Tensor(cur[n].data - alpha * g.data, requires_grad=True, name=n) for n, g in zip(names, grads)}
    return cur, losses


@dataclass
class MetaLearner:
    rec: RecommenderConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: lossfx.EncoderConfig = field(default_factory=lossfx.EncoderConfig)
    stats: lossfx.StatsConfig = field(default_factory=lossfx.StatsConfig)
    k: int = 5

    @property
    def mode(self) -> str:
        return self.train.mode

    @property
    def steps(self) -> int:
        return 0 if self.mode == "basic" else self.train.inner_steps

    def init_params(self, seed) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_theta, s_phi = ss.spawn(2)
        theta = init_params(self.rec, s_theta)
        if self.mode == "melo":
            phi = lossfx.init_encoder(self.encoder, s_phi)
        elif self.mode == "stats":
            phi = lossfx.init_stats(self.stats, s_phi)
        else:
            phi = {}
        return theta, phi

    # -- losses

    def _loss_mask(self, mask: np.ndarray) -> np.ndarray:
        return final_position_mask(mask) if self.train.final_position_only else mask

    def support_weights(self, phi: Mapping[str, Tensor], sb: SubBatch):
        """Weights that do not depend on theta (``melo``), or ``None``."""
        if self.mode == "melo" and not self.train.force_unit_weights:
            return lossfx.encode_weights(phi, sb.levels, sb.mask, self.encoder.activation)
        return None

    def support_loss(self, theta: Mapping[str, Tensor], phi: Mapping[str, Tensor], sb: SubBatch, gammas=None) -> Tensor:
        pred = forward(theta, sb.items, sb.mask, self.rec)
        lmask = self._loss_mask(sb.mask)
        if self.mode == "focal":
            losses = lossfx.focal_regression_loss(pred, sb.targets, lmask, self.train.focal_gamma)
        else:
            losses = itemwise_loss(pred, sb.targets, lmask)
        if self.mode == "stats":
            feats = lossfx.stats_features(pred, sb.levels, lmask, losses, self.stats.features, self.k)
            w = lossfx.stats_weight(phi, feats)  # (E, N)
            inv = 1.0 / np.maximum(lmask.sum(axis=-1), 1.0)
            gammas = ad.reshape(w * inv, w.shape + (1,))
        elif gammas is None:
            gammas = np.ones(lmask.shape)
        return lossfx.weighted_episode_loss(gammas, losses, sb.counts)

    def query_loss(self, theta: Mapping[str, Tensor], qb: SubBatch) -> Tensor:
        """Sum over episodes of the masked mean squared error on query slices."""
        pred = forward(theta, qb.items, qb.mask, self.rec)
        lmask = self._loss_mask(qb.mask)
        sq = itemwise_loss(pred, qb.targets, lmask)
        per_ep = ad.tsum(ad.reshape(sq, (sq.shape[0], -1)), axis=-1)
        inv = 1.0 / np.maximum(lmask.reshape(lmask.shape[0], -1).sum(axis=-1), 1.0)
        return ad.tsum(per_ep * inv)

    # -- bi-level pieces

    def inner_adapt(
        self,
        theta: Mapping[str, Tensor],
        phi: Mapping[str, Tensor],
        sb: SubBatch,
        steps: int | None = None,
        first_order: bool | None = None,
        track: bool = True,
    ) -> tuple[dict[str, Tensor], list[float]]:
        steps = self.steps if steps is None else steps
        first_order = self.train.first_order if first_order is None else first_order
        E = sb.items.shape[0]
        shapes = param_shapes(self.rec)
        shared = {k: t for k, t in theta.items() if t.ndim == len(shapes[k])}
        start = dict(theta)
        start.update(expand(shared, E))
        if steps == 0:
            return start, []
        gammas = self.support_weights(phi, sb)
        if not track and gammas is not None:
            gammas = Tensor(gammas.data)
        return adapt(start, lambda p: self.support_loss(p, phi, sb, gammas), self.train.inner_lr, steps, first_order, track)

    def meta_gradient(
        self, theta: Mapping[str, np.ndarray], phi: Mapping[str, np.ndarray], batch: EpisodeBatch
    ) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Summed query loss after adaptation and its gradients w.r.t. theta and phi."""
        th = {k: Tensor(v, requires_grad=True, name=k) for k, v in theta.items()}
        ph = {k: Tensor(v, requires_grad=True, name=k) for k, v in phi.items()}
        adapted, _ = self.inner_adapt(th, ph, batch.support)
        q = self.query_loss(adapted, batch.query)
        leaves = list(th.values()) + list(ph.values())
        gs = ad.grad(q, leaves)
        g_theta = {k: g.data for k, g in zip(th, gs[: len(th)])}
        g_phi = {k: g.data for k, g in zip(ph, gs[len(th):])}
        return q.item(), g_theta, g_phi

    def predict_heldout(
        self,
        theta: Mapping[str, np.ndarray],
        phi: Mapping[str, np.ndarray],
        episodes: Sequence[Episode],
        batch_size: int | None = None,
        steps: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Adapt on each support set, then read the final position of the
        longest query slice. Returns normalized predictions and true levels."""
        if batch_size is None:
            n_params = sum(v.size for v in theta.values())
            batch_size = int(min(64, max(1, 4_000_000 // max(n_params, 1))))
        preds, truth = [], []
        th = {k: Tensor(v, requires_grad=True, name=k) for k, v in theta.items()}
        ph = {k: Tensor(v) for k, v in phi.items()}
        for start in range(0, len(episodes), batch_size):
            chunk = episodes[start:start + batch_size]
            batch = collate(chunk)
            adapted, _ = self.inner_adapt(th, ph, batch.support, steps=steps, track=False)
            q = batch.query
            last = np.maximum(q.counts - 1, 0)
            rows = np.arange(len(chunk))
            items = q.items[rows, last][:, None, :]
            mask = q.mask[rows, last][:, None, :]
            with ad.no_grad():
                p = forward(adapted, items, mask, self.rec)
            preds.append(p.data[:, 0, -1])
            truth.append(q.levels[rows, last, -1])
        return np.concatenate(preds), np.concatenate(truth)


def inner_adapt(learner: MetaLearner, theta, phi, support: SubBatch, steps=None, first_order=None):
    """Adapted per-episode parameters ``theta_{i,J}`` and the support losses seen."""
    return learner.inner_adapt(theta, phi, support, steps=steps, first_order=first_order)


@dataclass
class OptimizerState:
    adam: Adam
    total: int
    base_lr: float
    min_lr: float

    @property
    def step(self) -> int:
        return self.adam.step_count

    def lr(self, step: int | None = None) -> float:
        return cosine_lr(self.step if step is None else step, self.total, self.base_lr, self.min_lr)


def make_optimizer(theta, phi, cfg: TrainConfig) -> OptimizerState:
    params = {f"theta/{k}": v for k, v in theta.items()}
    params.update({f"phi/{k}": v for k, v in phi.items()})
    return OptimizerState(Adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps), cfg.episodes_total, cfg.outer_lr, cfg.lr_min)


def outer_step(
    learner: MetaLearner,
    theta: dict[str, np.ndarray],
    phi: dict[str, np.ndarray],
    episodes: Sequence[Episode] | EpisodeBatch,
    opt: OptimizerState,
) -> dict:
    """One meta-update in place. Returns loss, pre-clip gradient norm and lr."""
    batch = episodes if isinstance(episodes, EpisodeBatch) else collate(episodes)
    loss, g_theta, g_phi = learner.meta_gradient(theta, phi, batch)
    grads = {f"theta/{k}": v for k, v in g_theta.items()}
    grads.update({f"phi/{k}": v for k, v in g_phi.items()})
    grads, norm = clip_by_global_norm(grads, learner.train.clip_norm)
    lr = opt.lr()
    flat = {f"theta/{k}": v for k, v in theta.items()}
    flat.update({f"phi/{k}": v for k, v in phi.items()})
    opt.adam.step(flat, grads, lr)
    for k in theta:
        theta[k] = flat[f"theta/{k}"]
    for k in phi:
        phi[k] = flat[f"phi/{k}"]
    return {"loss": loss, "grad_norm": norm, "lr": lr}


LOG_HEADER = ("step", "split", "mode", "loss", "rmse", "mae", "lr")


@dataclass
class TrainResult:
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    final_theta: dict[str, np.ndarray]
    final_phi: dict[str, np.ndarray]
    opt: OptimizerState
    log_rows: list[tuple]
    best_step: int
    best_val_rmse: float
    best_adam: dict[str, np.ndarray]


def train(
    learner: MetaLearner,
    train_episodes: Sequence[Episode],
    val_episodes: Sequence[Episode] = (),
    progress: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``episodes_total`` outer steps; keep the best-validation parameters."""
    from .evaluation import evaluate

    cfg = learner.train
    if not train_episodes and cfg.episodes_total > 0:
        raise ValueError("no training episodes")
    s_init, s_sample = np.random.SeedSequence(cfg.seed).spawn(2)
    theta, phi = learner.init_params(s_init)
    opt = make_optimizer(theta, phi, cfg)
    rng = np.random.default_rng(s_sample)
    rows: list[tuple] = []
    best = (math.inf, 0, _copy(theta), _copy(phi), _copy(opt.adam.state_arrays()))

    def validate(step: int, lr: float):
        nonlocal best
        rep = evaluate(learner, theta, phi, val_episodes)
        rows.append((step, "val", cfg.mode, rep.mse_normalized, rep.rmse, rep.mae, lr))
        if rep.rmse < best[0]:
            best = (rep.rmse, step, _copy(theta), _copy(phi), _copy(opt.adam.state_arrays()))
        return rep

    if val_episodes:
        validate(0, opt.lr(0))
    n = len(train_episodes)
    for step in range(1, cfg.episodes_total + 1):
        idx = rng.choice(n, size=min(cfg.meta_batch_size, n), replace=False)
        info = outer_step(learner, theta, phi, [train_episodes[i] for i in idx], opt)
        rows.append((step, "train", cfg.mode, info["loss"], None, None, info["lr"]))
        if val_episodes and (step % cfg.val_every == 0 or step == cfg.episodes_total):
            rep = validate(step, opt.lr())
            info = dict(info, val_rmse=rep.rmse, val_mae=rep.mae)
        if progress is not None:
            progress(step, info)
    if not val_episodes:
        best = (math.nan, cfg.episodes_total, _copy(theta), _copy(phi), _copy(opt.adam.state_arrays()))
    return TrainResult(best[2], best[3], theta, phi, opt, rows, best[1], best[0], best[4])


def _copy(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def config_dict(learner: MetaLearner) -> dict:
    return {
        "model": asdict(learner.rec),
        "train": asdict(learner.train),
        "encoder": asdict(learner.encoder),
        "stats": {**asdict(learner.stats), "features": list(learner.stats.features)},
        "k": learner.k,
    }
