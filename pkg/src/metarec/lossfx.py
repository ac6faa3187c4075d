"""Inner-loop loss strategies.

* ``encode_weights``: an LSTM over a sub-sequence's rating levels emitting one
  nonnegative weight per position.
* ``weighted_episode_loss``: mean over sub-sequences of ``gamma . loss``.
* ``focal_regression_loss``: ``|e|^gamma_f * e^2`` per position.
* ``stats_weight``: a 2-layer MLP over hand-built sub-sequence statistics,
  giving one scalar weight per sub-sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .recommender import init_uniform, linear

STATS_FEATURES = ("mean", "std", "label", "pred", "loss")


@dataclass
class EncoderConfig:
    k: int = 5
    embed_dim: int = 16
    hidden_dim: int = 32
    activation: str = "softplus"

    def __post_init__(self):
        if self.activation not in ("softplus", "relu"):
            raise ValueError("activation must be softplus or relu")


def encoder_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden_dim
    return {
        "rating_emb": (cfg.k + 1, cfg.embed_dim),
        "lstm_wx": (cfg.embed_dim, 4 * h),
        "lstm_wh": (h, 4 * h),
        "lstm_b": (4 * h,),
        "out_w": (h, 1),
        "out_b": (1,),
    }


def init_encoder(cfg: EncoderConfig, seed, zero: bool = False) -> dict[str, np.ndarray]:
    shapes = encoder_shapes(cfg)
    if zero:
        return {k: np.zeros(s) for k, s in shapes.items()}
    return init_uniform(shapes, seed, pad_rows=("rating_emb",))


def encode_weights(phi: Mapping[str, Tensor], levels: np.ndarray, mask: np.ndarray, activation: str = "softplus") -> Tensor:
    """Per-position weights for rating sequences of shape ``(..., T)``.

    Padded positions keep the hidden state unchanged; their weights are
    computed but meet zero losses.
    """
    levels = np.asarray(levels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    H = phi["lstm_wh"].shape[0]
    lead, T = levels.shape[:-1], levels.shape[-1]
    x = ad.embedding(phi["rating_emb"], levels)
    xg = linear(x, phi["lstm_wx"], phi["lstm_b"])
    h = Tensor(np.zeros(lead + (H,)))
    c = h
    hs = []
    for t in range(T):
        m = mask[..., t]
        if not m.any():
            hs.append(h)
            continue
        g = xg[..., t, :] + h @ phi["lstm_wh"]
        i = ad.sigmoid(g[..., :H])
        f = ad.sigmoid(g[..., H:2 * H])
        o = ad.sigmoid(g[..., 2 * H:3 * H])
        u = ad.tanh(g[..., 3 * H:])
        c_new = f * c + i * u
        h_new = o * ad.tanh(c_new)
        if m.all():
            h, c = h_new, c_new
        else:
            mt = m[..., None]
            h = h_new * mt + h * (1.0 - mt)
            c = c_new * mt + c * (1.0 - mt)
        hs.append(h)
    hidden = ad.stack(hs, axis=-2)
    raw = linear(hidden, phi["out_w"], phi["out_b"])
    raw = ad.reshape(raw, raw.shape[:-1])
    return ad.softplus(raw) if activation == "softplus" else ad.relu(raw)


def weighted_episode_loss(gammas, losses, n_sub) -> Tensor:
    """``sum_e (1 / N_e) sum_s gamma_s . loss_s`` for arrays shaped ``(E, N, T)``.

    Summing (not averaging) over episodes keeps each episode's gradient exact
    when parameters carry a per-episode axis. Also accepts one episode given as
    lists of per-sub-sequence vectors.
    """
    if isinstance(losses, (list, tuple)):
        if not losses:
            raise ValueError("empty support set")
        losses = ad.stack([ad._t(l) for l in losses], axis=0)
        gammas = ad.stack([ad._t(g) for g in gammas], axis=0)
        losses = ad.reshape(losses, (1,) + losses.shape)
        gammas = ad.reshape(gammas, (1,) + gammas.shape)
        n_sub = [losses.shape[1]]
    n = np.asarray(n_sub, dtype=np.float64)
    if (n < 1).any():
        raise ValueError("empty support set")
    per_sub = ad.tsum(ad._t(gammas) * losses, axis=-1)  # (E, N)
    per_ep = ad.tsum(per_sub, axis=-1)  # (E,)
    return ad.tsum(per_ep * (1.0 / n))


def focal_regression_loss(predictions: Tensor, targets: np.ndarray, mask: np.ndarray, gamma_f: float = 1.0) -> Tensor:
    """``mask * |e|^gamma_f * e^2`` with ``e = prediction - target``."""
    if gamma_f < 0:
        raise ValueError("gamma_f must be nonnegative")
    e = predictions - np.asarray(targets, dtype=np.float64)
    if gamma_f == 0:
        core = ad.square(e)
    else:
        core = ad.power(ad.tabs(e), gamma_f + 2.0)
    return core * np.asarray(mask, dtype=np.float64)


# --------------------------------------------------------------------------- stats


@dataclass
class StatsConfig:
    k: int = 5
    hidden_dim: int = 32
    features: tuple[str, ...] = field(default_factory=lambda: STATS_FEATURES)

    def __post_init__(self):
        self.features = tuple(self.features)
        bad = set(self.features) - set(STATS_FEATURES)
        if bad:
            raise ValueError(f"unknown stats features {sorted(bad)}")

    @property
    def width(self) -> int:
        sizes = {"mean": 1, "std": 1, "label": self.k, "pred": self.k, "loss": 1}
        return sum(sizes[f] for f in self.features)


def stats_shapes(cfg: StatsConfig) -> dict[str, tuple[int, ...]]:
    return {
        "stats_w1": (cfg.width, cfg.hidden_dim),
        "stats_b1": (cfg.hidden_dim,),
        "stats_w2": (cfg.hidden_dim, 1),
        "stats_b2": (1,),
    }


def init_stats(cfg: StatsConfig, seed, zero: bool = False) -> dict[str, np.ndarray]:
    shapes = stats_shapes(cfg)
    if zero:
        return {k: np.zeros(s) for k, s in shapes.items()}
    return init_uniform(shapes, seed)


def _nearest_level_hist(pred: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    level = np.clip(np.rint(pred * (k - 1)), 0, k - 1).astype(np.int64)
    onehot = np.eye(k)[level] * mask[..., None]
    cnt = np.maximum(mask.sum(axis=-1), 1.0)[..., None]
    return onehot.sum(axis=-2) / cnt


class _NearestLevelHist(ad.Op):
    __slots__ = ("mask", "k")
    name = "nearest_level_hist"

    def __init__(self, mask, k):
        self.mask = mask
        self.k = k

    def forward(self, pred):
        return _nearest_level_hist(pred, self.mask, self.k)

    def backward(self, g, out, pred):
        return (None,)


def stats_features(
    predictions: Tensor,
    levels: np.ndarray,
    mask: np.ndarray,
    losses: Tensor,
    features: Sequence[str] = STATS_FEATURES,
    k: int = 5,
) -> Tensor:
    """Feature vector per sub-sequence, shape ``(..., width)``.

    Means and distributions are over unmasked positions. Features not listed
    are left out, so the width shrinks.
    """
    mask = np.asarray(mask, dtype=np.float64)
    inv = 1.0 / np.maximum(mask.sum(axis=-1), 1.0)
    parts = []
    mu = ad.tsum(predictions * mask, axis=-1) * inv
    for name in features:
        if name == "mean":
            parts.append(ad.reshape(mu, mu.shape + (1,)))
        elif name == "std":
            dev = predictions - ad.reshape(mu, mu.shape + (1,))
            var = ad.tsum(ad.square(dev) * mask, axis=-1) * inv
            sd = ad.sqrt(var + 1e-8)
            parts.append(ad.reshape(sd, sd.shape + (1,)))
        elif name == "label":
            lv = np.clip(np.asarray(levels, dtype=np.int64) - 1, 0, k - 1)
            hist = (np.eye(k)[lv] * mask[..., None]).sum(axis=-2) * inv[..., None]
            parts.append(Tensor(hist))
        elif name == "pred":
            parts.append(ad._apply(_NearestLevelHist(mask, k), predictions))
        elif name == "loss":
            ml = ad.tsum(losses, axis=-1) * inv
            parts.append(ad.reshape(ml, ml.shape + (1,)))
    return ad.concat(parts, axis=-1)


def stats_weight(mlp: Mapping[str, Tensor], features: Tensor) -> Tensor:
    """Nonnegative scalar per sub-sequence from a tanh MLP with a softplus head."""
    if features.shape[-1] != mlp["stats_w1"].shape[0]:
        raise ValueError(f"feature width {features.shape[-1]} != MLP input width {mlp['stats_w1'].shape[0]}")
    hdn = ad.tanh(linear(features, mlp["stats_w1"], mlp["stats_b1"]))
    out = linear(hdn, mlp["stats_w2"], mlp["stats_b2"])
    return ad.softplus(ad.reshape(out, out.shape[:-1]))
