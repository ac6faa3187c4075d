"""Sequential rating predictors: GRU, causal self-attention, or embedding only.

Networks map left-padded item sequences of shape ``(E, N, T)`` to per-position
normalized ratings in (0, 1). Parameters may carry a leading episode axis
``E`` (one adapted copy per episode) or be shared across episodes.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SubSequence

ARCHITECTURES = ("recurrent", "self_attention", "none")


@dataclass
class RecommenderConfig:
    architecture: str = "recurrent"
    item_vocab: int = 2
    embed_dim: int = 64
    hidden_dim: int = 64
    n_layers: int = 1
    max_length: int = 30

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if min(self.item_vocab - 1, self.embed_dim, self.hidden_dim, self.max_length) <= 0:
            raise ValueError("dimensions must be positive and the vocab must include the pad row")
        if not 1 <= self.n_layers <= 2:
            raise ValueError("n_layers must be 1 or 2")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: RecommenderConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.embed_dim, cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"item_emb": (cfg.item_vocab, d)}
    if cfg.architecture == "recurrent":
        width = d
        for l in range(cfg.n_layers):
            shapes[f"gru{l}_wx"] = (width, 3 * h)
            shapes[f"gru{l}_wh"] = (h, 3 * h)
            shapes[f"gru{l}_bx"] = (3 * h,)
            shapes[f"gru{l}_bh"] = (3 * h,)
            width = h
        out = h
    elif cfg.architecture == "self_attention":
        shapes["pos_emb"] = (cfg.max_length + 1, d)
        for l in range(cfg.n_layers):
            for w in ("wq", "wk", "wv", "wo"):
                shapes[f"attn{l}_{w}"] = (d, d)
            shapes[f"ffn{l}_w1"] = (d, h)
            shapes[f"ffn{l}_b1"] = (h,)
            shapes[f"ffn{l}_w2"] = (h, d)
            shapes[f"ffn{l}_b2"] = (d,)
        out = d
    else:
        out = d
    shapes["head_w"] = (out, 1)
    shapes["head_b"] = (1,)
    return shapes


def xavier_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = shape[-2], shape[-1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_uniform(shapes: Mapping[str, tuple[int, ...]], seed, pad_rows: tuple[str, ...] = ()) -> dict[str, np.ndarray]:
    """Glorot-uniform matrices, zero vectors; ``pad_rows`` tables get row 0 zeroed."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            a = xavier_bound(shape)
            params[name] = rng.uniform(-a, a, size=shape)
        if name in pad_rows:
            params[name][0] = 0.0
    return params


def init_params(cfg: RecommenderConfig, seed) -> dict[str, np.ndarray]:
    return init_uniform(param_shapes(cfg), seed, pad_rows=("item_emb", "pos_emb"))


# ------------------------------------------------------------------ layer helpers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` where ``w``/``b`` may carry a leading episode axis.

    ``x`` has shape ``(E, ..., d_in)``. Shared weights are ``(d_in, d_out)``;
    per-episode weights are ``(E, d_in, d_out)``.
    """
    if w.ndim == 2:
        y = x @ w
    else:
        lead = x.shape[:-1]
        y = ad.reshape(x, (x.shape[0], -1, x.shape[-1])) @ w
        y = ad.reshape(y, lead + (w.shape[-1],))
    if b is not None:
        if b.ndim == 2:
            b = ad.reshape(b, (b.shape[0],) + (1,) * (y.ndim - 2) + (b.shape[-1],))
        y = y + b
    return y


def _recurrent(params, prefix, x: Tensor, mask: np.ndarray, hidden: int) -> Tensor:
    wx, wh = params[f"{prefix}_wx"], params[f"{prefix}_wh"]
    bx, bh = params[f"{prefix}_bx"], params[f"{prefix}_bh"]
    E, N, T = mask.shape
    xg = linear(x, wx, bx)
    xr, xz, xn = xg[..., :hidden], xg[..., hidden:2 * hidden], xg[..., 2 * hidden:]
    h = Tensor(np.zeros((E, N, hidden)))
    outs = []
    for t in range(T):
        m = mask[:, :, t]
        if not m.any():
            outs.append(h)
            continue
        hg = linear(h, wh, bh)
        r = ad.sigmoid(xr[:, :, t, :] + hg[..., :hidden])
        z = ad.sigmoid(xz[:, :, t, :] + hg[..., hidden:2 * hidden])
        n = ad.tanh(xn[:, :, t, :] + r * hg[..., 2 * hidden:])
        h_new = n + z * (h - n)
        if m.all():
            h = h_new
        else:
            mt = m[:, :, None]
            h = h_new * mt + h * (1.0 - mt)
        outs.append(h)
    return ad.stack(outs, axis=2)


def _attention_mask(mask: np.ndarray) -> np.ndarray:
    """Additive mask: query p sees real keys at positions <= p, and itself."""
    T = mask.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal & ((mask[..., None, :] > 0) | np.eye(T, dtype=bool))
    return np.where(allowed, 0.0, -1e9)


def _self_attention(params, x: Tensor, mask: np.ndarray, n_layers: int) -> Tensor:
    d = x.shape[-1]
    bias = _attention_mask(mask)
    scale = 1.0 / np.sqrt(d)
    for l in range(n_layers):
        q = linear(x, params[f"attn{l}_wq"])
        k = linear(x, params[f"attn{l}_wk"])
        v = linear(x, params[f"attn{l}_wv"])
        scores = (q @ ad.transpose(k)) * scale + bias
        a = ad.softmax(scores, axis=-1) @ v
        x = x + linear(a, params[f"attn{l}_wo"])
        f = ad.tanh(linear(x, params[f"ffn{l}_w1"], params[f"ffn{l}_b1"]))
        x = x + linear(f, params[f"ffn{l}_w2"], params[f"ffn{l}_b2"])
    return x


def forward(params: Mapping[str, Tensor], items: np.ndarray, mask: np.ndarray, cfg: RecommenderConfig) -> Tensor:
    """Predicted normalized ratings, shape ``(E, N, T)``.

    Position ``p`` depends only on items at positions ``<= p``; padded positions
    carry item id 0.
    """
    items = np.asarray(items, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if items.ndim != 3:
        raise ValueError("items must have shape (E, N, T)")
    if items.size and items.max() >= cfg.item_vocab:
        raise IndexError(f"item id {int(items.max())} out of range for vocab {cfg.item_vocab}")
    x = ad.embedding(params["item_emb"], items)
    if cfg.architecture == "recurrent":
        for l in range(cfg.n_layers):
            x = _recurrent(params, f"gru{l}", x, mask, cfg.hidden_dim)
    elif cfg.architecture == "self_attention":
        pos = (np.cumsum(mask > 0, axis=-1) * (mask > 0)).astype(np.int64)
        x = x + ad.embedding(params["pos_emb"], pos)
        x = _self_attention(params, x, mask, cfg.n_layers)
    y = linear(x, params["head_w"], params["head_b"])
    return ad.sigmoid(ad.reshape(y, y.shape[:-1]))


def itemwise_loss(predictions: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """``mask * (prediction - target)^2`` per position."""
    return ad.square(predictions - np.asarray(targets, dtype=np.float64)) * np.asarray(mask, dtype=np.float64)


def final_position_mask(mask: np.ndarray) -> np.ndarray:
    """Keep only the last real position of each sub-sequence (left padding)."""
    out = np.zeros_like(mask)
    real = mask[..., -1] > 0
    out[..., -1] = real
    return out


# ---------------------------------------------------------- single sub-sequence API


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


def predict(params: Mapping[str, np.ndarray], sub: SubSequence, cfg: RecommenderConfig) -> np.ndarray:
    """Per-position predictions for one padded sub-sequence."""
    with ad.no_grad():
        out = forward(as_tensors(params), sub.item_ids[None, None, :], sub.loss_mask[None, None, :], cfg)
    return out.data[0, 0]


def subsequence_loss(params: Mapping[str, np.ndarray], sub: SubSequence, cfg: RecommenderConfig) -> np.ndarray:
    with ad.no_grad():
        p = forward(as_tensors(params), sub.item_ids[None, None, :], sub.loss_mask[None, None, :], cfg)
        return itemwise_loss(p, sub.target_ratings[None, None, :], sub.loss_mask[None, None, :]).data[0, 0]
