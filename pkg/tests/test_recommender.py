import numpy as np
import pytest

from metarec import autodiff as ad
from metarec import data as D
from metarec.autodiff import Record, Tensor
from metarec.recommender import (
    RecommenderConfig,
    final_position_mask,
    forward,
    init_params,
    itemwise_loss,
    param_shapes,
    predict,
    subsequence_loss,
    xavier_bound,
)

ARCHS = ("recurrent", "self_attention", "none")


def small(arch, layers=1):
    return RecommenderConfig(arch, item_vocab=20, embed_dim=8, hidden_dim=8, n_layers=layers, max_length=10)


def as_t(params, grad=False):
    return {k: Tensor(v, requires_grad=grad, name=k) for k, v in params.items()}


def random_batch(rng, E=2, N=3, T=6, vocab=20):
    lengths = rng.integers(1, T + 1, size=(E, N))
    mask = (np.arange(T)[None, None, :] >= T - lengths[..., None]).astype(float)
    items = rng.integers(1, vocab, size=(E, N, T)) * mask.astype(np.int64)
    targets = rng.integers(0, 5, size=(E, N, T)) / 4.0 * mask
    return items, mask, targets


def test_config_validation():
    with pytest.raises(ValueError):
        RecommenderConfig("transformer")
    with pytest.raises(ValueError):
        RecommenderConfig(item_vocab=1)
    with pytest.raises(ValueError):
        RecommenderConfig(n_layers=3)


@pytest.mark.parametrize("arch", ARCHS)
def test_init_deterministic_bounded_pad_zero(arch):
    cfg = small(arch, 2 if arch != "none" else 1)
    a, b = init_params(cfg, 11), init_params(cfg, 11)
    assert a.keys() == b.keys() == param_shapes(cfg).keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
        if a[k].ndim == 1:
            assert not a[k].any()
        else:
            assert np.abs(a[k]).max() <= xavier_bound(a[k].shape)
    assert not a["item_emb"][0].any()
    if arch == "self_attention":
        assert not a["pos_emb"][0].any()


@pytest.mark.parametrize("arch", ARCHS)
def test_outputs_in_unit_interval(arch):
    rng = np.random.default_rng(0)
    cfg = small(arch)
    items, mask, _ = random_batch(rng)
    p = forward(as_t(init_params(cfg, 0)), items, mask, cfg).data
    assert p.shape == items.shape
    assert (p > 0).all() and (p < 1).all()


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_head_gives_half(arch):
    cfg = small(arch)
    params = init_params(cfg, 1)
    params["head_w"][:] = 0.0
    items, mask, _ = random_batch(np.random.default_rng(1))
    assert np.array_equal(forward(as_t(params), items, mask, cfg).data, np.full(items.shape, 0.5))


@pytest.mark.parametrize("arch", ["recurrent", "self_attention"])
@pytest.mark.parametrize("layers", [1, 2])
def test_causality_every_position(arch, layers):
    rng = np.random.default_rng(2)
    cfg = small(arch, layers)
    params = as_t(init_params(cfg, 2))
    T = 7
    items = rng.integers(1, 20, size=(1, 1, T))
    mask = np.ones((1, 1, T))
    base = forward(params, items, mask, cfg).data[0, 0]
    for p in range(T):
        pert = items.copy()
        pert[0, 0, p] = 1 + (pert[0, 0, p] % 19)
        out = forward(params, pert, mask, cfg).data[0, 0]
        assert out[:p].tobytes() == base[:p].tobytes()
        assert not np.array_equal(out[p:], base[p:])


@pytest.mark.parametrize("arch", ["recurrent", "self_attention"])
def test_left_padding_does_not_change_predictions(arch):
    rng = np.random.default_rng(3)
    cfg = small(arch)
    params = as_t(init_params(cfg, 3))
    seq = rng.integers(1, 20, size=4)
    short = forward(params, seq[None, None, :], np.ones((1, 1, 4)), cfg).data[0, 0]
    padded = np.concatenate([[0, 0, 0], seq])[None, None, :]
    mask = np.array([[[0, 0, 0, 1, 1, 1, 1.0]]])
    long = forward(params, padded, mask, cfg).data[0, 0, 3:]
    assert np.allclose(short, long, atol=1e-12)


def test_id_out_of_range():
    cfg = small("recurrent")
    with pytest.raises(IndexError):
        forward(as_t(init_params(cfg, 0)), np.full((1, 1, 3), 20), np.ones((1, 1, 3)), cfg)


def test_itemwise_loss_examples():
    p = Tensor(np.array([[[1.0, 0.3, 0.9]]]))
    out = itemwise_loss(p, np.array([[[0.0, 0.3, 0.1]]]), np.array([[[1.0, 1.0, 0.0]]])).data
    assert out.tolist() == [[[1.0, 0.0, 0.0]]]


def test_final_position_mask():
    m = np.array([[0, 1, 1.0], [0, 0, 0.0]])
    assert final_position_mask(m).tolist() == [[0, 0, 1.0], [0, 0, 0.0]]


@pytest.mark.parametrize("arch", ARCHS)
def test_batched_params_match_shared(arch):
    rng = np.random.default_rng(4)
    cfg = small(arch)
    params = init_params(cfg, 4)
    items, mask, _ = random_batch(rng, E=3)
    shared = forward(as_t(params), items, mask, cfg).data
    batched = forward(as_t({k: np.broadcast_to(v, (3,) + v.shape).copy() for k, v in params.items()}), items, mask, cfg).data
    assert np.allclose(shared, batched, atol=1e-13)


@pytest.mark.parametrize("arch", ARCHS)
def test_loss_gradient_matches_fd(arch):
    rng = np.random.default_rng(5)
    cfg = small(arch)
    params = init_params(cfg, 5)
    items, mask, targets = random_batch(rng, E=1, N=2, T=5)

    def loss(**p):
        pred = forward(p, items, mask, cfg)
        return ad.tsum(itemwise_loss(pred, targets, mask)) * (1.0 / mask.sum())

    rec = Record.trace(loss, params)
    wrt = [k for k in params if k != "item_emb"]
    assert ad.finite_difference_check(rec, "out", wrt, 1e-4) < 1e-4
    # embedding: rows that appear only
    g = ad.gradient(rec, "out", ["item_emb"])["item_emb"].data
    assert not g[0].any()


def test_single_subsequence_api():
    cfg = small("recurrent")
    params = init_params(cfg, 6)
    ep = D.build_episode(D.UserSequence(0, np.arange(1, 8), np.array([5, 4, 3, 2, 1, 2, 3])), max_length=10)
    sub = ep.support[-1]
    p = predict(params, sub, cfg)
    assert p.shape == (10,)
    loss = subsequence_loss(params, sub, cfg)
    assert (loss[sub.loss_mask == 0] == 0).all()
    assert np.allclose(loss, (p - sub.target_ratings) ** 2 * sub.loss_mask)
