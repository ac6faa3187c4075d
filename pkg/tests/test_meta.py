import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metarec import autodiff as ad
from metarec import data as D
from metarec import meta as M
from metarec.autodiff import Record, Tensor
from metarec.recommender import RecommenderConfig


def tiny_learner(mode="maml", arch="recurrent", **train_kw):
    rec = RecommenderConfig(arch, item_vocab=20, embed_dim=6, hidden_dim=6, max_length=8)
    from metarec.lossfx import EncoderConfig, StatsConfig

    return M.MetaLearner(
        rec, M.TrainConfig(mode=mode, **train_kw), EncoderConfig(embed_dim=4, hidden_dim=5), StatsConfig(hidden_dim=5)
    )


def tiny_episodes(n, seed=0, lo=4, hi=8):
    prof = D.RatingProfile("mix", D.FAIR.proportions, (lo, hi))
    return [D.build_episode(s, n_support=25, n_query=3) for s in D.synthesize([prof], [1.0], n, 19, seed)]


# ---------------------------------------------------------- quadratic toy


def quad_meta_grad(a, c, theta0, alpha, J, first_order):
    t = Tensor(theta0, requires_grad=True)
    loss = lambda p: 0.5 * a * ad.square(p["t"] - c)
    adapted, _ = M.adapt({"t": t}, loss, alpha, J, first_order=first_order)
    (g,) = ad.grad(loss(adapted), [t])
    return g.item(), adapted["t"].item()


def test_one_inner_step_by_hand():
    a, c, alpha, theta = 2.0, 0.5, 0.1, 1.5
    _, t1 = quad_meta_grad(a, c, theta, alpha, 1, False)
    assert t1 == pytest.approx(theta - alpha * a * (theta - c), abs=1e-15)


@pytest.mark.parametrize("J", [0, 1, 2, 3, 5])
def test_quadratic_second_and_first_order(J):
    a, c, theta0, alpha = 1.3, -0.4, 0.9, 0.2
    g2, _ = quad_meta_grad(a, c, theta0, alpha, J, False)
    g1, _ = quad_meta_grad(a, c, theta0, alpha, J, True)
    assert g2 == pytest.approx(a * (theta0 - c) * (1 - alpha * a) ** (2 * J), abs=1e-12)
    assert g1 == pytest.approx(a * (theta0 - c) * (1 - alpha * a) ** J, abs=1e-12)


# ---------------------------------------------------------------- schedule


def test_cosine_endpoints_and_monotone():
    base, lo, total = 1e-3, 1e-5, 300
    lrs = [M.cosine_lr(s, total, base, lo) for s in range(total + 1)]
    assert lrs[0] == base and lrs[-1] == pytest.approx(lo, abs=1e-18)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert M.TrainConfig(outer_lr=2e-3).lr_min == pytest.approx(2e-5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10), st.floats(0.01, 10))
def test_clipping_bound(values, max_norm):
    grads = {f"p{i}": np.array([v, -v / 2]) for i, v in enumerate(values)}
    clipped, norm = M.clip_by_global_norm(grads, max_norm)
    after = math.sqrt(sum(float(np.vdot(g, g)) for g in clipped.values()))
    assert after <= max_norm + 1e-9
    if norm <= max_norm:
        assert all(np.array_equal(clipped[k], grads[k]) for k in grads)


def test_clipping_rejects_non_finite():
    with pytest.raises(ad.NonFiniteError):
        M.clip_by_global_norm({"a": np.array([np.inf])}, 1.0)


def test_adam_matches_hand_computation():
    p = {"w": np.array([1.0, -2.0])}
    opt = M.Adam(p)
    g = np.array([0.5, -0.1])
    opt.step(p, {"w": g}, 0.01)
    # first step: m_hat = g, v_hat = g^2 -> update = lr * sign(g) (up to eps)
    assert np.allclose(p["w"], [1.0 - 0.01, -2.0 + 0.01], atol=1e-9)
    assert opt.step_count == 1


def test_train_config_validation():
    for bad in ({"mode": "reptile"}, {"inner_lr": 0}, {"inner_steps": -1}, {"meta_batch_size": 0}):
        with pytest.raises(ValueError):
            M.TrainConfig(**bad)


# ------------------------------------------------------------ inner loop


def test_zero_steps_is_identity():
    learner = tiny_learner("maml", inner_steps=0)
    theta, phi = learner.init_params(0)
    batch = D.collate(tiny_episodes(3))
    th = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
    adapted, losses = learner.inner_adapt(th, {}, batch.support)
    assert losses == []
    for k, v in theta.items():
        for e in range(3):
            assert adapted[k].data[e].tobytes() == v.tobytes()


@pytest.mark.parametrize("arch", ["recurrent", "self_attention"])
def test_unit_weight_melo_equals_maml(arch):
    eps = tiny_episodes(4, seed=1)
    batch = D.collate(eps)
    maml = tiny_learner("maml", arch)
    melo = tiny_learner("melo", arch, force_unit_weights=True)
    theta, _ = maml.init_params(5)
    _, phi = melo.init_params(5)
    th = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
    a, la = maml.inner_adapt(th, {}, batch.support)
    b, lb = melo.inner_adapt(th, {k: Tensor(v, requires_grad=True) for k, v in phi.items()}, batch.support)
    assert la == lb
    for k in a:
        assert np.max(np.abs(a[k].data - b[k].data)) <= 1e-12
    qa, ga, _ = maml.meta_gradient(theta, {}, batch)
    qb, gb, gphi = melo.meta_gradient(theta, phi, batch)
    assert qa == qb
    for k in ga:
        assert np.max(np.abs(ga[k] - gb[k])) <= 1e-12
    assert all(not g.any() for g in gphi.values())


def test_first_order_melo_gives_zero_phi_gradient():
    learner = tiny_learner("melo", first_order=True)
    theta, phi = learner.init_params(2)
    _, g_theta, g_phi = learner.meta_gradient(theta, phi, D.collate(tiny_episodes(3, 2)))
    assert any(g.any() for g in g_theta.values())
    assert all(np.array_equal(g, np.zeros_like(g)) for g in g_phi.values())
    second = tiny_learner("melo")
    _, _, g_phi2 = second.meta_gradient(theta, phi, D.collate(tiny_episodes(3, 2)))
    assert any(g.any() for g in g_phi2.values())


@pytest.mark.parametrize("mode", ["maml", "melo", "stats", "focal"])
def test_batched_meta_gradient_is_sum_of_episode_gradients(mode):
    learner = tiny_learner(mode)
    theta, phi = learner.init_params(3)
    eps = tiny_episodes(3, seed=3)
    _, g_all, p_all = learner.meta_gradient(theta, phi, D.collate(eps))
    g_sum = {k: 0.0 for k in g_all}
    p_sum = {k: 0.0 for k in p_all}
    for ep in eps:
        _, g, p = learner.meta_gradient(theta, phi, D.collate([ep]))
        for k in g:
            g_sum[k] = g_sum[k] + g[k]
        for k in p:
            p_sum[k] = p_sum[k] + p[k]
    for k in g_all:
        assert np.allclose(g_all[k], g_sum[k], rtol=1e-9, atol=1e-12), k
    for k in p_all:
        assert np.allclose(p_all[k], p_sum[k], rtol=1e-9, atol=1e-12), k


def test_basic_is_supervised_query_training():
    learner = tiny_learner("basic")
    theta, phi = learner.init_params(4)
    assert phi == {}
    batch = D.collate(tiny_episodes(3, 4))
    q, g, _ = learner.meta_gradient(theta, {}, batch)
    th = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
    direct = learner.query_loss(th, batch.query)
    gd = ad.grad(direct, list(th.values()))
    assert q == pytest.approx(direct.item(), abs=1e-14)
    for (k, v), d in zip(g.items(), gd):
        assert np.allclose(v, d.data, atol=1e-14)


@pytest.mark.parametrize("mode", ["melo", "stats"])
def test_meta_gradient_matches_fd(mode):
    learner = tiny_learner(mode, inner_steps=2, inner_lr=0.5)
    theta, phi = learner.init_params(6)
    batch = D.collate(tiny_episodes(2, seed=6, lo=4, hi=5))
    names_t, names_p = list(theta), list(phi)

    def objective(**p):
        th = {k: p["t_" + k] for k in names_t}
        ph = {k: p["p_" + k] for k in names_p}
        adapted, _ = learner.inner_adapt(th, ph, batch.support)
        return learner.query_loss(adapted, batch.query)

    inputs = {"t_" + k: v for k, v in theta.items()}
    inputs.update({"p_" + k: v for k, v in phi.items()})
    rec = Record.trace(objective, inputs)
    small = [k for k in inputs if inputs[k].size <= 40]
    assert ad.finite_difference_check(rec, "out", small, 1e-5) < 1e-4


# ------------------------------------------------------------------ train


def test_train_zero_steps_returns_init():
    learner = tiny_learner("melo", episodes_total=0)
    eps = tiny_episodes(6)
    res = M.train(learner, eps, eps[:2])
    theta, phi = learner.init_params(np.random.SeedSequence(0).spawn(2)[0])
    for k in theta:
        assert res.theta[k].tobytes() == theta[k].tobytes()
    for k in phi:
        assert res.phi[k].tobytes() == phi[k].tobytes()
    assert res.best_step == 0


def test_modes_share_data_order(monkeypatch):
    seen = {}
    real = M.outer_step

    def spy(learner, theta, phi, episodes, opt):
        seen.setdefault(learner.mode, []).append([ep.user_index for ep in episodes])
        return real(learner, theta, phi, episodes, opt)

    monkeypatch.setattr(M, "outer_step", spy)
    eps = tiny_episodes(12)
    for mode in ("basic", "maml", "melo"):
        M.train(tiny_learner(mode, episodes_total=4, meta_batch_size=3, seed=9), eps)
    assert seen["basic"] == seen["maml"] == seen["melo"]


def test_train_deterministic_and_logs():
    eps = tiny_episodes(10, seed=5)
    runs = [M.train(tiny_learner("melo", episodes_total=4, meta_batch_size=2, val_every=2, seed=1), eps[:8], eps[8:]) for _ in range(2)]
    assert runs[0].log_rows == runs[1].log_rows
    for k in runs[0].theta:
        assert runs[0].theta[k].tobytes() == runs[1].theta[k].tobytes()
    splits = [r[1] for r in runs[0].log_rows]
    assert splits.count("val") == 3 and splits.count("train") == 4
    lrs = [r[6] for r in runs[0].log_rows if r[1] == "train"]
    assert lrs[0] == 1e-3


def test_train_updates_parameters_and_keeps_pad_rows_zero():
    eps = tiny_episodes(8, seed=7)
    res = M.train(tiny_learner("melo", episodes_total=3, meta_batch_size=4), eps)
    init, _ = tiny_learner("melo").init_params(np.random.SeedSequence(0).spawn(2)[0])
    assert not np.array_equal(res.final_theta["head_w"], init["head_w"])
    assert not res.final_theta["item_emb"][0].any()
    assert not res.final_phi["rating_emb"][0].any()


def test_final_position_only_changes_loss():
    eps = tiny_episodes(3, seed=8)
    batch = D.collate(eps)
    a = tiny_learner("maml")
    b = tiny_learner("maml", final_position_only=True)
    theta, _ = a.init_params(0)
    assert a.meta_gradient(theta, {}, batch)[0] != b.meta_gradient(theta, {}, batch)[0]
