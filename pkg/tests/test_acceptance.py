"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The two training criteria (directional benefit and the inner-step sweep) are
marked ``slow``; together they take a few hours on one core. Deselect them with
``pytest -m "not slow"``. Their CSV reports land in ``reports/acceptance/``.
"""
import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from metarec import autodiff as ad
from metarec import data as D
from metarec import evaluation as EV
from metarec import meta as M
from metarec.autodiff import Record, Tensor
from metarec.cli import main as cli_main
from metarec.lossfx import EncoderConfig, StatsConfig
from metarec.recommender import RecommenderConfig

GROCERY = (72.8, 13.4, 6.7, 3.8, 3.3)  # percent of ratings at levels 5, 4, 3, 2, 1
REPORTS = Path(__file__).resolve().parents[1] / "reports" / "acceptance"


def _learner(mode, arch, d, h, max_length, enc=(4, 5), **train_kw):
    rec = RecommenderConfig(arch, item_vocab=20, embed_dim=d, hidden_dim=h, max_length=max_length)
    return M.MetaLearner(rec, M.TrainConfig(mode=mode, **train_kw), EncoderConfig(5, *enc), StatsConfig(hidden_dim=4))


def _episodes(n, seed, lo, hi, max_length=None):
    prof = D.RatingProfile("mix", D.FAIR.proportions, (lo, hi))
    return [D.build_episode(s, 25, 3, max_length) for s in D.synthesize([prof], [1.0], n, 19, seed)]


# ------------------------------------------------------------------ anchors


def test_balance_score_anchor(acceptance_line):
    got = D.balance_score(GROCERY)
    ok = abs(got - 0.57) <= 0.005
    acceptance_line("1 balance-score anchor", ok, f"balance={got:.4f} (target 0.57 +- 0.005)")
    assert ok


def test_constant_predictor_anchor(acceptance_line):
    counts = GROCERY[::-1]  # levels 1..5
    rmse, mae = EV.constant_baseline(counts, 5)
    ok = abs(mae - 0.5140) <= 5e-4 and abs(rmse - 1.1278) <= 5e-4
    acceptance_line("2 constant-predictor anchor", ok, f"mae={mae:.4f} rmse={rmse:.4f} (targets 0.5140 / 1.1278)")
    assert ok


# ---------------------------------------------------------------- gradients


def _fd_instance(i: int) -> tuple[str, float]:
    """One random finite-difference check; returns (description, max rel. error)."""
    rng = np.random.default_rng(1000 + i)
    arch = ("recurrent", "self_attention")[i % 2]
    kind = ("support", "query", "support", "meta")[i % 4]
    small = kind == "meta"
    d = int(rng.integers(2, 4 if small else 9))
    h = int(rng.integers(2, 4 if small else 9))
    if arch == "self_attention":
        h = d
    lo = int(rng.integers(3, 5))
    hi = lo + int(rng.integers(0, 3))
    learner = _learner("melo", arch, d, h, hi, enc=(int(rng.integers(2, 5)), int(rng.integers(2, 5))),
                       inner_steps=1, inner_lr=0.5)
    theta, phi = learner.init_params(0)
    # random weights in [-1, 1]; at fresh Xavier scale some recurrent gradients
    # fall near 1e-10, below what central differences resolve in float64
    theta = {k: rng.uniform(-1, 1, v.shape) for k, v in theta.items()}
    phi = {k: rng.uniform(-1, 1, v.shape) for k, v in phi.items()}
    batch = D.collate(_episodes(int(rng.integers(1, 3)), int(rng.integers(1 << 30)), lo, hi, hi))
    nt, npp = list(theta), list(phi)

    def split(p):
        return {k: p["t_" + k] for k in nt}, {k: p["p_" + k] for k in npp}

    if kind == "support":
        def fn(**p):
            th, ph = split(p)
            return learner.support_loss(th, ph, batch.support, learner.support_weights(ph, batch.support))
    elif kind == "query":
        def fn(**p):
            th, _ = split(p)
            return learner.query_loss(th, batch.query)
    else:
        def fn(**p):
            th, ph = split(p)
            adapted, _ = learner.inner_adapt(th, ph, batch.support)
            return learner.query_loss(adapted, batch.query)

    inputs = {"t_" + k: v for k, v in theta.items()}
    inputs.update({"p_" + k: v for k, v in phi.items()})
    rec = Record.trace(fn, inputs)
    wrt = [k for k in inputs if kind != "query" or k.startswith("t_")]
    err = ad.finite_difference_check(rec, "out", wrt, 1e-4)
    return f"{arch}/{kind} d={d} h={h}", err


def test_gradient_suite(acceptance_line):
    start = time.perf_counter()
    results = [_fd_instance(i) for i in range(52)]
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r[1])
    bad = [r for r in results if not r[1] < 1e-4]
    ok = not bad and elapsed < 60
    acceptance_line(
        "3 gradient suite", ok,
        f"{len(results)} instances, worst rel. error {worst[1]:.2e} ({worst[0]}), {elapsed:.1f}s",
    )
    assert not bad, bad
    assert elapsed < 60


# ------------------------------------------------------------ maml reduction


def test_unit_weights_reduce_to_maml(acceptance_line):
    worst_traj = worst_grad = 0.0
    n_eps = 0
    for b in range(10):
        arch = ("recurrent", "self_attention")[b % 2]
        maml = _learner("maml", arch, 6, 6, 9, inner_steps=3, inner_lr=0.3)
        melo = _learner("melo", arch, 6, 6, 9, inner_steps=3, inner_lr=0.3, force_unit_weights=True)
        theta, phi = melo.init_params(b)
        batch = D.collate(_episodes(10, 50 + b, 3, 9, 9))
        n_eps += batch.size
        for J in (1, 2, 3):
            th = {k: Tensor(v, requires_grad=True) for k, v in theta.items()}
            ph = {k: Tensor(v, requires_grad=True) for k, v in phi.items()}
            a, la = maml.inner_adapt(th, {}, batch.support, steps=J)
            c, lc = melo.inner_adapt(th, ph, batch.support, steps=J)
            worst_traj = max(worst_traj, max(abs(x - y) for x, y in zip(la, lc)))
            worst_traj = max(worst_traj, max(float(np.max(np.abs(a[k].data - c[k].data))) for k in a))
        qa, ga, _ = maml.meta_gradient(theta, {}, batch)
        qc, gc, gphi = melo.meta_gradient(theta, phi, batch)
        worst_grad = max(worst_grad, abs(qa - qc), max(float(np.max(np.abs(ga[k] - gc[k]))) for k in ga))
        assert all(not g.any() for g in gphi.values())
    ok = n_eps >= 100 and worst_traj <= 1e-12 and worst_grad <= 1e-12
    acceptance_line(
        "4 maml reduction", ok,
        f"{n_eps} episodes, max trajectory gap {worst_traj:.1e}, max outer-gradient gap {worst_grad:.1e}",
    )
    assert ok


# ----------------------------------------------------------- quadratic toy


def test_second_order_oracle(acceptance_line):
    # support loss = query loss = a/2 (t - c)^2, plain gradient descent inner loop:
    # t_J - c = (1 - alpha a)^J (t0 - c), so dL(t_J)/dt0 = a (t0 - c)(1 - alpha a)^(2J)
    # exactly, and a(t_J - c) = a (t0 - c)(1 - alpha a)^J when dt_J/dt0 is treated as 1.
    a, c, t0, alpha = 1.7, 0.3, -0.8, 0.15
    worst = 0.0
    for J, first_order in itertools.product((1, 2, 3), (False, True)):
        t = Tensor(t0, requires_grad=True)
        loss = lambda p: 0.5 * a * ad.square(p["t"] - c)
        adapted, _ = M.adapt({"t": t}, loss, alpha, J, first_order=first_order)
        (g,) = ad.grad(loss(adapted), [t])
        power = J if first_order else 2 * J
        oracle = a * (t0 - c) * (1 - alpha * a) ** power
        worst = max(worst, abs(g.item() - oracle))
    distinct = abs((1 - alpha * a) ** 2 - (1 - alpha * a)) > 1e-3
    ok = worst <= 1e-5 and distinct
    acceptance_line("5 second-order oracle", ok, f"J in 1..3, both orders, max gap {worst:.1e}")
    assert ok


# ------------------------------------------------------- episode construction


def _span_oracle(L):
    """Classify every contiguous span of length >= 2 by brute force."""
    support, query = [], []
    for a in range(L):
        for b in range(a + 2, L + 1):
            if a == 0 and b <= L - 1:
                support.append((a, b))
            if b == L:
                query.append((a, b))
    return support, query


def test_episode_construction_suite(acceptance_line):
    checked = 0
    for L in range(3, 31):
        sup, qry = _span_oracle(L)
        assert len(sup) == L - 2 and len(qry) == L - 1
        cand_s, cand_q = D.slice_candidates(L)
        assert sorted(cand_s) == sorted(sup) and sorted(cand_q) == sorted(qry)
        rng = np.random.default_rng(L)
        items = rng.choice(np.arange(1, 41), size=L, replace=False)
        levels = rng.integers(1, 6, size=L)
        ep = D.build_episode(D.UserSequence(L, items, levels), 25, 3)
        keep_s = sorted(sup, key=lambda s: s[1] - s[0])[-25:]
        keep_q = sorted(qry, key=lambda s: s[1] - s[0])[:3]
        assert len(ep.support) == min(L - 2, 25) and len(ep.query) == min(L - 1, 3)
        for sub, (a, b) in zip(ep.support, keep_s):
            real = sub.loss_mask > 0
            assert sub.item_ids[real].tolist() == items[a:b].tolist()
            assert sub.rating_levels[real].tolist() == levels[a:b].tolist()
            assert items[-1] not in sub.item_ids[real]
        for sub, (a, b) in zip(ep.query, keep_q):
            real = sub.loss_mask > 0
            assert sub.item_ids[real].tolist() == items[a:b].tolist()
            assert sub.item_ids[real][-1] == items[-1]
        assert ep.heldout_level == levels[-1]
        checked += 1
    acceptance_line("6 episode construction", True, f"L = 3..30 ({checked} lengths) match the span oracle")


# ------------------------------------------------------ directional benefit

# 5k users, 200 items, 70/20/10 generous/fair/grumpy, lengths 5..10
DIRECTIONAL_SEEDS = (0, 1, 2, 3, 4)
OUTER_STEPS = 3000


def _synthetic_splits(seed):
    seqs = D.synthesize([D.GENEROUS, D.FAIR, D.GRUMPY], [0.7, 0.2, 0.1], 5000, 200, seed)
    idx = D.split_users(len(seqs), (0.7, 0.1, 0.2), seed)
    return seqs, [[seqs[i] for i in part] for part in idx]


def _base_learner(mode="melo", seed=0, **kw):
    rec = RecommenderConfig("recurrent", item_vocab=201, embed_dim=32, hidden_dim=32, max_length=10)
    return M.MetaLearner(rec, M.TrainConfig(mode=mode, episodes_total=OUTER_STEPS, seed=seed, **kw))


@pytest.mark.slow
def test_directional_imbalance_benefit(acceptance_line):
    REPORTS.mkdir(parents=True, exist_ok=True)
    rows, wins, balances = [], 0, []
    for seed in DIRECTIONAL_SEEDS:
        seqs, (tr, va, te) = _synthetic_splits(seed)
        balances.append(D.balance_score(D.rating_counts(seqs)))
        tr, va, te = ([D.build_episode(s) for s in part] for part in (tr, va, te))
        rmse, sq_err = {}, {}
        for mode in ("maml", "melo"):
            learner = _base_learner(mode, seed)
            result = M.train(learner, tr, va)
            pred, true = learner.predict_heldout(result.theta, result.phi, te)
            rep = EV.evaluate(learner, None, None, te, dataset="synthetic", seed=seed, predictor=lambda _: pred)
            rmse[mode] = rep.rmse
            sq_err[mode] = (D.denormalize_rating(pred) - true) ** 2
            rows.append([seed, mode, result.best_step, repr(rep.rmse), repr(rep.mae), rep.n_predictions])
        # paired bootstrap over test users: spread of the RMSE gap from test sampling alone
        idx = np.random.default_rng(seed).integers(0, len(te), size=(1000, len(te)))
        gaps = np.sqrt(sq_err["melo"][idx].mean(1)) - np.sqrt(sq_err["maml"][idx].mean(1))
        for r in rows[-2:]:
            r.append(repr(float(gaps.std())))
        wins += rmse["melo"] <= rmse["maml"]
        print(f"seed {seed}: maml {rmse['maml']:.4f} melo {rmse['melo']:.4f} gap sd {gaps.std():.4f}", flush=True)
    with (REPORTS / "directional.csv").open("w", newline="") as fh:
        fh.write("seed,mode,best_step,rmse,mae,n,gap_bootstrap_sd\n")
        for r in rows:
            fh.write(",".join(map(str, r)) + "\n")
    ok = wins >= 4
    acceptance_line(
        "7 directional benefit", ok,
        f"melo <= maml test RMSE in {wins}/{len(DIRECTIONAL_SEEDS)} seeds "
        f"(dataset balance {np.mean(balances):.3f}; per-seed rows in reports/acceptance/directional.csv)",
    )
    assert ok


# --------------------------------------------------------- inner-step sweep


@pytest.mark.slow
def test_inner_step_sweep(acceptance_line):
    REPORTS.mkdir(parents=True, exist_ok=True)
    _, splits = _synthetic_splits(0)
    seeds, grid = (0, 1, 2), (0, 1, 2, 3, 4, 5)
    rows = EV.sweep(
        "inner_steps", grid, _base_learner(), tuple(splits), ("maml", "melo"), seeds, dataset="synthetic",
        on_row=lambda r: print(f"J={r.value} {r.mode} seed {r.seed}: rmse {r.rmse:.4f}", flush=True),
    )
    EV.write_sweep(REPORTS / "inner_steps.csv", rows)
    table = {(r.mode, r.seed, r.value): r.rmse for r in rows}
    hits = 0
    for s in seeds:
        best = min(table["melo", s, J] for J in grid)
        hits += table["melo", s, 1] <= 1.02 * best
    ok = hits * 2 > len(seeds)
    maml_best_j = {s: min(grid, key=lambda J: table["maml", s, J]) for s in seeds}
    acceptance_line(
        "8 inner-step sweep", ok,
        f"melo J=1 within 2% of its best in {hits}/{len(seeds)} seeds; "
        f"maml best J per seed (report only) {json.dumps(maml_best_j)}",
    )
    assert ok


# ----------------------------------------------------------- reproducibility


def test_reruns_byte_identical(acceptance_line, tmp_path):
    cfg = {
        "name": "repro",
        "seed": 11,
        "threads": 1,
        "data": {"min_item_ratings": 1, "max_length": 10},
        "model": {"embed_dim": 8, "hidden_dim": 8, "encoder": {"embed_dim": 4, "hidden_dim": 6}},
        "train": {"mode": "melo", "episodes_total": 12, "val_every": 4, "meta_batch_size": 4},
        "synth": {"n_users": 80, "n_items": 30},
        "eval": {"case_users_per_type": 2, "case_length_range": [5, 8]},
        "sweep": {"grid": [0, 1], "modes": ["maml", "melo"], "seeds": [0], "protocol": "inner_steps"},
        "paths": {"dataset": "synthetic.csv"},
    }
    start = time.perf_counter()
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        path = out / "config.json"
        cfg["paths"]["dataset"] = str(out / "synthetic.csv")
        path.write_text(json.dumps(cfg))
        for cmd in ("synth", "prepare", "train", "eval", "sweep", "case-study"):
            assert cli_main([cmd, "--config", str(path), "--out", str(out), "--threads", "1"]) == 0, cmd
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir() if not p.name.startswith("manifest_") and p.name != "config.json")
    differ = [f for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    elapsed = time.perf_counter() - start
    ok = not differ and {"metrics.csv", "checkpoint.bin", "last.bin"} <= set(files) and elapsed < 60
    acceptance_line("9 reproducibility", ok, f"{len(files)} output files compared, {len(differ)} differ, {elapsed:.1f}s")
    assert not differ, differ
    assert elapsed < 60
