"""Metrics, constant baselines, the rolling case study and protocol sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .data import (
    Episode,
    UserSequence,
    build_episode,
    denormalize_rating,
    length_sweep_slice,
)
from .meta import MetaLearner, train

SWEEP_HEADER = ("protocol", "value", "mode", "seed", "rmse", "mae", "n")
CASE_HEADER = ("mode", "step", "predicted", "true")
PROTOCOLS = ("length", "inner_steps")


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    n_predictions: int
    per_level_histogram: dict[int, dict[str, float]]
    mode: str = ""
    dataset: str = ""
    seed: int | None = None
    mse_normalized: float = math.nan

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mae": self.mae,
            "n_predictions": self.n_predictions,
            "per_level_histogram": {str(k): v for k, v in self.per_level_histogram.items()},
            "mode": self.mode,
            "dataset": self.dataset,
            "seed": self.seed,
        }


def error_metrics(predicted, true) -> tuple[float, float]:
    """``(rmse, mae)`` of ``predicted - true``."""
    e = np.asarray(predicted, dtype=np.float64) - np.asarray(true, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no predictions")
    return float(np.sqrt(np.mean(e * e))), float(np.mean(np.abs(e)))


def metrics_report(predicted, true, k: int = 5, **tags) -> MetricsReport:
    """Report from denormalized predictions and integer true levels."""
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.int64)
    rmse, mae = error_metrics(predicted, true)
    hist = {}
    for level in range(1, k + 1):
        p = predicted[true == level]
        hist[level] = {
            "count": int(p.size),
            "mean": float(p.mean()) if p.size else math.nan,
            "std": float(p.std()) if p.size else math.nan,
        }
    norm_err = (predicted - true) / (k - 1)
    return MetricsReport(rmse, mae, int(predicted.size), hist, mse_normalized=float(np.mean(norm_err**2)), **tags)


def evaluate(
    learner: MetaLearner,
    theta: Mapping[str, np.ndarray],
    phi: Mapping[str, np.ndarray],
    episodes: Sequence[Episode],
    dataset: str = "",
    seed: int | None = None,
    predictor: Callable[[Sequence[Episode]], np.ndarray] | None = None,
) -> MetricsReport:
    """Adapt on each support set and score the held-out final rating.

    ``predictor`` replaces the model: it maps episodes to normalized
    predictions. Used to plug in stubs.
    """
    if not episodes:
        raise ValueError("empty episode list")
    if predictor is None:
        pred, true = learner.predict_heldout(theta, phi, episodes)
    else:
        pred = np.asarray(predictor(episodes), dtype=np.float64)
        true = np.array([ep.heldout_level for ep in episodes])
    return metrics_report(denormalize_rating(pred, learner.k), true, learner.k, mode=learner.mode, dataset=dataset, seed=seed)


def constant_baseline(level_counts: Sequence[float], c: float) -> tuple[float, float]:
    """``(rmse, mae)`` of always predicting ``c`` against levels ``1..k``."""
    counts = np.asarray(level_counts, dtype=np.float64)
    if counts.sum() <= 0:
        raise ValueError("level counts must have a positive total")
    p = counts / counts.sum()
    d = c - np.arange(1, len(p) + 1)
    return float(np.sqrt(np.sum(p * d * d))), float(np.sum(p * np.abs(d)))


# ------------------------------------------------------------------ case study


@dataclass
class CaseStudy:
    rows: dict[str, list[tuple[str, int, float, int]]] = field(default_factory=dict)
    means: dict[str, dict[str, float]] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for utype, rows in self.rows.items():
            path = out_dir / f"case_study_{utype}.csv"
            with path.open("w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(CASE_HEADER)
                for mode, step, pred, true in rows:
                    w.writerow((mode, step, repr(float(pred)), true))
            paths.append(path)
        path = out_dir / "case_study_means.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("user_type", "mode", "mean_predicted", "mean_true"))
            for utype, by_mode in self.means.items():
                for mode, value in by_mode.items():
                    if mode != "true":
                        w.writerow((utype, mode, repr(value), repr(by_mode["true"])))
        paths.append(path)
        return paths


def rolling_episodes(seq: UserSequence, warmup: int = 2, max_length: int | None = None, **episode_kw) -> list[Episode]:
    """One episode per prefix ending at positions ``warmup+1 .. L`` (1-based)."""
    if warmup < 2:
        raise ValueError("warmup must be at least 2 (an episode needs three interactions)")
    out = []
    for t in range(warmup + 1, len(seq) + 1):
        prefix = UserSequence(seq.user_index, seq.items[:t], seq.ratings[:t])
        out.append(build_episode(prefix, max_length=max_length or len(seq), **episode_kw))
    return out


def case_study(
    models: Mapping[str, tuple[MetaLearner, Mapping[str, np.ndarray], Mapping[str, np.ndarray]]],
    users: Mapping[str, Sequence[UserSequence]],
    warmup: int = 2,
    max_length: int | None = None,
) -> CaseStudy:
    """Rolling one-step-ahead predictions per user type and mode.

    ``models`` maps a mode label to ``(learner, theta, phi)``; ``users`` maps a
    user type to its sequences. Each prediction adapts on the prefix first.
    """
    report = CaseStudy()
    for utype, seqs in users.items():
        eps, steps = [], []
        for s in seqs:
            ep = rolling_episodes(s, warmup, max_length)
            eps.extend(ep)
            steps.extend(range(warmup + 1, len(s) + 1))
        rows: list[tuple[str, int, float, int]] = []
        means: dict[str, float] = {}
        if eps:
            true = np.array([e.heldout_level for e in eps])
            means["true"] = float(true.mean())
            for label, (learner, theta, phi) in models.items():
                pred, _ = learner.predict_heldout(theta, phi, eps)
                pred = denormalize_rating(pred, learner.k)
                rows.extend((label, st, float(p), int(t)) for st, p, t in zip(steps, pred, true))
                means[label] = float(pred.mean())
        report.rows[utype] = rows
        report.means[utype] = means
    return report


# ---------------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    protocol: str
    value: int
    mode: str
    seed: int
    rmse: float
    mae: float
    n: int

    def as_tuple(self) -> tuple:
        return (self.protocol, self.value, self.mode, self.seed, repr(self.rmse), repr(self.mae), self.n)


def _episodes(seqs: Iterable[UserSequence], max_length: int, n_support: int, n_query: int, k: int) -> list[Episode]:
    return [build_episode(s, n_support, n_query, max_length, k) for s in seqs if len(s) >= 3]


def sweep(
    protocol: str,
    grid: Sequence[int],
    base: MetaLearner,
    splits: tuple[Sequence[UserSequence], Sequence[UserSequence], Sequence[UserSequence]],
    modes: Sequence[str],
    seeds: Sequence[int],
    n_support: int = 25,
    n_query: int = 3,
    dataset: str = "",
    on_row: Callable[[SweepRow], None] | None = None,
) -> list[SweepRow]:
    """One train + test evaluation per (value, mode, seed) cell.

    ``length``: users keep their ``l ~ U[5, min(T, L)]`` most recent ratings
    (the draw depends on the seed only, so all modes see the same data).
    ``inner_steps``: J is set for both training and test-time adaptation.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    if not grid or not modes or not seeds:
        raise ValueError("grid, modes and seeds must be nonempty")
    train_seqs, val_seqs, test_seqs = splits
    rows = []
    for value in grid:
        for seed in seeds:
            if protocol == "length":
                sliced = [length_sweep_slice(s, value, seed + 7919 * i) for i, s in enumerate(splits)]
                T = int(value)
            else:
                sliced = [list(train_seqs), list(val_seqs), list(test_seqs)]
                T = base.rec.max_length
            tr, va, te = (_episodes(s, T, n_support, n_query, base.k) for s in sliced)
            for mode in modes:
                tcfg = replace(base.train, mode=mode, seed=seed)
                if protocol == "inner_steps":
                    tcfg = replace(tcfg, inner_steps=int(value))
                learner = replace(base, rec=replace(base.rec, max_length=T), train=tcfg)
                result = train(learner, tr, va)
                rep = evaluate(learner, result.theta, result.phi, te, dataset=dataset, seed=seed)
                row = SweepRow(protocol, int(value), mode, int(seed), rep.rmse, rep.mae, rep.n_predictions)
                rows.append(row)
                if on_row is not None:
                    on_row(row)
    return rows


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow(r.as_tuple())
