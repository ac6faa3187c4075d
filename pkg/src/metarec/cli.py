"""``metarec`` command line: prepare, synth, train, eval, sweep, case-study.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import config as C
from . import data as D
from . import evaluation as EV
from .meta import LOG_HEADER, train

log = logging.getLogger("metarec")


class UsageError(Exception):
    """Bad invocation or missing input; maps to exit code 2."""


# ----------------------------------------------------------------- helpers


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def hashed_config(cfg: C.RunConfig) -> dict:
    """Resolved config without paths: what determines results."""
    d = cfg.to_dict()
    d.pop("paths")
    return d


def out_dir(cfg: C.RunConfig, args) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.paths.out:
        return Path(cfg.paths.out)
    return Path("runs") / cfg.name


def prepared_dir(cfg: C.RunConfig, out: Path) -> Path:
    return Path(cfg.paths.prepared) if cfg.paths.prepared else out


def require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_metrics_log(path: Path, rows) -> None:
    write_csv(path, LOG_HEADER, ([_fmt(v) for v in r] for r in rows))


def load_prepared(pdir: Path, k: int):
    vocab = json.loads(require_file(pdir / "vocab.json", "vocabulary").read_text(encoding="utf-8"))
    splits = {}
    for part in ("train", "val", "test"):
        splits[part] = D.read_episodes(require_file(pdir / f"{part}.jsonl", f"{part} episodes"), k)
    return vocab, splits


def learner_from_checkpoint(path: Path):
    tensors, meta = ckpt.load(path)
    cfg = C.from_dict(meta["config"])
    learner = cfg.learner(int(meta["item_vocab"]))
    theta, phi, _ = ckpt.unbundle(tensors)
    return learner, theta, phi, meta


# ---------------------------------------------------------------- commands


def cmd_prepare(cfg: C.RunConfig, out: Path) -> dict:
    src = require_file(Path(cfg.paths.dataset), "dataset") if cfg.paths.dataset else None
    if src is None:
        raise UsageError("paths.dataset is not set")
    d = cfg.data
    if d.min_length < 3:
        raise C.ConfigError("data.min_length must be at least 3 to form episodes")
    interactions = D.load_log(src, d.k)
    seqs, vocab = D.preprocess(interactions, d.min_item_ratings, d.max_length, d.min_length)
    parts = D.split_users(len(seqs), d.split, cfg.seed)
    label = np.empty(len(seqs), dtype=object)
    for name, idx in zip(("train", "val", "test"), parts):
        label[idx] = name
    episodes = {
        name: [D.build_episode(seqs[i], d.n_support, d.n_query, d.max_length, d.k) for i in idx]
        for name, idx in zip(("train", "val", "test"), parts)
    }
    stats = D.dataset_stats(seqs, vocab, d.k)

    out.mkdir(parents=True, exist_ok=True)
    for name, eps in episodes.items():
        D.write_episodes(out / f"{name}.jsonl", eps)
    D.write_sequences(out / "sequences.jsonl", seqs, list(label))
    vocab_doc = {"size": vocab.size, "items": vocab.item_to_index, "users": vocab.user_ids}
    (out / "vocab.json").write_text(json.dumps(vocab_doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    rows = [
        ("Users", stats["users"]),
        ("Items", stats["items"]),
        ("Ratings", stats["ratings"]),
        ("Average length", f"{stats['average_length']:.2f}"),
        ("Balance score", f"{stats['balance_score']:.2f}"),
    ]
    rows += [(f"Rating {i + 1} (%)", f"{100 * p:.1f}") for i, p in enumerate(stats["rating_proportions"])]
    rows.append(("Rejected rows", interactions.n_rejected))
    write_csv(out / "stats.csv", ("statistic", cfg.name), rows)
    log.info("prepared %d users (%s), balance %.3f", stats["users"], {k: len(v) for k, v in episodes.items()}, stats["balance_score"])
    return {"stats": stats, "episodes": {k: len(v) for k, v in episodes.items()}}


def cmd_synth(cfg: C.RunConfig, out: Path) -> dict:
    s = cfg.synth
    if s.n_users < 0:
        raise C.ConfigError("synth.n_users must be >= 0")
    seqs = D.synthesize(cfg.profiles(), s.weights, s.n_users, s.n_items, cfg.seed)
    if not seqs:
        log.warning("synth.n_users is 0: writing a header-only file")
    out.mkdir(parents=True, exist_ok=True)
    D.write_log(out / "synthetic.csv", seqs)
    counts = D.rating_counts(seqs, len(cfg.profiles()[0].proportions))
    return {"users": len(seqs), "ratings": int(counts.sum()), "level_counts": counts.tolist()}


def cmd_train(cfg: C.RunConfig, out: Path) -> dict:
    vocab, splits = load_prepared(prepared_dir(cfg, out), cfg.data.k)
    learner = cfg.learner(int(vocab["size"]))
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, learner.train.episodes_total // 20)

    def progress(step, info):
        if step % every == 0:
            log.info("step %d loss %.5f lr %.2e", step, info["loss"], info["lr"])

    res = train(learner, splits["train"], splits["val"], progress)
    conf = hashed_config(cfg)
    meta = {"config": conf, "config_hash": ckpt.config_hash(conf), "item_vocab": int(vocab["size"]), "mode": learner.mode}
    best_adam = {k: v for k, v in res.best_adam.items()}
    ckpt.save(out / "checkpoint.bin", ckpt.bundle(res.theta, res.phi, best_adam), {**meta, "kind": "best", "step": res.best_step})
    ckpt.save(
        out / "last.bin",
        ckpt.bundle(res.final_theta, res.final_phi, res.opt.adam.state_arrays()),
        {**meta, "kind": "last", "step": res.opt.step},
    )
    write_metrics_log(out / "metrics.csv", res.log_rows)
    summary = {"best_step": res.best_step, "best_val_rmse": res.best_val_rmse}
    log.info("best validation RMSE %.4f at step %d", res.best_val_rmse, res.best_step)
    return summary


def _checkpoint_path(cfg: C.RunConfig, out: Path) -> Path:
    return require_file(Path(cfg.paths.checkpoint) if cfg.paths.checkpoint else out / "checkpoint.bin", "checkpoint")


def cmd_eval(cfg: C.RunConfig, out: Path) -> dict:
    path = _checkpoint_path(cfg, out)
    pdir = prepared_dir(cfg, out)
    test = D.read_episodes(require_file(pdir / "test.jsonl", "test episodes"), cfg.data.k)
    learner, theta, phi, meta = learner_from_checkpoint(path)
    rep = EV.evaluate(learner, theta, phi, test, dataset=cfg.name, seed=cfg.seed)
    counts = np.bincount([ep.heldout_level - 1 for ep in test], minlength=learner.k)[: learner.k]
    rows = [(learner.mode, cfg.name, cfg.seed, repr(rep.rmse), repr(rep.mae), rep.n_predictions)]
    for c in range(1, learner.k + 1):
        rmse, mae = EV.constant_baseline(counts, c)
        rows.append((f"constant_{c}", cfg.name, cfg.seed, repr(rmse), repr(mae), rep.n_predictions))
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "eval.csv", ("mode", "dataset", "seed", "rmse", "mae", "n"), rows)
    (out / "eval_report.json").write_text(json.dumps(rep.as_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    log.info("test RMSE %.4f MAE %.4f over %d users", rep.rmse, rep.mae, rep.n_predictions)
    return {"rmse": rep.rmse, "mae": rep.mae, "n": rep.n_predictions}


def cmd_sweep(cfg: C.RunConfig, out: Path) -> dict:
    pdir = prepared_dir(cfg, out)
    vocab = json.loads(require_file(pdir / "vocab.json", "vocabulary").read_text(encoding="utf-8"))
    seqs, labels = D.read_sequences(require_file(pdir / "sequences.jsonl", "sequences"))
    splits = tuple([s for s, lab in zip(seqs, labels) if lab == part] for part in ("train", "val", "test"))
    s = cfg.sweep
    learner = cfg.learner(int(vocab["size"]))
    out.mkdir(parents=True, exist_ok=True)
    rows = EV.sweep(
        s.protocol, list(s.grid), learner, splits, list(s.modes), list(s.seeds),
        cfg.data.n_support, cfg.data.n_query, cfg.name,
        on_row=lambda r: log.info("%s=%s %s seed %d: rmse %.4f", r.protocol, r.value, r.mode, r.seed, r.rmse),
    )
    EV.write_sweep(out / "sweep.csv", rows)
    return {"rows": len(rows)}


def cmd_case_study(cfg: C.RunConfig, out: Path) -> dict:
    paths = dict(cfg.eval.case_checkpoints)
    if not paths:
        paths = {cfg.train_config().mode: str(_checkpoint_path(cfg, out))}
    models, vocab_size = {}, None
    for label, p in paths.items():
        learner, theta, phi, meta = learner_from_checkpoint(require_file(Path(p), f"checkpoint for {label}"))
        models[label] = (learner, theta, phi)
        vocab_size = learner.rec.item_vocab if vocab_size is None else min(vocab_size, learner.rec.item_vocab)
    lo, hi = cfg.eval.case_length_range
    max_len = min(learner.rec.max_length for learner, _, _ in models.values())
    hi = min(hi, max_len)
    if lo > hi or vocab_size - 1 < hi:
        raise C.ConfigError("eval.case_length_range does not fit the model (max_length or item count)")
    users = {}
    for i, (name, prof) in enumerate(D.USER_TYPES.items()):
        profile = D.RatingProfile(name, prof.proportions, (lo, hi))
        users[name] = D.synthesize([profile], [1.0], cfg.eval.case_users_per_type, vocab_size - 1, cfg.seed + i)
    report = EV.case_study(models, users, cfg.eval.warmup, max_len)
    report.write(out)
    return {"means": report.means}


COMMANDS: dict[str, Callable[[C.RunConfig, Path], dict]] = {
    "prepare": cmd_prepare,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "case-study": cmd_case_study,
}


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metarec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"metarec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="override the BLAS thread count")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _write_manifest(out: Path, command: str, cfg: C.RunConfig, started: float, status: str, result=None, error=None):
    conf = hashed_config(cfg)
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": ckpt.config_hash(conf),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "version": version_string(),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "status": status,
        "result": result,
        "error": error,
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / f"manifest_{command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise C.ConfigError("--threads must be >= 1")
            cfg.threads = args.threads
    except C.ConfigError as exc:
        print(f"metarec: config error: {exc}", file=sys.stderr)
        return 2
    out = out_dir(cfg, args)
    started = time.perf_counter()
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=cfg.threads):
            result = COMMANDS[args.command](cfg, out)
    except (UsageError, C.ConfigError) as exc:
        print(f"metarec: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure: report, keep the manifest
        log.error("%s failed: %s", args.command, exc, exc_info=args.verbose)
        _write_manifest(out, args.command, cfg, started, "failed", error=f"{type(exc).__name__}: {exc}")
        return 1
    _write_manifest(out, args.command, cfg, started, "ok", result=result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
