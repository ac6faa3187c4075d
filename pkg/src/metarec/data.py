"""Rating logs, cold-start preprocessing, episode slicing and synthetic users."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD = 0
CSV_HEADER = ("user_id", "item_id", "rating", "timestamp")


# ------------------------------------------------------------------------- types


@dataclass
class InteractionLog:
    rows: list[tuple[str, str, int, int]]
    n_rejected: int = 0
    rejected_lines: list[int] = field(default_factory=list)
    k: int = 5

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class UserSequence:
    user_index: int
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.ratings = np.asarray(self.ratings, dtype=np.int64)
        if self.items.shape != self.ratings.shape:
            raise ValueError("items and ratings must have equal length")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Vocabulary:
    item_to_index: dict[str, int]
    user_ids: list[str]

    @property
    def n_items(self) -> int:
        return len(self.item_to_index)

    @property
    def size(self) -> int:
        """Embedding rows needed, including the pad row."""
        return len(self.item_to_index) + 1


@dataclass
class SubSequence:
    item_ids: np.ndarray
    rating_levels: np.ndarray
    target_ratings: np.ndarray
    loss_mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.loss_mask.sum())


@dataclass
class Episode:
    support: list[SubSequence]
    query: list[SubSequence]
    user_index: int

    @property
    def heldout_level(self) -> int:
        return int(self.query[-1].rating_levels[-1])


@dataclass(frozen=True)
class RatingProfile:
    name: str
    proportions: tuple[float, ...]
    length_range: tuple[int, int] = (5, 10)

    def validate(self) -> None:
        p = np.asarray(self.proportions, dtype=np.float64)
        if p.ndim != 1 or len(p) < 2 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"profile {self.name}: proportions must be nonnegative and sum to 1")
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ValueError(f"profile {self.name}: invalid length range {self.length_range}")


def _pct(*values: float) -> tuple[float, ...]:
    return tuple(v / 100.0 for v in values)


# user types of the case study, proportions for levels 1..5
GENEROUS = RatingProfile("generous", _pct(5, 4, 4, 15, 72))
FAIR = RatingProfile("fair", _pct(28, 11, 18, 12, 31))
GRUMPY = RatingProfile("grumpy", _pct(58, 17, 10, 7, 8))
USER_TYPES = {p.name: p for p in (GENEROUS, FAIR, GRUMPY)}

# whole-dataset rating proportions for levels 1..5
DATASET_PROPORTIONS = {
    "grocery": _pct(3.3, 3.8, 6.7, 13.4, 72.8),
    "sports": _pct(2.7, 2.9, 7.0, 18.0, 69.4),
    "yelp": _pct(4.3, 7.8, 17.2, 35.2, 35.5),
    "movie": _pct(7.3, 8.8, 16.0, 31.7, 36.2),
}


# ------------------------------------------------------------------------ ingest


def load_log(path: str | Path, k: int = 5) -> InteractionLog:
    """Parse a ``user_id,item_id,rating,timestamp`` CSV.

    Rows with a bad rating (outside 1..k or not an integer) or an unparseable
    timestamp are skipped and counted. Raises if no valid rows remain.
    """
    path = Path(path)
    rows: list[tuple[str, str, int, int]] = []
    rejected: list[int] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            try:
                user, item, rating, ts = rec
                r = int(rating)
                t = int(float(ts))
            except ValueError:
                rejected.append(lineno)
                continue
            if not 1 <= r <= k or not user or not item:
                rejected.append(lineno)
                continue
            rows.append((user, item, r, t))
    if not rows:
        raise ValueError(f"{path}: no valid rows")
    if rejected:
        log.warning("%s: rejected %d malformed rows", path, len(rejected))
    return InteractionLog(rows, len(rejected), rejected, k)


def preprocess(
    interactions: InteractionLog,
    min_item_ratings: int = 50,
    max_length: int = 30,
    min_length: int = 5,
) -> tuple[list[UserSequence], Vocabulary]:
    if not interactions.rows:
        raise ValueError("empty interaction log")
    counts: dict[str, int] = {}
    for _, item, _, _ in interactions.rows:
        counts[item] = counts.get(item, 0) + 1

    by_user: dict[str, list[tuple[int, int, str, int]]] = {}
    for pos, (user, item, rating, ts) in enumerate(interactions.rows):
        if counts[item] < min_item_ratings:
            continue
        by_user.setdefault(user, []).append((ts, pos, item, rating))

    kept: list[tuple[str, list[tuple[str, int]]]] = []
    for user, recs in by_user.items():
        recs.sort(key=lambda r: (r[0], r[1]))  # ties keep file order
        recs = recs[-max_length:]
        if len(recs) >= min_length:
            kept.append((user, [(item, rating) for _, _, item, rating in recs]))
    if not kept:
        raise ValueError("preprocessing removed every user")

    item_to_index: dict[str, int] = {}
    seqs = []
    for uidx, (user, recs) in enumerate(kept):
        items = []
        for item, _ in recs:
            if item not in item_to_index:
                item_to_index[item] = len(item_to_index) + 1
            items.append(item_to_index[item])
        seqs.append(UserSequence(uidx, items, [r for _, r in recs]))
    return seqs, Vocabulary(item_to_index, [u for u, _ in kept])


def balance_score(class_counts: Sequence[float]) -> float:
    """Normalized Shannon entropy of a class histogram; 1 = uniform, 0 = one class."""
    c = np.asarray(class_counts, dtype=np.float64)
    if c.ndim != 1 or len(c) < 2:
        raise ValueError("need at least two classes")
    if (c < 0).any():
        raise ValueError("counts must be nonnegative")
    n = c.sum()
    if n <= 0:
        raise ValueError("total count must be positive")
    p = c[c > 0] / n
    h = float(-(p * np.log(p)).sum())
    return min(1.0, max(0.0, h / math.log(len(c))))


def rating_counts(seqs: Iterable[UserSequence], k: int = 5) -> np.ndarray:
    counts = np.zeros(k, dtype=np.int64)
    for s in seqs:
        counts += np.bincount(s.ratings - 1, minlength=k)[:k]
    return counts


def dataset_stats(seqs: Sequence[UserSequence], vocab: Vocabulary | None = None, k: int = 5) -> dict:
    counts = rating_counts(seqs, k)
    n_items = vocab.n_items if vocab is not None else len({int(i) for s in seqs for i in s.items})
    return {
        "users": len(seqs),
        "items": n_items,
        "ratings": int(counts.sum()),
        "average_length": float(np.mean([len(s) for s in seqs])),
        "balance_score": balance_score(counts),
        "rating_proportions": (counts / counts.sum()).tolist(),
    }


# ---------------------------------------------------------------------- episodes


def normalize_rating(level, k: int = 5):
    return (np.asarray(level, dtype=np.float64) - 1.0) / (k - 1)


def denormalize_rating(value, k: int = 5):
    return np.asarray(value, dtype=np.float64) * (k - 1) + 1.0


def slice_candidates(length: int) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """All support prefixes and query suffixes as ``(start, stop)`` spans.

    Support: prefixes of the first ``length - 1`` positions, lengths 2..L-1.
    Query: suffixes ending at the last position, lengths 2..L. Both in
    increasing length.
    """
    support = [(0, n) for n in range(2, length)]
    query = [(length - n, length) for n in range(2, length + 1)]
    return support, query


def make_subsequence(items, levels, max_length: int, k: int = 5) -> SubSequence:
    n = len(items)
    if n > max_length:
        raise ValueError(f"sub-sequence of length {n} exceeds max_length {max_length}")
    ids = np.zeros(max_length, dtype=np.int64)
    lv = np.zeros(max_length, dtype=np.int64)
    mask = np.zeros(max_length, dtype=np.float64)
    ids[max_length - n:] = items
    lv[max_length - n:] = levels
    mask[max_length - n:] = 1.0
    target = np.where(mask > 0, normalize_rating(np.maximum(lv, 1), k), 0.0)
    return SubSequence(ids, lv, target, mask)


def build_episode(
    seq: UserSequence,
    n_support: int = 25,
    n_query: int = 3,
    max_length: int | None = None,
    k: int = 5,
) -> Episode:
    """Slice one user's sequence into support prefixes and query suffixes.

    The last interaction is held out. The ``n_support`` longest prefixes and the
    ``n_query`` shortest suffixes are kept; all are left-padded.
    """
    L = len(seq)
    if L < 3:
        raise ValueError(f"sequence of length {L} is too short for an episode (need 3)")
    max_length = L if max_length is None else max_length
    sup_spans, qry_spans = slice_candidates(L)
    sup_spans = sup_spans[-n_support:] if n_support > 0 else []
    qry_spans = qry_spans[:n_query]
    it, rt = seq.items, seq.ratings
    support = [make_subsequence(it[a:b], rt[a:b], max_length, k) for a, b in sup_spans]
    query = [make_subsequence(it[a:b], rt[a:b], max_length, k) for a, b in qry_spans]
    return Episode(support, query, seq.user_index)


@dataclass
class SubBatch:
    """Stacked sub-sequences, shape ``(E, N, T)`` per array."""

    items: np.ndarray
    levels: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    counts: np.ndarray  # real sub-sequences per episode, shape (E,)


@dataclass
class EpisodeBatch:
    support: SubBatch
    query: SubBatch
    user_index: np.ndarray

    @property
    def size(self) -> int:
        return len(self.user_index)


def _stack_subs(groups: Sequence[Sequence[SubSequence]]) -> SubBatch:
    E = len(groups)
    N = max(1, max(len(g) for g in groups))
    T = max(len(g[0].loss_mask) for g in groups if g) if any(groups) else 1
    items = np.zeros((E, N, T), dtype=np.int64)
    levels = np.zeros((E, N, T), dtype=np.int64)
    targets = np.zeros((E, N, T))
    mask = np.zeros((E, N, T))
    for e, g in enumerate(groups):
        for s, sub in enumerate(g):
            n = len(sub.loss_mask)
            items[e, s, T - n:] = sub.item_ids
            levels[e, s, T - n:] = sub.rating_levels
            targets[e, s, T - n:] = sub.target_ratings
            mask[e, s, T - n:] = sub.loss_mask
    # drop leading columns that are padding everywhere
    real = mask.reshape(-1, T).any(axis=0)
    start = int(np.argmax(real)) if real.any() else T - 1
    counts = np.array([len(g) for g in groups], dtype=np.int64)
    return SubBatch(items[..., start:], levels[..., start:], targets[..., start:], mask[..., start:], counts)


def collate(episodes: Sequence[Episode]) -> EpisodeBatch:
    if not episodes:
        raise ValueError("cannot collate an empty episode list")
    return EpisodeBatch(
        _stack_subs([ep.support for ep in episodes]),
        _stack_subs([ep.query for ep in episodes]),
        np.array([ep.user_index for ep in episodes], dtype=np.int64),
    )


# --------------------------------------------------------------------- synthesis


def synthesize(
    profiles: Sequence[RatingProfile],
    weights: Sequence[float],
    n_users: int,
    n_items: int,
    seed: int,
) -> list[UserSequence]:
    """Draw synthetic users: profile, length, distinct items, i.i.d. levels."""
    if len(profiles) != len(weights) or not profiles:
        raise ValueError("need one weight per profile")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("mixture weights must be nonnegative and sum to 1")
    if n_items < 10:
        raise ValueError("n_items must be at least 10")
    k = len(profiles[0].proportions)
    for p in profiles:
        p.validate()
        if len(p.proportions) != k:
            raise ValueError("all profiles need the same number of levels")
        if p.length_range[1] > n_items:
            raise ValueError(f"profile {p.name}: length exceeds item count")
    rng = np.random.default_rng(seed)
    users = []
    for u in range(n_users):
        p = profiles[int(rng.choice(len(profiles), p=w))]
        lo, hi = p.length_range
        L = int(rng.integers(lo, hi + 1))
        items = rng.choice(n_items, size=L, replace=False) + 1
        levels = rng.choice(k, size=L, p=np.asarray(p.proportions)) + 1
        users.append(UserSequence(u, items, levels))
    return users


def write_log(path: str | Path, seqs: Sequence[UserSequence]) -> None:
    """Write sequences in the interaction CSV format (timestamps are positions)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(CSV_HEADER)
        for s in seqs:
            for t, (item, r) in enumerate(zip(s.items, s.ratings)):
                w.writerow((f"u{s.user_index}", f"i{int(item)}", int(r), t))


def length_sweep_slice(seqs: Sequence[UserSequence], T: int, seed: int, floor: int = 5) -> list[UserSequence]:
    """Keep each user's most recent ``l`` interactions, ``l ~ U[floor, min(T, L)]``."""
    if T < floor:
        raise ValueError(f"T must be at least {floor}")
    rng = np.random.default_rng(seed)
    out = []
    for s in seqs:
        L = len(s)
        hi = min(T, L)
        n = int(rng.integers(floor, hi + 1)) if hi >= floor else L
        out.append(UserSequence(s.user_index, s.items[L - n:], s.ratings[L - n:]))
    return out


def split_users(n_users: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Partition user indices into disjoint train/val/test index arrays."""
    f = np.asarray(fractions, dtype=np.float64)
    if len(f) != 3 or (f < 0).any() or abs(f.sum() - 1.0) > 1e-9:
        raise ValueError("split fractions must be three nonnegative values summing to 1")
    perm = np.random.default_rng(seed).permutation(n_users)
    n_train = int(round(f[0] * n_users))
    n_val = int(round(f[1] * n_users))
    return [np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])]


# ------------------------------------------------------------------ serialization


def _sub_json(subs: Sequence[SubSequence]) -> dict:
    return {
        "items": [s.item_ids.tolist() for s in subs],
        "levels": [s.rating_levels.tolist() for s in subs],
        "mask": [s.loss_mask.astype(np.int64).tolist() for s in subs],
    }


def episode_to_json(ep: Episode) -> str:
    rec = {"user": int(ep.user_index), "support": _sub_json(ep.support), "query": _sub_json(ep.query)}
    return json.dumps(rec, separators=(",", ":"))


def _sub_from(d: dict, k: int) -> list[SubSequence]:
    out = []
    for items, levels, mask in zip(d["items"], d["levels"], d["mask"]):
        m = np.asarray(mask, dtype=np.float64)
        lv = np.asarray(levels, dtype=np.int64)
        target = np.where(m > 0, normalize_rating(np.maximum(lv, 1), k), 0.0)
        out.append(SubSequence(np.asarray(items, dtype=np.int64), lv, target, m))
    return out


def episode_from_json(line: str, k: int = 5) -> Episode:
    d = json.loads(line)
    return Episode(_sub_from(d["support"], k), _sub_from(d["query"], k), int(d["user"]))


def write_episodes(path: str | Path, episodes: Iterable[Episode]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ep in episodes:
            fh.write(episode_to_json(ep) + "\n")


def read_episodes(path: str | Path, k: int = 5) -> list[Episode]:
    with Path(path).open(encoding="utf-8") as fh:
        return [episode_from_json(line, k) for line in fh if line.strip()]


def write_sequences(path: str | Path, seqs: Sequence[UserSequence], split: Sequence[str]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s, part in zip(seqs, split):
            rec = {"user": s.user_index, "split": part, "items": s.items.tolist(), "ratings": s.ratings.tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_sequences(path: str | Path) -> tuple[list[UserSequence], list[str]]:
    seqs, split = [], []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            seqs.append(UserSequence(d["user"], d["items"], d["ratings"]))
            split.append(d["split"])
    return seqs, split
