"""Behavior logs: loading, filtering, user splits, training samples and eval cases."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MIN_COUNT = 5
FORMATS = ("amazon", "taobao", "generic")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    category_id: int
    timestamp: int


@dataclass
class UserSequence:
    user_id: int
    items: np.ndarray
    categories: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class InteractionLog:
    """Time-sorted per-user sequences over dense 0-based ids.

    ``*_vocab`` hold the raw id string for each dense id, so ``item_vocab[3]``
    is the raw identifier of dense item 3.
    """

    sequences: dict[int, UserSequence]
    item_category: np.ndarray
    user_vocab: list[str] = field(default_factory=list)
    item_vocab: list[str] = field(default_factory=list)
    category_vocab: list[str] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.item_category)

    @property
    def users(self) -> list[int]:
        return sorted(self.sequences)

    def n_interactions(self) -> int:
        return sum(len(s) for s in self.sequences.values())


@dataclass(frozen=True)
class DatasetSplit:
    train_users: frozenset
    valid_users: frozenset
    test_users: frozenset


@dataclass
class TrainingSample:
    user_id: int
    history: list[int]
    target: int


@dataclass
class EvalCase:
    user_id: int
    observed: list[int]
    held_out: frozenset


# -- loading -----------------------------------------------------------------

def _parse_rows(path: Path, fmt: str) -> Iterator[tuple[str, str, str, int]]:
    """Yield ``(user, item, category, timestamp)`` raw rows in file order."""
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    with path.open("r", encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            row = [c.strip() for c in row]
            try:
                if fmt == "generic":
                    if len(row) != 4:
                        raise ValueError(f"expected 4 columns, got {len(row)}")
                    user, item, cate, ts = row
                elif fmt == "taobao":
                    if len(row) != 5:
                        raise ValueError(f"expected 5 columns, got {len(row)}")
                    user, item, cate, behavior, ts = row
                    if behavior != "pv":
                        continue
                else:
                    if len(row) not in (3, 4):
                        raise ValueError(f"expected 3 or 4 columns, got {len(row)}")
                    user, item, ts = row[:3]
                    cate = row[3] if len(row) == 4 and row[3] else "0"
                if not user or not item:
                    raise ValueError("empty user or item id")
                yield user, item, cate, int(float(ts))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed row {row!r}: {exc}") from None


def _raw_order(raw: Iterable[str]) -> list[str]:
    values = set(raw)
    try:
        return sorted(values, key=int)
    except ValueError:
        return sorted(values)


def filter_min_count(rows: Sequence[tuple], min_count: int = MIN_COUNT) -> list[tuple]:
    """Drop users and items with fewer than ``min_count`` rows until stable."""
    rows = list(rows)
    while True:
        users: dict[str, int] = {}
        items: dict[str, int] = {}
        for r in rows:
            users[r[0]] = users.get(r[0], 0) + 1
            items[r[1]] = items.get(r[1], 0) + 1
        kept = [r for r in rows if users[r[0]] >= min_count and items[r[1]] >= min_count]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_log(rows: Sequence[tuple[str, str, str, int]], min_count: int = MIN_COUNT) -> InteractionLog:
    """Filter raw rows, remap ids densely and group per user in time order."""
    rows = filter_min_count(rows, min_count)
    if not rows:
        raise DataError("no interactions left after filtering")

    user_vocab = _raw_order(r[0] for r in rows)
    item_vocab = _raw_order(r[1] for r in rows)
    category_vocab = _raw_order(r[2] for r in rows)
    uid = {u: i for i, u in enumerate(user_vocab)}
    iid = {u: i for i, u in enumerate(item_vocab)}
    cid = {u: i for i, u in enumerate(category_vocab)}

    item_category = np.full(len(item_vocab), -1, dtype=np.int64)
    per_user: dict[int, list[tuple[int, int, int, int]]] = {}
    for order, (u, it, c, ts) in enumerate(rows):
        i = iid[it]
        if item_category[i] < 0:
            item_category[i] = cid[c]
        per_user.setdefault(uid[u], []).append((ts, order, i, item_category[i]))

    sequences = {}
    for u, events in per_user.items():
        events.sort()  # timestamp, then input order
        sequences[u] = UserSequence(
            user_id=u,
            items=np.array([e[2] for e in events], dtype=np.int64),
            categories=np.array([e[3] for e in events], dtype=np.int64),
        )
    return InteractionLog(sequences, item_category, user_vocab, item_vocab, category_vocab)


def load_log(path: str | Path, fmt: str = "generic", min_count: int = MIN_COUNT) -> InteractionLog:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such log file: {path}")
    return build_log(list(_parse_rows(path, fmt)), min_count)


def write_vocab(vocab: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for dense, raw in enumerate(vocab):
            fh.write(f"{raw},{dense}\n")


def read_vocab(path: str | Path) -> list[str]:
    out: dict[int, str] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                raw, dense = line.rstrip("\n").rsplit(",", 1)
                out[int(dense)] = raw
    return [out[i] for i in range(len(out))]


def write_log_csv(log: InteractionLog, path: str | Path) -> None:
    """Write ``log`` as generic CSV using raw ids; timestamps are positions."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for u in log.users:
            seq = log.sequences[u]
            for t, (i, c) in enumerate(zip(seq.items, seq.categories)):
                fh.write(f"{log.user_vocab[u]},{log.item_vocab[i]},{log.category_vocab[c]},{t}\n")


# -- splits and samples ------------------------------------------------------

def split_users(log: InteractionLog, seed: int) -> DatasetSplit:
    users = np.array(log.users, dtype=np.int64)
    if len(users) == 0:
        raise DataError("cannot split an empty log")
    perm = np.random.default_rng(seed).permutation(users)
    n = len(perm)
    n_train = int(round(n * 0.8))
    n_valid = int(round(n * 0.1))
    return DatasetSplit(
        frozenset(perm[:n_train].tolist()),
        frozenset(perm[n_train:n_train + n_valid].tolist()),
        frozenset(perm[n_train + n_valid:].tolist()),
    )


def sample_at(items: Sequence[int], k: int, n_max: int) -> tuple[list[int], int]:
    """History/target pair predicting position ``k`` from at most ``n_max`` prior items."""
    if not 1 <= k < len(items):
        raise ValueError(f"target position {k} outside [1, {len(items) - 1}]")
    window = items[max(0, k - n_max):k + 1]
    window = window.tolist() if isinstance(window, np.ndarray) else list(window)
    return window[:-1], window[-1]


def iter_training_samples(
    log: InteractionLog,
    split: DatasetSplit,
    n_max: int,
    batch_size: int,
    seed: int,
) -> Iterator[list[TrainingSample]]:
    """Infinite stream of batches; users drawn uniformly with replacement."""
    users = np.array(sorted(split.train_users), dtype=np.int64)
    if len(users) == 0:
        raise DataError("no training users")
    rng = np.random.default_rng(seed)
    while True:
        batch = []
        for u in rng.choice(users, size=batch_size):
            items = log.sequences[int(u)].items
            assert len(items) >= 2, f"user {u} has fewer than 2 interactions"
            k = int(rng.integers(1, len(items)))
            history, target = sample_at(items, k, n_max)
            batch.append(TrainingSample(int(u), history, target))
        yield batch


def make_eval_cases(log: InteractionLog, users: Iterable[int], n_max: int) -> list[EvalCase]:
    cases = []
    for u in sorted(users):
        items = log.sequences[u].items
        cut = int(np.floor(0.8 * len(items)))
        assert 1 <= cut < len(items), f"user {u}: sequence too short to hold out"
        observed = [int(x) for x in items[:cut][-n_max:]]
        cases.append(EvalCase(u, observed, frozenset(int(x) for x in items[cut:])))
    return cases


def pad_batch(histories: Sequence[Sequence[int]], n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-aligned id matrix and mask; padding uses id 0."""
    ids = np.zeros((len(histories), n_max), dtype=np.int64)
    mask = np.zeros((len(histories), n_max), dtype=bool)
    for b, h in enumerate(histories):
        h = list(h)[-n_max:]
        if not h:
            raise ValueError(f"row {b} has an empty history")
        ids[b, :len(h)] = h
        mask[b, :len(h)] = True
    return ids, mask


# -- synthetic data ----------------------------------------------------------

def generate_synthetic(
    n_users: int,
    n_items: int,
    n_clusters: int,
    interests_per_user_range: tuple[int, int],
    seq_len_range: tuple[int, int],
    seed: int,
    user_clusters: dict[int, Sequence[int]] | None = None,
) -> InteractionLog:
    """Planted-interest log: items split evenly into clusters (cluster = category).

    Each user owns ``m`` clusters drawn from ``interests_per_user_range`` (inclusive);
    every event picks one of the user's clusters uniformly, then an item uniformly
    inside it. ``user_clusters`` overrides the drawn cluster set for given users.
    """
    lo_m, hi_m = interests_per_user_range
    lo_len, hi_len = seq_len_range
    if n_clusters < 2:
        raise ValueError("need at least 2 clusters")
    if n_items < n_clusters:
        raise ValueError("fewer items than clusters")
    if not 1 <= lo_m <= hi_m <= n_clusters:
        raise ValueError(f"invalid interests_per_user_range {interests_per_user_range}")
    if not 2 <= lo_len <= hi_len:
        raise ValueError(f"invalid seq_len_range {seq_len_range}")
    if n_users < 1:
        raise ValueError("need at least one user")

    rng = np.random.default_rng(seed)
    clusters = np.array_split(np.arange(n_items), n_clusters)
    rows = []
    for u in range(n_users):
        m = int(rng.integers(lo_m, hi_m + 1))
        owned = rng.choice(n_clusters, size=m, replace=False)
        if user_clusters and u in user_clusters:
            owned = np.asarray(user_clusters[u])
        length = int(rng.integers(lo_len, hi_len + 1))
        picks = owned[rng.integers(0, len(owned), size=length)]
        for t, c in enumerate(picks):
            item = int(rng.choice(clusters[c]))
            rows.append((str(u), str(item), str(int(c)), t))
    return build_log(rows, min_count=1)
