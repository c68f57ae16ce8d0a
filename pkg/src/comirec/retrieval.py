"""Exact maximum inner-product search over the item embedding table."""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np


class TopN(NamedTuple):
    items: np.ndarray  # int64, best first
    scores: np.ndarray
    short: bool  # fewer than N eligible items existed

    def pairs(self) -> list[tuple[int, float]]:
        return [(int(i), float(s)) for i, s in zip(self.items, self.scores)]


class Index:
    """Immutable snapshot of an embedding table."""

    def __init__(self, item_emb: np.ndarray):
        emb = np.array(item_emb, copy=True)
        if emb.ndim != 2 or emb.shape[0] == 0:
            raise ValueError("cannot index an empty embedding table")
        emb.setflags(write=False)
        self._emb = emb

    @property
    def embeddings(self) -> np.ndarray:
        return self._emb

    def __len__(self) -> int:
        return self._emb.shape[0]

    def scores(self, queries: np.ndarray) -> np.ndarray:
        return np.asarray(queries) @ self._emb.T


def build_index(item_emb: np.ndarray) -> Index:
    return Index(item_emb)


def select_top(scores: np.ndarray, N: int, exclude: Iterable[int] = ()) -> TopN:
    """Top-N of a score vector: score descending, then item id ascending."""
    if N < 1:
        raise ValueError("N must be >= 1")
    scores = np.asarray(scores)
    eligible = np.ones(len(scores), dtype=bool)
    ex = np.fromiter((int(i) for i in exclude), dtype=np.int64)
    if ex.size:
        eligible[ex[(ex >= 0) & (ex < len(scores))]] = False
    cand = np.flatnonzero(eligible)
    short = len(cand) < N
    if len(cand) > N:
        vals = scores[cand]
        # everything tied with the N-th best value must stay in play
        kth = np.partition(vals, len(vals) - N)[len(vals) - N]
        cand = cand[vals >= kth]
    order = np.lexsort((cand, -scores[cand]))[:N]
    picked = cand[order]
    return TopN(picked.astype(np.int64), scores[picked], short)


def topn(index: Index, query: np.ndarray, N: int, exclude: Iterable[int] = ()) -> TopN:
    return select_top(index.scores(query), N, exclude)


def retrieve_per_interest(index: Index, interests: np.ndarray, N: int,
                          exclude: Iterable[int] = ()) -> list[TopN]:
    """One top-N list per interest row of ``interests`` (shape (K, d))."""
    exclude = list(exclude)
    all_scores = index.scores(interests)
    return [select_top(row, N, exclude) for row in all_scores]


def write_topn_csv(rows: Iterable[tuple[int, list[TopN]]], fh) -> None:
    """CSV ``user_id,interest,rank,item_id,score`` for ``(user, per-interest lists)`` pairs."""
    fh.write("user_id,interest,rank,item_id,score\n")
    for user, lists in rows:
        for k, hits in enumerate(lists):
            for rank, (item, score) in enumerate(hits.pairs(), start=1):
                fh.write(f"{user},{k},{rank},{item},{score:.6g}\n")
