"""Merging per-interest candidates into one list, trading accuracy for category diversity.

The greedy step scores a candidate ``i`` against the current selection ``S`` as

    f(i) + lam * #{k in S : category(k) != category(i)}

which is what the greedy loop adds per pick. ``value_q`` sums ``g`` over ordered
pairs, so each new pick raises it by ``f(i) + 2 * lam * #{...}``; the greedy order
for ``lam`` equals greedy on ``value_q`` with ``lam / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .extract import SequenceBatch, extract
from .params import ModelConfig, Params
from .retrieval import Index, retrieve_per_interest


@dataclass(frozen=True)
class Candidate:
    item_id: int
    category_id: int
    f_score: float


@dataclass(frozen=True)
class AggregationConfig:
    lam: float = 0.0
    N: int = 50

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")


def f_score(interests: np.ndarray, e_i: np.ndarray) -> float:
    """Best inner product between an item and any of the K interest rows."""
    return float(np.max(np.asarray(interests) @ np.asarray(e_i)))


def g(i: Candidate, j: Candidate) -> int:
    return int(i.category_id != j.category_id)


def value_q(selected: Iterable[Candidate], lam: float) -> float:
    selected = list(selected)
    total = sum(c.f_score for c in selected)
    cats = [c.category_id for c in selected]
    pairs = sum(1 for a in cats for b in cats if a != b)
    return total + lam * pairs


def dedup(candidates: Iterable[Candidate]) -> list[Candidate]:
    """Keep one candidate per item, the one with the highest f_score."""
    best: dict[int, Candidate] = {}
    for c in candidates:
        if c.item_id not in best or c.f_score > best[c.item_id].f_score:
            best[c.item_id] = c
    return list(best.values())


def greedy_aggregate(candidates: Sequence[Candidate], config: AggregationConfig) -> list[Candidate]:
    """Pick ``config.N`` candidates in order; returns fewer if the pool is smaller.

    Ties on the greedy gain go to the higher f_score, then the lower item id.
    """
    if not candidates:
        raise ValueError("no candidates to aggregate")
    pool = dedup(candidates)
    f = np.array([c.f_score for c in pool], dtype=np.float64)
    ids = np.array([c.item_id for c in pool], dtype=np.int64)
    _, cat = np.unique([c.category_id for c in pool], return_inverse=True)
    in_cat = np.zeros(cat.max() + 1, dtype=np.int64)
    taken = np.zeros(len(pool), dtype=bool)
    out = []
    for n_sel in range(min(config.N, len(pool))):
        gain = f + config.lam * (n_sel - in_cat[cat])
        free = np.flatnonzero(~taken)
        j = free[np.lexsort((ids[free], -f[free], -gain[free]))[0]]
        taken[j] = True
        in_cat[cat[j]] += 1
        out.append(pool[j])
    return out


def sentinel_category(item_id: int) -> int:
    """Unique stand-in category for items without one; never equals a real id."""
    return -int(item_id) - 1


def candidates_from_scores(scores: np.ndarray, retrieved: Iterable[int],
                           item_category: np.ndarray | None) -> list[Candidate]:
    """Candidates for retrieved items with f = max over interests (scores: (K, n_items))."""
    out = []
    best = scores.max(axis=0)
    for i in sorted(set(int(x) for x in retrieved)):
        cat = -1 if item_category is None else int(item_category[i])
        out.append(Candidate(i, cat if cat >= 0 else sentinel_category(i), float(best[i])))
    return out


def aggregate_interests(index: Index, interests: np.ndarray, agg: AggregationConfig,
                        item_category: np.ndarray | None = None,
                        exclude: Iterable[int] = ()) -> list[Candidate]:
    """Retrieve N per interest, merge the union and run the greedy selection."""
    lists = retrieve_per_interest(index, interests, agg.N, exclude)
    scores = index.scores(interests)
    retrieved = np.concatenate([t.items for t in lists])
    return greedy_aggregate(candidates_from_scores(scores, retrieved, item_category), agg)


def recommend(params: Params, config: ModelConfig, index: Index, observed: Sequence[int],
              agg: AggregationConfig, item_category: np.ndarray | None = None,
              exclude: Iterable[int] = ()) -> list[Candidate]:
    batch = SequenceBatch.from_histories([observed], config.n_max)
    interests = extract(params, config, batch)[0]
    return aggregate_interests(index, interests, agg, item_category, exclude)
