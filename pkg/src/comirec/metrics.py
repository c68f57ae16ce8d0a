"""Per-user Recall, Hit Rate, NDCG and category Diversity at a cutoff N."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .aggregation import AggregationConfig, aggregate_interests
from .data import EvalCase
from .extract import SequenceBatch, extract
from .params import ModelConfig, Params
from .retrieval import Index


@dataclass(frozen=True)
class MetricsReport:
    N: int
    recall: float
    hit_rate: float
    ndcg: float
    diversity: float
    n_users: int
    lam: float = 0.0

    def rows(self) -> list[tuple[str, int, float, int]]:
        return [(name, self.N, getattr(self, name), self.n_users)
                for name in ("recall", "hit_rate", "ndcg", "diversity")]


def _hits(recommended: Sequence[int], held_out, N: int) -> list[bool]:
    if not held_out:
        raise ValueError("held_out must not be empty")
    return [item in held_out for item in list(recommended)[:N]]


def recall_at_n(recommended: Sequence[int], held_out, N: int) -> float:
    return sum(_hits(recommended, held_out, N)) / len(held_out)


def hit_rate_at_n(recommended: Sequence[int], held_out, N: int) -> int:
    return int(any(_hits(recommended, held_out, N)))


def idcg(n_relevant: int, N: int) -> float:
    total = 0.0
    for k in range(1, min(N, n_relevant) + 1):
        total += 1.0 / math.log2(k + 1)
    return total


def ndcg_at_n(recommended: Sequence[int], held_out, N: int) -> float:
    dcg = 0.0
    for k, hit in enumerate(_hits(recommended, held_out, N), start=1):
        if hit:
            dcg += 1.0 / math.log2(k + 1)
    return dcg / idcg(len(held_out), N)


def diversity_at_n(recommended: Sequence[int], categories, N: int) -> float:
    """Fraction of distinct-category pairs among the first N items.

    ``categories`` maps item id to category (dict or array). Lists shorter than
    N are scored over their own pair count.
    """
    if N < 2:
        raise ValueError("diversity needs N >= 2")
    cats = [categories[i] for i in list(recommended)[:N]]
    n = len(cats)
    if n < 2:
        return 0.0
    differ = 0
    for j in range(n):
        for k in range(j + 1, n):
            if cats[j] != cats[k]:
                differ += 1
    return differ / (n * (n - 1) / 2)


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


def summarize(recommendations: dict[int, Sequence[int]], cases: Sequence[EvalCase], categories,
              N: int, lam: float = 0.0) -> MetricsReport:
    """Average per-user metrics; ``recommendations`` is keyed by user id."""
    if not cases:
        raise ValueError("no evaluation cases")
    rec, hr, nd, div = [], [], [], []
    for case in sorted(cases, key=lambda c: c.user_id):
        items = recommendations[case.user_id]
        rec.append(recall_at_n(items, case.held_out, N))
        hr.append(hit_rate_at_n(items, case.held_out, N))
        nd.append(ndcg_at_n(items, case.held_out, N))
        div.append(diversity_at_n(items, categories, N) if N >= 2 else 0.0)
    return MetricsReport(N, _mean(rec), _mean(hr), _mean(nd), _mean(div), len(cases), lam)


def user_interests(params: Params, config: ModelConfig, cases: Sequence[EvalCase],
                   batch_size: int = 256) -> dict[int, np.ndarray]:
    out = {}
    for start in range(0, len(cases), batch_size):
        chunk = cases[start:start + batch_size]
        batch = SequenceBatch.from_histories([c.observed for c in chunk], config.n_max)
        V = extract(params, config, batch)
        for case, v in zip(chunk, V):
            out[case.user_id] = v
    return out


def evaluate_grid(params: Params, config: ModelConfig, index: Index, cases: Sequence[EvalCase],
                  cutoffs: Sequence[int], lambdas: Sequence[float], item_category: np.ndarray,
                  exclude_observed: bool = False) -> list[MetricsReport]:
    """One report per (N, lambda); interests are computed once per user."""
    if not cases:
        raise ValueError("no evaluation cases")
    interests = user_interests(params, config, cases)
    reports = []
    for N in cutoffs:
        for lam in lambdas:
            agg = AggregationConfig(lam=lam, N=N)
            recs = {}
            for case in cases:
                exclude = case.observed if exclude_observed else ()
                picked = aggregate_interests(index, interests[case.user_id], agg, item_category, exclude)
                recs[case.user_id] = [c.item_id for c in picked]
            reports.append(summarize(recs, cases, item_category, N, lam))
    return reports


def evaluate(params: Params, config: ModelConfig, index: Index, cases: Sequence[EvalCase],
             N: int, agg: AggregationConfig | None = None, item_category: np.ndarray | None = None,
             exclude_observed: bool = False) -> MetricsReport:
    lam = 0.0 if agg is None else agg.lam
    if item_category is None:
        item_category = np.zeros(len(index), dtype=np.int64)
    return evaluate_grid(params, config, index, cases, [N], [lam], item_category, exclude_observed)[0]


def write_reports_csv(reports: Iterable[MetricsReport], fh) -> None:
    fh.write("metric,N,value,n_users,lambda\n")
    for r in reports:
        for name, N, value, n_users in r.rows():
            fh.write(f"{name},{N},{value:.10g},{n_users},{r.lam:g}\n")


def format_table(reports: Iterable[MetricsReport]) -> str:
    lines = [f"{'N':>4} {'lambda':>7} {'recall':>9} {'hit_rate':>9} {'ndcg':>9} {'diversity':>9} {'users':>6}"]
    for r in reports:
        lines.append(f"{r.N:>4} {r.lam:>7.3f} {r.recall:>9.5f} {r.hit_rate:>9.5f} "
                     f"{r.ndcg:>9.5f} {r.diversity:>9.5f} {r.n_users:>6}")
    return "\n".join(lines)
