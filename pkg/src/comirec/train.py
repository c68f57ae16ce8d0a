"""Target-aware interest selection, sampled-softmax loss and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import extract as ex
from .data import DatasetSplit, InteractionLog, TrainingSample, iter_training_samples, make_eval_cases
from .metrics import evaluate
from .params import AdamState, ModelConfig, Params, adam_step, init_parameters
from .retrieval import build_index

log = logging.getLogger(__name__)


@dataclass
class TrainStepReport:
    loss: float
    grad_norm: float
    step: int


@dataclass
class EarlyStopState:
    best_metric: float = -math.inf
    best_step: int = 0
    patience_left: int = 20

    def update(self, metric: float, step: int, patience: int) -> bool:
        """Record an evaluation; returns True when it improved on the best."""
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_step = step
            self.patience_left = patience
            return True
        self.patience_left -= 1
        return False


def select_interest(interests: np.ndarray, e_i: np.ndarray) -> tuple[int, np.ndarray]:
    """Interest row with the largest inner product with ``e_i`` (first on ties)."""
    k = int(np.argmax(interests @ e_i))
    return k, interests[k]


def _log_softmax_first(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z[..., 0] - np.log(np.exp(z).sum(axis=-1))


def sampled_softmax_loss(v_u: np.ndarray, target: int, negatives: Sequence[int],
                         item_emb: np.ndarray) -> float:
    """-log softmax probability of ``target`` among ``{target} + negatives``."""
    negatives = [int(n) for n in negatives]
    if len(set(negatives)) != len(negatives):
        raise ValueError("negatives must be distinct")
    if int(target) in negatives:
        raise ValueError(f"target {target} also drawn as a negative")
    cands = np.array([int(target)] + negatives)
    return float(-_log_softmax_first(item_emb[cands] @ v_u))


def sample_negatives(rng: np.random.Generator, n_items: int, n_negatives: int,
                     targets: Sequence[int], histories: Sequence[Sequence[int]] | None = None) -> np.ndarray:
    """One uniform draw shared by the batch; rows hitting their own target are re-drawn.

    With ``histories`` given, each row also avoids that user's history items.
    Returns a (B, n_negatives) matrix with distinct entries per row.
    """
    if n_items - 1 < n_negatives:
        raise ValueError(f"cannot draw {n_negatives} negatives from {n_items} items")
    shared = rng.choice(n_items, size=n_negatives, replace=False)
    out = np.tile(shared, (len(targets), 1))
    for b, t in enumerate(targets):
        banned = {int(t)}
        if histories is not None:
            banned.update(int(x) for x in histories[b])
        row = out[b]
        clash = [j for j, x in enumerate(row) if int(x) in banned]
        if not clash:
            continue
        if n_items - len(banned) < n_negatives:
            raise ValueError(f"row {b}: too few items left to draw {n_negatives} negatives")
        used = set(int(x) for x in row) | banned
        for j in clash:
            while True:
                x = int(rng.integers(n_items))
                if x not in used:
                    break
            used.add(x)
            row[j] = x
    return out


def loss_and_grads(params: Params, config: ModelConfig, batch: ex.SequenceBatch,
                   targets: np.ndarray, negatives: np.ndarray) -> tuple[float, Params, np.ndarray]:
    """Mean sampled-softmax loss over the batch and its exact gradients.

    The selected interest index is a constant of the backward pass. Returns
    ``(loss, grads, selected)``.
    """
    E = params["item_emb"]
    V, cache = ex.forward(params, config, batch)
    targets = np.asarray(targets, dtype=np.int64)
    B = len(targets)
    e_t = E[targets]
    selected = np.argmax(np.einsum("bkd,bd->bk", V, e_t), axis=1)
    v_u = V[np.arange(B), selected]
    cands = np.concatenate([targets[:, None], np.asarray(negatives, dtype=np.int64)], axis=1)
    e_c = E[cands]  # (B, 1+n, d)
    logits = np.einsum("bcd,bd->bc", e_c, v_u)
    loss = float(-np.mean(_log_softmax_first(logits)))

    p = ex.routing_softmax(logits, axis=1)
    p[:, 0] -= 1.0
    dlogits = p / B
    dv_u = np.einsum("bc,bcd->bd", dlogits, e_c)
    dV = np.zeros_like(V)
    dV[np.arange(B), selected] = dv_u
    grads = ex.backward(params, config, cache, dV)
    np.add.at(grads["item_emb"], cands.ravel(), (dlogits[..., None] * v_u[:, None, :]).reshape(-1, E.shape[1]))
    for name in params:
        grads.setdefault(name, np.zeros_like(params[name]))
    return loss, grads, selected


def train_step(params: Params, adam: AdamState, samples: Sequence[TrainingSample],
               config: ModelConfig, rng: np.random.Generator) -> TrainStepReport:
    if not samples:
        raise ValueError("empty training batch")
    batch = ex.SequenceBatch.from_histories([s.history for s in samples], config.n_max)
    targets = np.array([s.target for s in samples], dtype=np.int64)
    histories = [s.history for s in samples] if config.exclude_history_negatives else None
    negatives = sample_negatives(rng, config.n_items, config.n_negatives, targets, histories)
    loss, grads, _ = loss_and_grads(params, config, batch, targets, negatives)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at step {adam.t + 1}")
    grad_norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    adam_step(params, grads, adam, config.lr)
    return TrainStepReport(loss, grad_norm, adam.t)


@dataclass
class TrainResult:
    params: Params
    adam: AdamState
    early_stop: EarlyStopState
    step: int
    history: list[tuple[int, float, float]] = field(default_factory=list)


EvalCallback = Callable[[int, float, float], None]


def _copy(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def train(log_: InteractionLog, split: DatasetSplit, config: ModelConfig, *,
          max_iters: int = 1_000_000, eval_interval: int = 1000, patience: int = 20,
          callbacks: Sequence[EvalCallback] = (), params: Params | None = None,
          adam: AdamState | None = None, start_step: int = 0, valid_cutoff: int = 50) -> TrainResult:
    """Run the training loop with validation-recall early stopping.

    Validation Recall@``valid_cutoff`` (no diversity term) is computed every
    ``eval_interval`` steps and at the last step; returns the parameters from
    the best evaluation.
    """
    params = init_parameters(config) if params is None else params
    adam = AdamState.zeros_like(params) if adam is None else adam
    stop = EarlyStopState(patience_left=patience)
    result = TrainResult(params, adam, stop, start_step)
    if max_iters <= start_step:
        return result

    valid_cases = make_eval_cases(log_, split.valid_users, config.n_max)
    samples = iter_training_samples(log_, split, config.n_max, config.batch_size,
                                    seed=config.seed + 7919 * start_step)
    rng = np.random.default_rng([config.seed, 1, start_step])
    best = (_copy(params), AdamState(_copy(adam.m), _copy(adam.v), adam.t), start_step)
    losses: list[float] = []
    step = start_step
    while step < max_iters:
        report = train_step(params, adam, next(samples), config, rng)
        step += 1
        losses.append(report.loss)
        if step % eval_interval and step != max_iters:
            continue
        recall = evaluate(params, config, build_index(params["item_emb"]), valid_cases, valid_cutoff).recall
        mean_loss = float(np.mean(losses))
        losses.clear()
        result.history.append((step, mean_loss, recall))
        log.info("step %d loss %.5f valid recall@%d %.5f", step, mean_loss, valid_cutoff, recall)
        for cb in callbacks:
            cb(step, mean_loss, recall)
        if stop.update(recall, step, patience):
            best = (_copy(params), AdamState(_copy(adam.m), _copy(adam.v), adam.t), step)
        elif stop.patience_left <= 0:
            log.info("early stop at step %d (best step %d)", step, stop.best_step)
            break

    result.params, result.adam, result.step = best
    return result
