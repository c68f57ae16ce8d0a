"""Multi-interest extraction: capsule dynamic routing and structured self-attention.

Both extractors map a padded batch of item ids to interest matrices of shape
(B, K, d). Each has a ``*_forward`` that keeps the intermediates needed by the
matching ``*_backward``; gradients are exact, including through every routing
iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelConfig, Params

SQUASH_EPS = 1e-12


@dataclass
class SequenceBatch:
    item_ids: np.ndarray  # (B, n_max) int
    mask: np.ndarray  # (B, n_max) bool, True = real item

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.item_ids.shape != self.mask.shape or self.item_ids.ndim != 2:
            raise ValueError("item_ids and mask must be matching (B, n_max) matrices")
        if not self.mask.any(axis=1).all():
            raise ValueError("every sequence needs at least one unmasked position")

    @classmethod
    def from_histories(cls, histories, n_max: int) -> "SequenceBatch":
        from .data import pad_batch
        return cls(*pad_batch(histories, n_max))


def squash(s: np.ndarray) -> np.ndarray:
    """``|s|^2/(1+|s|^2) * s/|s|`` along the last axis; zero-safe."""
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    safe = np.where(norm < SQUASH_EPS, 1.0, norm)
    scale = np.where(norm < SQUASH_EPS, 0.0, safe / (1.0 + safe * safe))
    return s * scale


def squash_backward(s: np.ndarray, dv: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(s, axis=-1, keepdims=True)
    small = norm < SQUASH_EPS
    n = np.where(small, 1.0, norm)
    n2 = n * n
    scale = n / (1.0 + n2)
    # d/dn [n/(1+n^2)] / n
    radial = (1.0 - n2) / ((1.0 + n2) ** 2) / n
    ds = scale * dv + radial * np.sum(s * dv, axis=-1, keepdims=True) * s
    return np.where(small, 0.0, ds)


def routing_softmax(b: np.ndarray, axis: int = -1) -> np.ndarray:
    z = b - np.max(b, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int) -> np.ndarray:
    return p * (dp - np.sum(p * dp, axis=axis, keepdims=True))


# -- dynamic routing ---------------------------------------------------------

@dataclass
class RoutingCache:
    ids: np.ndarray
    mask: np.ndarray  # (B, n, 1) float
    e: np.ndarray  # (B, n, d)
    u_hat: np.ndarray  # (B, n, K, d)
    couplings: list = field(default_factory=list)  # per iteration (B, n, K)
    logits: list = field(default_factory=list)  # b before each iteration
    s: list = field(default_factory=list)  # (B, K, d)
    v: list = field(default_factory=list)  # (B, K, d)


def _predictions(W: np.ndarray, e: np.ndarray) -> np.ndarray:
    """u_hat[b, i, j] = W[i, j] @ e[b, i] as one batched matmul per position."""
    n, K, d, _ = W.shape
    Wt = W.reshape(n, K * d, d).transpose(0, 2, 1)  # (n, d_in, K*d)
    out = np.matmul(e.transpose(1, 0, 2), Wt)  # (n, B, K*d)
    return out.transpose(1, 0, 2).reshape(e.shape[0], n, K, d)


def dr_forward(params: Params, batch: SequenceBatch, K: int, r: int) -> tuple[np.ndarray, RoutingCache]:
    if r < 1:
        raise ValueError("routing needs at least one iteration")
    W = params["W_route"]
    if W.shape[1] != K or W.shape[0] != batch.item_ids.shape[1]:
        raise ValueError(f"W_route shape {W.shape} does not match K={K}, n_max={batch.item_ids.shape[1]}")
    m = batch.mask[..., None].astype(W.dtype)
    e = params["item_emb"][batch.item_ids] * m
    u_hat = _predictions(W, e)
    cache = RoutingCache(batch.item_ids, m, e, u_hat)
    b = np.zeros(u_hat.shape[:3], dtype=u_hat.dtype)
    for _ in range(r):
        c = routing_softmax(b, axis=2)
        s = np.einsum("bij,bijd->bjd", c * m, u_hat)
        v = squash(s)
        cache.logits.append(b)
        cache.couplings.append(c)
        cache.s.append(s)
        cache.v.append(v)
        b = b + np.einsum("bjd,bijd->bij", v, u_hat) * m
    return cache.v[-1], cache


def dr_backward(params: Params, cache: RoutingCache, dV: np.ndarray) -> Params:
    m = cache.mask
    u_hat = cache.u_hat
    du = np.zeros_like(u_hat)
    g_b = np.zeros(u_hat.shape[:3], dtype=u_hat.dtype)  # grad w.r.t. logits after this iteration
    r = len(cache.v)
    for t in reversed(range(r)):
        gbm = g_b * m
        dv = np.einsum("bij,bijd->bjd", gbm, u_hat)
        if t == r - 1:
            dv = dv + dV
        du += gbm[..., None] * cache.v[t][:, None, :, :]
        ds = squash_backward(cache.s[t], dv)
        c = cache.couplings[t]
        du += (c * m)[..., None] * ds[:, None, :, :]
        dc = np.einsum("bjd,bijd->bij", ds, u_hat) * m
        g_b = g_b + _softmax_backward(c, dc, axis=2)

    W = params["W_route"]
    n, K, d, _ = W.shape
    du_flat = du.reshape(du.shape[0], n, K * d).transpose(1, 0, 2)  # (n, B, K*d)
    e_t = cache.e.transpose(1, 2, 0)  # (n, d_in, B)
    dW = np.matmul(e_t, du_flat).reshape(n, d, K, d).transpose(0, 2, 3, 1)
    Wt = W.reshape(n, K * d, d)  # (n, K*d, d_in)
    de = np.matmul(du_flat, Wt).transpose(1, 0, 2) * m  # (B, n, d_in)
    d_emb = np.zeros_like(params["item_emb"])
    np.add.at(d_emb, cache.ids.ravel(), de.reshape(-1, d))
    return {"item_emb": d_emb, "W_route": dW}


def extract_dr(params: Params, batch: SequenceBatch, K: int, r: int) -> np.ndarray:
    return dr_forward(params, batch, K, r)[0]


# -- self-attention ----------------------------------------------------------

@dataclass
class AttentionCache:
    ids: np.ndarray
    mask: np.ndarray  # (B, n, 1) float
    H: np.ndarray  # (B, n, d)
    Z: np.ndarray  # tanh(W1 H), (B, n, d_a)
    A: np.ndarray  # (B, n, K), normalized over positions


def sa_forward(params: Params, batch: SequenceBatch, K: int) -> tuple[np.ndarray, AttentionCache]:
    E, P, W1, W2 = params["item_emb"], params["pos_emb"], params["W1"], params["W2"]
    n = batch.item_ids.shape[1]
    if P.shape[0] != n or W2.shape[1] != K:
        raise ValueError(f"pos_emb/W2 shapes {P.shape}/{W2.shape} do not match n_max={n}, K={K}")
    m = batch.mask[..., None].astype(E.dtype)
    H = (E[batch.item_ids] + P[None, :, :]) * m
    Z = np.tanh(H @ W1.T)
    logits = Z @ W2
    logits = np.where(batch.mask[..., None], logits, -np.inf)
    A = routing_softmax(logits, axis=1)
    V = np.einsum("bnk,bnd->bkd", A, H)
    return V, AttentionCache(batch.item_ids, m, H, Z, A)


def sa_backward(params: Params, cache: AttentionCache, dV: np.ndarray) -> Params:
    W1, W2 = params["W1"], params["W2"]
    H, Z, A = cache.H, cache.Z, cache.A
    dA = np.einsum("bkd,bnd->bnk", dV, H)
    dH = np.einsum("bnk,bkd->bnd", A, dV)
    dlogits = _softmax_backward(A, dA, axis=1)
    dW2 = np.einsum("bna,bnk->ak", Z, dlogits)
    dpre = (dlogits @ W2.T) * (1.0 - Z * Z)
    dW1 = np.einsum("bna,bnd->ad", dpre, H)
    dH = (dH + dpre @ W1) * cache.mask
    d = H.shape[-1]
    d_emb = np.zeros_like(params["item_emb"])
    np.add.at(d_emb, cache.ids.ravel(), dH.reshape(-1, d))
    return {"item_emb": d_emb, "pos_emb": dH.sum(axis=0), "W1": dW1, "W2": dW2}


def extract_sa(params: Params, batch: SequenceBatch, K: int) -> np.ndarray:
    return sa_forward(params, batch, K)[0]


# -- dispatch ----------------------------------------------------------------

def forward(params: Params, config: ModelConfig, batch: SequenceBatch):
    if config.extractor == "DR":
        return dr_forward(params, batch, config.K, config.r)
    if config.extractor == "SA":
        return sa_forward(params, batch, config.K)
    raise ValueError(f"unknown extractor {config.extractor!r}")


def backward(params: Params, config: ModelConfig, cache, dV: np.ndarray) -> Params:
    if config.extractor == "DR":
        return dr_backward(params, cache, dV)
    if config.extractor == "SA":
        return sa_backward(params, cache, dV)
    raise ValueError(f"unknown extractor {config.extractor!r}")


def extract(params: Params, config: ModelConfig, batch: SequenceBatch) -> np.ndarray:
    """Interest matrices of shape (B, K, d); row ``k`` of a user is interest ``k``."""
    return forward(params, config, batch)[0]
