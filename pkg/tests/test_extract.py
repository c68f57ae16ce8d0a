import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from comirec import extract as ex
from comirec.params import ModelConfig, init_parameters

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def _setup(extractor, seed=0, n_items=20, d=6, K=3, n_max=5, r=3):
    cfg = ModelConfig(n_items=n_items, d=d, K=K, n_max=n_max, r=r, extractor=extractor)
    return cfg, init_parameters(cfg, seed=seed, dtype=np.float64)


def _random_batch(rng, B, n_max, n_items):
    lengths = rng.integers(1, n_max + 1, size=B)
    return ex.SequenceBatch.from_histories([rng.integers(0, n_items, size=n) for n in lengths], n_max)


def test_squash_cases():
    assert np.array_equal(ex.squash(np.zeros(4)), np.zeros(4))
    u = np.array([0.6, 0.8])
    assert np.allclose(ex.squash(u), 0.5 * u)
    assert np.allclose(ex.squash(3 * u), 0.9 * u)


@given(arrays(np.float64, 5, elements=finite), st.floats(1.0001, 10))
def test_squash_range_and_monotone(s, scale):
    v = ex.squash(s)
    n = np.linalg.norm(v)
    assert 0 <= n < 1
    assert np.linalg.norm(ex.squash(s * scale)) >= n


def test_routing_softmax_cases():
    assert np.allclose(ex.routing_softmax(np.zeros(4)), 0.25)
    out = ex.routing_softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0)


@given(arrays(np.float64, 4, elements=finite), finite)
def test_routing_softmax_shift_invariant(b, c):
    p = ex.routing_softmax(b)
    assert p.sum() == pytest.approx(1.0)
    assert np.allclose(ex.routing_softmax(b + c), p, atol=1e-12)


def test_dr_single_position_one_iteration():
    cfg, p = _setup("DR", K=4, r=1)
    batch = ex.SequenceBatch.from_histories([[7]], cfg.n_max)
    V = ex.extract_dr(p, batch, cfg.K, 1)[0]
    e = p["item_emb"][7]
    expected = np.stack([ex.squash(p["W_route"][0, j] @ e / cfg.K) for j in range(cfg.K)])
    assert np.allclose(V, expected, atol=1e-14)


def test_dr_couplings_normalized_and_norm_below_one():
    cfg, p = _setup("DR", seed=2)
    rng = np.random.default_rng(0)
    V, cache = ex.dr_forward(p, _random_batch(rng, 8, cfg.n_max, cfg.n_items), cfg.K, cfg.r)
    assert np.all(np.linalg.norm(V, axis=-1) < 1)
    for c in cache.couplings:
        assert np.allclose(c.sum(axis=2), 1.0, atol=1e-6) and np.all(c >= 0)


def test_sa_single_position_copies_h():
    cfg, p = _setup("SA")
    batch = ex.SequenceBatch.from_histories([[4]], cfg.n_max)
    V = ex.extract_sa(p, batch, cfg.K)[0]
    h = p["item_emb"][4] + p["pos_emb"][0]
    assert np.allclose(V, np.tile(h, (cfg.K, 1)))


def test_sa_zero_w2_gives_mean():
    cfg, p = _setup("SA")
    p["W2"][:] = 0
    batch = ex.SequenceBatch.from_histories([[1, 2, 3]], cfg.n_max)
    V, cache = ex.sa_forward(p, batch, cfg.K)
    H = p["item_emb"][[1, 2, 3]] + p["pos_emb"][:3]
    assert np.allclose(V[0], np.tile(H.mean(axis=0), (cfg.K, 1)))
    assert np.allclose(cache.A[0, :3], 1 / 3) and np.all(cache.A[0, 3:] == 0)


def test_sa_position_swap():
    cfg, p = _setup("SA", seed=5)
    base = ex.SequenceBatch.from_histories([[2, 9, 4]], cfg.n_max)
    swapped = ex.SequenceBatch.from_histories([[9, 2, 4]], cfg.n_max)
    V0, c0 = ex.sa_forward(p, base, cfg.K)
    V1, _ = ex.sa_forward(p, swapped, cfg.K)
    assert not np.allclose(V0, V1)

    q = {k: v.copy() for k, v in p.items()}
    q["pos_emb"][[0, 1]] = q["pos_emb"][[1, 0]]
    V2, c2 = ex.sa_forward(q, swapped, cfg.K)
    for k in range(cfg.K):
        assert np.allclose(np.sort(c0.A[0, :3, k]), np.sort(c2.A[0, :3, k]))
    assert np.allclose(V0, V2)


def test_sa_attention_normalized_masked_zero():
    cfg, p = _setup("SA", seed=1)
    rng = np.random.default_rng(3)
    batch = _random_batch(rng, 16, cfg.n_max, cfg.n_items)
    _, cache = ex.sa_forward(p, batch, cfg.K)
    assert np.allclose(cache.A.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(cache.A[~batch.mask] == 0.0)


@pytest.mark.parametrize("extractor", ["SA", "DR"])
def test_masked_embeddings_do_not_matter(extractor):
    cfg, p = _setup(extractor, seed=3)
    batch = ex.SequenceBatch(np.array([[1, 2, 0, 0, 0]]), np.array([[True, True, False, False, False]]))
    before = ex.extract(p, cfg, batch)
    other = ex.SequenceBatch(np.array([[1, 2, 5, 6, 7]]), batch.mask)
    assert np.array_equal(ex.extract(p, cfg, other), before)
    p["item_emb"][0] += 100.0
    assert np.array_equal(ex.extract(p, cfg, batch), before)


def test_dispatch_and_single_interest():
    for extractor in ("SA", "DR"):
        cfg, p = _setup(extractor, K=1)
        batch = ex.SequenceBatch.from_histories([[1, 2], [3]], cfg.n_max)
        V = ex.extract(p, cfg, batch)
        assert V.shape == (2, 1, cfg.d)
        direct = ex.extract_sa(p, batch, 1) if extractor == "SA" else ex.extract_dr(p, batch, 1, cfg.r)
        assert np.array_equal(V, direct)


def test_unknown_extractor_tag():
    cfg, p = _setup("SA")
    cfg.extractor = "XX"
    with pytest.raises(ValueError, match="extractor"):
        ex.extract(p, cfg, ex.SequenceBatch.from_histories([[1]], cfg.n_max))


def test_fully_masked_row_rejected():
    with pytest.raises(ValueError):
        ex.SequenceBatch(np.zeros((1, 3), int), np.zeros((1, 3), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_squash_backward_matches_central_difference(seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=5) * rng.uniform(0.1, 3)
    dv = rng.normal(size=5)
    h = 1e-6
    fd = np.array([(ex.squash(s + h * e) @ dv - ex.squash(s - h * e) @ dv) / (2 * h) for e in np.eye(5)])
    assert np.allclose(ex.squash_backward(s, dv), fd, atol=1e-7)
