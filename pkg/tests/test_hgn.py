import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xpsearch import hgn
from xpsearch.hgn import attention_logit, hgn_forward, trace_from_cache, zam_pool
from xpsearch.store import attention_names, init_store

from oracles import att_logit, hgn_user

SIZES = {"word": 4, "user": 2, "item": 6, "brand": 3, "category": 3}
DOMAINS = ("item", "brand", "category")


def random_hgn_store(alpha=4, beta=2, seed=0, scale=0.5):
    store = init_store(SIZES, alpha, beta, "drem_hgn", seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name in store.table_order():
        store.params[name][...] = rng.normal(0, scale, size=store[name].shape)
    return store


def zero_attention(store):
    for scope in DOMAINS + ("user",):
        for name in attention_names(scope):
            store.params[name][...] = 0.0


def test_zero_weights_give_zero_logit():
    rng = np.random.default_rng(0)
    q, x = rng.normal(size=4), rng.normal(size=4)
    Wf, b, Wh = rng.normal(size=(4, 2, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
    assert attention_logit(q, x, np.zeros_like(Wf), np.zeros_like(b), Wh) == 0.0
    assert attention_logit(q, np.zeros(4), Wf, b, Wh) == 0.0


def test_logit_saturates():
    q, x = np.ones(2), np.array([1.0, -2.0])
    Wf = np.full((2, 1, 2), 1e3)
    Wh = np.array([1.5])
    # tanh -> 1 everywhere, so the logit is sum(x) * Wh
    assert attention_logit(q, x, Wf, np.zeros((2, 1)), Wh) == pytest.approx(-1.5, abs=1e-12)


def test_logit_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q, x = rng.normal(size=4), rng.normal(size=4)
        Wf, b, Wh = rng.normal(size=(4, 2, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)
        assert attention_logit(q, x, Wf, b, Wh) == pytest.approx(att_logit(q, x, Wf, b, Wh), abs=1e-12)


def test_zam_equal_logits():
    X = np.eye(3)
    pooled, w, zero = zam_pool(np.zeros(3), X, lambda q, x: 0.0)
    assert np.allclose(w, 0.25) and zero == pytest.approx(0.25)
    assert np.allclose(pooled, 0.25)


def test_zam_empty_set():
    pooled, w, zero = zam_pool(np.ones(3), np.zeros((0, 3)), lambda q, x: 5.0)
    assert not pooled.any() and w.size == 0 and zero == 1.0


def test_zam_ln2_logit():
    e = np.array([1.0, 0.0])
    pooled, w, zero = zam_pool(np.zeros(2), [e], lambda q, x: math.log(2.0) * x[0])
    assert w[0] == pytest.approx(2 / 3, abs=1e-12) and zero == pytest.approx(1 / 3, abs=1e-12)
    assert np.allclose(pooled, [2 / 3, 0.0])


def test_composed_softmax_example():
    store = random_hgn_store(seed=2)
    zero_attention(store)
    omega = {"item": np.array([3]), "brand": np.array([], dtype=int), "category": np.array([], dtype=int)}
    cache = hgn_forward(np.ones(4), omega, store)
    # item domain: {e, 0} -> 1/2 each; top level: 3 domains + zero -> 1/4 each
    assert np.allclose(cache.u, 0.25 * 0.5 * store["item"][3], atol=1e-15)
    assert cache.v.tolist() == [0.25] * 4


def test_forward_matches_reference():
    rng = np.random.default_rng(4)
    for seed in range(5):
        store = random_hgn_store(seed=seed)
        q = rng.normal(size=4)
        omega = {d: rng.permutation(SIZES[d])[:rng.integers(0, 4)] for d in DOMAINS}
        assert np.allclose(hgn_forward(q, omega, store).u, hgn_user(q, omega, store.params), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 5.0))
def test_weights_normalize(seed, scale):
    rng = np.random.default_rng(seed)
    store = random_hgn_store(seed=seed % 7, scale=scale)
    omega = {d: rng.permutation(SIZES[d])[:rng.integers(0, SIZES[d] + 1)] for d in DOMAINS}
    cache = hgn_forward(rng.normal(size=4), omega, store)
    tr = trace_from_cache(0, cache)
    for d in DOMAINS:
        assert abs(tr.entity_weights[d].sum() + tr.domain_zero[d] - 1.0) < 1e-9
        assert np.all(tr.entity_weights[d] >= 0)
    assert abs(sum(tr.domain_weights.values()) + tr.zero_weight - 1.0) < 1e-9


def test_gate_grows_as_logits_fall():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    gates = [zam_pool(np.zeros(2), X, lambda q, x, c=c: c * x.sum())[2] for c in (2.0, 0.0, -2.0, -8.0)]
    assert all(a < b for a, b in zip(gates, gates[1:]))


def test_permutation_equivariance():
    store = random_hgn_store(seed=5)
    q = np.random.default_rng(5).normal(size=4)
    omega = {"item": np.array([0, 2, 5]), "brand": np.array([1, 2]), "category": np.array([0])}
    a = hgn_forward(q, omega, store)
    perm = {"item": np.array([5, 0, 2]), "brand": np.array([2, 1]), "category": np.array([0])}
    b = hgn_forward(q, perm, store)
    assert np.allclose(a.u, b.u, atol=1e-14)
    assert np.allclose(a.w["item"][[2, 0, 1]], b.w["item"][:3], atol=1e-14)


def test_pooled_norm_bounded():
    rng = np.random.default_rng(6)
    for seed in range(10):
        store = random_hgn_store(seed=seed, scale=2.0)
        omega = {d: np.arange(SIZES[d]) for d in DOMAINS}
        cache = hgn_forward(rng.normal(size=4), omega, store)
        bound = max(np.linalg.norm(store[d], axis=1).max() for d in DOMAINS)
        assert np.linalg.norm(cache.u) <= bound + 1e-12


def test_empty_domains_pool_to_zero():
    store = random_hgn_store(seed=7)
    empty = {d: np.array([], dtype=int) for d in DOMAINS}
    cache = hgn_forward(np.ones(4), empty, store)
    assert not cache.u.any()
    tr = trace_from_cache(0, cache)
    assert all(tr.domain_zero[d] == 1.0 for d in DOMAINS)


def test_trace_json(tiny_corpus):
    store = init_store(tiny_corpus.sizes(), 4, 2, "drem_hgn", seed=0)
    u = tiny_corpus.ref("user", "u2").id
    _, tr = hgn.user_vector(u, np.ones(4), tiny_corpus, store)
    rec = json.loads(tr.to_json(tiny_corpus, "tablet case"))
    assert rec["user"] == "u2" and rec["query"] == "tablet case"
    assert set(rec["domain_weights"]) == {"item", "brand", "category", "zero"}
    assert rec["entities"]["brand"][0]["id"] == "zeta"
    total = sum(rec["domain_weights"].values())
    assert total == pytest.approx(1.0, abs=1e-9)


def test_omega_cap_and_exclusion(tiny_corpus):
    u = tiny_corpus.ref("user", "u1").id
    full = hgn.user_omega(tiny_corpus, u)
    assert hgn.user_omega(tiny_corpus, u, cap=0)["item"].size == 0
    if full["item"].size:
        target = int(full["item"][0])
        assert target not in hgn.user_omega(tiny_corpus, u, exclude_item=target)["item"].tolist()
