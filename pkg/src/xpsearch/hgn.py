"""Hierarchical gated network: zero-attention pooling per knowledge domain and
across domains, yielding a query-conditioned user vector.

The attention function is ``x . (tanh(Wf q + b) Wh)``, so the logit of the
zero vector is identically 0 for every parameter setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import DOMAINS, Corpus
from .store import EmbeddingStore, attention_names

DEFAULT_OMEGA_CAP = 64


def attention_hidden(q, Wf, b) -> np.ndarray:
    """``tanh(Wf . q + b)`` as an (alpha, beta) array; contracts the last axis of ``Wf``."""
    return np.tanh(Wf @ q + b)


def attention_logit(q, x, Wf, b, Wh) -> float:
    M = attention_hidden(q, Wf, b)
    return float((np.asarray(x) @ M) @ Wh)


def _softmax_with_zero(logits: np.ndarray) -> np.ndarray:
    z = np.append(logits, 0.0)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def zam_pool(q, X: Sequence[np.ndarray] | np.ndarray, logit_fn: Callable) -> tuple[np.ndarray, np.ndarray, float]:
    """Attend ``q`` over ``X`` plus the zero vector.

    Returns ``(pooled, weights, zero_weight)``; ``weights`` has one entry per
    row of ``X``.  An empty ``X`` pools to the zero vector with zero weight 1.
    """
    q = np.asarray(q, dtype=float)
    X = np.asarray(X, dtype=float).reshape(-1, q.shape[0])
    logits = np.array([logit_fn(q, x) for x in X], dtype=float)
    z = np.append(logits, logit_fn(q, np.zeros_like(q)))
    z = z - z.max()
    w = np.exp(z) / np.exp(z).sum()
    return w[:-1] @ X, w[:-1], float(w[-1])


# ---------------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Per-(user, query) attention record.

    ``entity_weights[d]`` aligns with ``entity_ids[d]``; ``domain_zero[d]`` is
    the gate weight inside domain ``d``; ``domain_weights`` and ``zero_weight``
    are the top-level weights.
    """

    user: int
    entity_ids: dict[str, np.ndarray] = field(default_factory=dict)
    entity_weights: dict[str, np.ndarray] = field(default_factory=dict)
    domain_zero: dict[str, float] = field(default_factory=dict)
    domain_weights: dict[str, float] = field(default_factory=dict)
    zero_weight: float = 1.0

    def to_json(self, corpus: Corpus | None = None, query: str | None = None) -> str:
        def ent_name(d, i):
            return corpus.name(d, int(i)) if corpus is not None else int(i)

        rec = {
            "user": corpus.name("user", self.user) if corpus is not None else self.user,
            "query": query,
            "domain_weights": {**{d: float(w) for d, w in self.domain_weights.items()}, "zero": float(self.zero_weight)},
            "domain_zero": {d: float(w) for d, w in self.domain_zero.items()},
            "entities": {
                d: [{"id": ent_name(d, i), "w": float(w)} for i, w in zip(self.entity_ids[d], self.entity_weights[d])]
                for d in self.entity_ids
            },
        }
        return json.dumps(rec, sort_keys=True)


@dataclass
class _HgnCache:
    q: np.ndarray
    X: dict            # domain -> (n, alpha) entity rows
    ids: dict          # domain -> entity ids
    M: dict            # scope -> hidden (alpha, beta)
    g: dict            # scope -> attention direction (alpha,)
    w: dict            # domain -> weights incl. trailing zero weight
    U: np.ndarray      # (3, alpha) domain vectors
    v: np.ndarray      # top-level weights incl. trailing zero weight
    u: np.ndarray


def user_omega(corpus: Corpus, user: int, cap: int = DEFAULT_OMEGA_CAP,
               exclude_item: int | None = None) -> dict[str, np.ndarray]:
    """The user's most recent ``cap`` associated entities per domain."""
    out = {}
    for d in DOMAINS:
        ids = corpus.omega[d][user]
        if d == "item" and exclude_item is not None:
            ids = ids[ids != exclude_item]
        out[d] = ids[-cap:] if cap else ids[:0]
    return out


def hgn_forward(q: np.ndarray, omega: dict[str, np.ndarray], store: EmbeddingStore) -> _HgnCache:
    X, M, g, w = {}, {}, {}, {}
    U = np.zeros((len(DOMAINS), q.shape[0]))
    for k, d in enumerate(DOMAINS):
        wf, b, wh = attention_names(d)
        M[d] = attention_hidden(q, store[wf], store[b])
        g[d] = M[d] @ store[wh]
        X[d] = store[d][omega[d]]
        w[d] = _softmax_with_zero(X[d] @ g[d])
        U[k] = w[d][:-1] @ X[d]
    wf, b, wh = attention_names("user")
    M["user"] = attention_hidden(q, store[wf], store[b])
    g["user"] = M["user"] @ store[wh]
    v = _softmax_with_zero(U @ g["user"])
    u = v[:-1] @ U
    return _HgnCache(q, X, {d: omega[d] for d in DOMAINS}, M, g, w, U, v, u)


def _softmax_back(w_full: np.ndarray, dw_full: np.ndarray) -> np.ndarray:
    # gradient w.r.t. logits of a softmax, dropping the constant zero-vector logit
    return (w_full * (dw_full - w_full @ dw_full))[:-1]


def _attention_param_back(scope, cache: _HgnCache, dg, store, grads):
    """Backprop ``dg`` (grad wrt ``g = tanh(Wf q + b) Wh``) into params; returns grad wrt q."""
    wf, b, wh = attention_names(scope)
    M = cache.M[scope]
    dM = np.outer(dg, store[wh])
    dZ = dM * (1.0 - M * M)
    grads.dense(wh, M.T @ dg)
    grads.dense(b, dZ)
    grads.dense(wf, np.einsum("ab,c->abc", dZ, cache.q))
    return np.einsum("abc,ab->c", store[wf], dZ)


def hgn_backward(cache: _HgnCache, du: np.ndarray, store: EmbeddingStore, grads) -> np.ndarray:
    """Accumulate parameter/entity gradients for upstream ``du``; return grad wrt the query vector."""
    U, v = cache.U, cache.v
    dU = np.outer(v[:-1], du)
    dv = np.append(U @ du, 0.0)
    da = _softmax_back(v, dv)
    dU += np.outer(da, cache.g["user"])
    dq = _attention_param_back("user", cache, da @ U, store, grads)
    for k, d in enumerate(DOMAINS):
        X = cache.X[d]
        if X.shape[0] == 0:
            continue
        w = cache.w[d]
        dud = dU[k]
        dX = np.outer(w[:-1], dud)
        dw = np.append(X @ dud, 0.0)
        dad = _softmax_back(w, dw)
        dX += np.outer(dad, cache.g[d])
        grads.rows(d, cache.ids[d], dX)
        dq += _attention_param_back(d, cache, dad @ X, store, grads)
    return dq


def trace_from_cache(user: int, cache: _HgnCache) -> AttentionTrace:
    return AttentionTrace(
        user=user,
        entity_ids={d: np.asarray(cache.ids[d]).copy() for d in DOMAINS},
        entity_weights={d: cache.w[d][:-1].copy() for d in DOMAINS},
        domain_zero={d: float(cache.w[d][-1]) for d in DOMAINS},
        domain_weights={d: float(cache.v[k]) for k, d in enumerate(DOMAINS)},
        zero_weight=float(cache.v[-1]),
    )


def user_vector(user: int, query_vec: np.ndarray, corpus: Corpus, store: EmbeddingStore,
                cap: int = DEFAULT_OMEGA_CAP) -> tuple[np.ndarray, AttentionTrace]:
    cache = hgn_forward(np.asarray(query_vec, dtype=float), user_omega(corpus, user, cap), store)
    return cache.u, trace_from_cache(user, cache)
