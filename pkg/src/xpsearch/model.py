"""Vanilla DREM and DREM-HGN: scoring, joint negative-sampling objective, training."""

from __future__ import annotations

import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import hgn
from .corpus import KG_RELATIONS, SCHEMA, Corpus
from .store import (
    EmbeddingStore,
    SparseRows,
    apply_gradients,
    clip_gradients,
    decay_schedule,
    init_store,
)

log = logging.getLogger(__name__)

NOISE_POWER = 0.75


def fork_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator per named component, all derived from one seed."""
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


@dataclass
class ModelConfig:
    dim: int = 100
    neg: int = 5
    batch_size: int = 64
    epochs: int = 20
    lr: float = 0.5
    clip: float = 5.0
    seed: int = 0
    model: str = "drem"
    heads: int = 2
    omega_cap: int = hgn.DEFAULT_OMEGA_CAP
    deterministic: bool = True
    workers: int = 1

    def __post_init__(self):
        self.model = self.model.replace("-", "_")
        if self.dim < 1 or self.neg < 1 or self.epochs < 1 or self.batch_size < 1 or self.heads < 1:
            raise ValueError("dim, neg, epochs, batch_size and heads must be >= 1")
        if self.model not in ("drem", "drem_hgn"):
            raise ValueError(f"unknown model {self.model!r}")

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in values.items():
            if k not in types:
                raise KeyError(f"unknown config key {k!r}")
            t = types[k]
            if t in ("bool", bool) and isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes", "on")
            elif t in ("int", int):
                v = int(v)
            elif t in ("float", float):
                v = float(v)
            kwargs[k] = v
        return cls(**kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


def read_config_file(path) -> dict[str, str]:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# scoring


def encode_query(words: Sequence[int], store: EmbeddingStore) -> np.ndarray:
    """``tanh(W . mean(word vectors) + b)``; no words means a zero mean."""
    mean = store["word"][list(words)].mean(axis=0) if len(words) else np.zeros(store.alpha)
    return np.tanh(store["proj_W"] @ mean + store["proj_b"])


def triple_logit(h, r, t) -> float:
    return float((np.asarray(h) + np.asarray(r)) @ np.asarray(t))


def purchase_logit(u, q, i) -> float:
    return float((np.asarray(u) + np.asarray(q)) @ np.asarray(i))


def user_query_vector(user: int, words: Sequence[int], store: EmbeddingStore, corpus: Corpus,
                      cap: int = hgn.DEFAULT_OMEGA_CAP):
    """``u + q`` for either model kind, plus the attention trace for DREM-HGN (else None)."""
    q = encode_query(words, store)
    if store.model_kind == "drem":
        return store["user"][user] + q, None
    u, trace = hgn.user_vector(user, q, corpus, store, cap)
    return u + q, trace


# ---------------------------------------------------------------------------
# noise distributions


class NoiseDistribution:
    def __init__(self, weights: np.ndarray, kind: str, entity_type: str = "item"):
        w = np.asarray(weights, dtype=float)
        if w.size == 0 or w.sum() <= 0:
            raise ValueError("noise distribution needs positive mass")
        self.kind = kind
        self.entity_type = entity_type
        self.probs = w / w.sum()
        self.cdf = np.cumsum(self.probs)
        self.cdf[-1] = 1.0

    @classmethod
    def uniform(cls, n: int, entity_type: str = "item") -> "NoiseDistribution":
        return cls(np.ones(n), "uniform_item", entity_type)

    @classmethod
    def from_frequencies(cls, freq, entity_type: str, power: float = NOISE_POWER) -> "NoiseDistribution":
        freq = np.asarray(freq, dtype=float)
        if freq.sum() <= 0:
            freq = np.ones_like(freq)
        return cls(freq ** power, "frequency_entity", entity_type)

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        return np.searchsorted(self.cdf, rng.random(k), side="right").clip(max=len(self.cdf) - 1)


def sample_negatives(dist: NoiseDistribution, k: int, rng: np.random.Generator) -> np.ndarray:
    return dist.sample(k, rng)


def entity_frequencies(corpus: Corpus) -> dict[str, np.ndarray]:
    """Occurrence counts per entity over triples and train purchases."""
    freq = {t: np.zeros(corpus.count(t), dtype=np.int64) for t in ("item", "brand", "category")}
    for rel, arr in corpus.triples.items():
        ht, tt = SCHEMA[rel]
        np.add.at(freq[ht], arr[:, 0], 1)
        np.add.at(freq[tt], arr[:, 1], 1)
    for p in corpus.train_purchases():
        freq["item"][p.item] += 1
    return freq


def build_noise(corpus: Corpus) -> dict[str, NoiseDistribution]:
    freq = entity_frequencies(corpus)
    noise = {"purchase": NoiseDistribution.uniform(corpus.n_items)}
    for t, f in freq.items():
        noise[t] = NoiseDistribution.from_frequencies(f, t)
    return noise


# ---------------------------------------------------------------------------
# objective


class PurchaseExample(NamedTuple):
    user: int
    words: tuple
    item: int
    negatives: np.ndarray
    omega: dict | None = None  # DREM-HGN only


class TripleExample(NamedTuple):
    relation: str
    head: int
    tail: int
    negatives: np.ndarray


class GradBuffer:
    """Accumulates dense parameter gradients and row gradients of embedding tables."""

    def __init__(self):
        self._dense: dict[str, np.ndarray] = {}
        self._rows: dict[str, tuple[list, list]] = {}

    def dense(self, name, g):
        if name in self._dense:
            self._dense[name] = self._dense[name] + g
        else:
            self._dense[name] = np.array(g, dtype=float)

    def rows(self, name, idx, values):
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        values = np.asarray(values, dtype=float).reshape(idx.shape[0], -1)
        lst = self._rows.setdefault(name, ([], []))
        lst[0].append(idx)
        lst[1].append(values)

    def finalize(self, scale: float = 1.0) -> dict:
        out = {}
        for name, g in self._dense.items():
            out[name] = g * scale
        for name, (idx_l, val_l) in self._rows.items():
            idx = np.concatenate(idx_l)
            vals = np.concatenate(val_l)
            uniq, inv = np.unique(idx, return_inverse=True)
            acc = np.zeros((uniq.shape[0], vals.shape[1]))
            np.add.at(acc, inv, vals)
            out[name] = SparseRows(uniq, acc * scale)
        return out


def _log_sigmoid_neg(x):
    # -log sigmoid(x), stable
    return np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _contrast(s, pos_vec, neg_mat):
    """Loss and grads for -log s(s.p) - sum log s(-s.n)."""
    lp = s @ pos_vec
    ln = neg_mat @ s
    loss = float(_log_sigmoid_neg(lp) + _log_sigmoid_neg(-ln).sum())
    dlp = _sigmoid(lp) - 1.0
    dln = _sigmoid(ln)
    ds = dlp * pos_vec + dln @ neg_mat
    return loss, ds, dlp * s, np.outer(dln, s)


def _query_backward(words, dq, q, store, grads):
    dpre = dq * (1.0 - q * q)
    n = len(words)
    mean = store["word"][list(words)].mean(axis=0) if n else np.zeros(store.alpha)
    grads.dense("proj_W", np.outer(dpre, mean))
    grads.dense("proj_b", dpre)
    if n:
        dm = store["proj_W"].T @ dpre / n
        grads.rows("word", list(words), np.tile(dm, (n, 1)))


def _purchase_term(ex: PurchaseExample, store: EmbeddingStore, grads: GradBuffer) -> float:
    q = encode_query(ex.words, store)
    if store.model_kind == "drem":
        u = store["user"][ex.user]
        cache = None
    else:
        cache = hgn.hgn_forward(q, ex.omega, store)
        u = cache.u
    s = u + q
    items = store["item"]
    loss, ds, dpos, dneg = _contrast(s, items[ex.item], items[ex.negatives])
    grads.rows("item", [ex.item], dpos[None, :])
    grads.rows("item", ex.negatives, dneg)
    dq = ds.copy()
    if cache is None:
        grads.rows("user", [ex.user], ds[None, :])
    else:
        dq += hgn.hgn_backward(cache, ds, store, grads)
    _query_backward(ex.words, dq, q, store, grads)
    return loss


def _triple_term(ex: TripleExample, store: EmbeddingStore, grads: GradBuffer) -> float:
    ht, tt = SCHEMA[ex.relation]
    r_idx = KG_RELATIONS.index(ex.relation)
    s = store[ht][ex.head] + store["relation"][r_idx]
    tails = store[tt]
    loss, ds, dpos, dneg = _contrast(s, tails[ex.tail], tails[ex.negatives])
    grads.rows(ht, [ex.head], ds[None, :])
    grads.rows("relation", [r_idx], ds[None, :])
    grads.rows(tt, [ex.tail], dpos[None, :])
    grads.rows(tt, ex.negatives, dneg)
    return loss


def loss_and_grad(batch: Sequence, store: EmbeddingStore) -> tuple[float, dict]:
    """Mean negated negative-sampling log-likelihood over ``batch`` and its gradient.

    Gradients are keyed by table name; embedding tables come back as
    ``SparseRows`` over the touched rows only.
    """
    if not batch:
        raise ValueError("empty batch")
    grads = GradBuffer()
    total = 0.0
    for ex in batch:
        if isinstance(ex, PurchaseExample):
            total += _purchase_term(ex, store, grads)
        else:
            total += _triple_term(ex, store, grads)
    loss = total / len(batch)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, grads.finalize(1.0 / len(batch))


def batch_loss(batch: Sequence, store: EmbeddingStore) -> float:
    """Forward-only mean loss; used by finite-difference checks."""
    if not batch:
        raise ValueError("empty batch")
    total = 0.0
    for ex in batch:
        if isinstance(ex, PurchaseExample):
            q = encode_query(ex.words, store)
            u = store["user"][ex.user] if store.model_kind == "drem" else hgn.hgn_forward(q, ex.omega, store).u
            s, pos, neg = u + q, store["item"][ex.item], store["item"][ex.negatives]
        else:
            ht, tt = SCHEMA[ex.relation]
            s = store[ht][ex.head] + store["relation"][KG_RELATIONS.index(ex.relation)]
            pos, neg = store[tt][ex.tail], store[tt][ex.negatives]
        total += float(_log_sigmoid_neg(s @ pos) + _log_sigmoid_neg(-(neg @ s)).sum())
    return total / len(batch)


# ---------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good: EmbeddingStore, log_rows):
        super().__init__(message)
        self.last_good = last_good
        self.log = log_rows


@dataclass
class TrainResult:
    store: EmbeddingStore
    log: list[dict]
    mode: str


def _make_examples(corpus: Corpus, config: ModelConfig):
    train = corpus.train_purchases()
    triples = [(rel, int(h), int(t)) for rel, arr in corpus.triples.items() for h, t in arr]
    return train, triples


def _build_batch(idx, train, triples, corpus, config, noise, rng):
    out = []
    n_p = len(train)
    for j in idx:
        if j < n_p:
            p = train[j]
            negs = noise["purchase"].sample(config.neg, rng)
            omega = None
            if config.model == "drem_hgn":
                omega = hgn.user_omega(corpus, p.user, config.omega_cap, exclude_item=p.item)
            out.append(PurchaseExample(p.user, p.words, p.item, negs, omega))
        else:
            rel, h, t = triples[j - n_p]
            tt = SCHEMA[rel][1]
            out.append(TripleExample(rel, h, t, noise[tt].sample(config.neg, rng)))
    return out


def train(corpus: Corpus, config: ModelConfig, store: EmbeddingStore | None = None) -> TrainResult:
    """Joint training over purchase and KG-triple examples in one shuffled stream.

    Per batch: sample negatives, compute the mean loss gradient, clip it to
    ``config.clip``, and apply Adagrad at a learning rate decaying linearly
    over all batches.  With ``deterministic=False`` and ``workers > 1`` the
    batches of an epoch are shared across threads that update the store
    without locking.
    """
    train_p, triples = _make_examples(corpus, config)
    if not train_p:
        raise ValueError("corpus has no train purchases")
    if store is None:
        store = init_store(corpus.sizes(), config.dim, config.heads, config.model,
                           seed=int(fork_rng(config.seed, "init").integers(2**63)))
    noise = build_noise(corpus)
    shuffle_rng = fork_rng(config.seed, "shuffle")
    neg_rng = fork_rng(config.seed, "negatives")
    n_total = len(train_p) + len(triples)
    n_batches = -(-n_total // config.batch_size)
    total_steps = n_batches * config.epochs
    parallel = not config.deterministic and config.workers > 1
    mode = f"parallel[{config.workers}]" if parallel else "deterministic"
    rows = []
    step = 0
    last_good = store.copy()
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n_total)
        batches = [order[k:k + config.batch_size] for k in range(0, n_total, config.batch_size)]
        losses = []

        def run(batch_idx, rng, step0):
            lr = decay_schedule(config.lr, min(step0 / total_steps, 1.0))
            batch = _build_batch(batch_idx, train_p, triples, corpus, config, noise, rng)
            loss, grads = loss_and_grad(batch, store)
            grads = clip_gradients(grads, config.clip)
            apply_gradients(store, grads, lr)
            return loss, lr

        try:
            if parallel:
                rngs = [fork_rng(config.seed, f"worker{w}-epoch{epoch}") for w in range(config.workers)]

                def shard(w):
                    out = []
                    for b in range(w, len(batches), config.workers):
                        out.append(run(batches[b], rngs[w], step + b))
                    return out

                with ThreadPoolExecutor(config.workers) as pool:
                    for res in pool.map(shard, range(config.workers)):
                        losses.extend(res)
                step += len(batches)
            else:
                for b in batches:
                    losses.append(run(b, neg_rng, step))
                    step += 1
        except FloatingPointError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}", last_good, rows) from exc
        if not store.all_finite():
            raise TrainingDiverged(f"epoch {epoch}: non-finite parameters", last_good, rows)
        mean_loss = float(np.mean([l for l, _ in losses]))
        row = {"epoch": epoch, "mean_loss": mean_loss, "lr": losses[-1][1],
               "wall_seconds": time.perf_counter() - t0}
        rows.append(row)
        log.info("epoch %d mean_loss %.6f lr %.5f mode %s", epoch, mean_loss, row["lr"], mode)
        last_good = store.copy()
    return TrainResult(store, rows, mode)


def write_training_log(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss,lr,wall_seconds\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['mean_loss']!r},{r['lr']!r},{r['wall_seconds']:.3f}\n")
