"""Top-K retrieval, ranking metrics, run/qrels files and the paired
randomization significance test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import hgn
from .corpus import Corpus
from .model import user_query_vector
from .store import EmbeddingStore

DEFAULT_K = 100
DEFAULT_CUTOFFS = (10, 50)


class RunFileError(Exception):
    pass


@dataclass
class RankedList:
    query_key: str
    items: np.ndarray   # item ids, best first
    scores: np.ndarray


def rank_scores(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best scores; ties go to the lower index."""
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return order[:k]


def item_scores(user: int, words, store: EmbeddingStore, corpus: Corpus,
                cap: int = hgn.DEFAULT_OMEGA_CAP):
    s, trace = user_query_vector(user, words, store, corpus, cap)
    return store["item"] @ s, trace


def retrieve_topk(user: int, query_id: int, store: EmbeddingStore, corpus: Corpus,
                  k: int = DEFAULT_K, cap: int = hgn.DEFAULT_OMEGA_CAP) -> RankedList:
    scores, _ = item_scores(user, corpus.query_words(query_id), store, corpus, cap)
    top = rank_scores(scores, k)
    return RankedList(corpus.query_key(user, query_id), top, scores[top])


def log_purchase_prob(scores: np.ndarray, item: int, k: int = DEFAULT_K) -> float:
    """Log-softmax of ``item`` over the top-``k`` candidates plus ``item`` itself."""
    cand = set(rank_scores(scores, k).tolist()) | {int(item)}
    cand = np.fromiter(sorted(cand), dtype=int)
    s = scores[cand]
    top = s.max()
    return float(scores[item] - top - np.log(np.exp(s - top).sum()))


def retrieve_test(store: EmbeddingStore, corpus: Corpus, k: int = DEFAULT_K,
                  cap: int = hgn.DEFAULT_OMEGA_CAP) -> list[RankedList]:
    return [retrieve_topk(u, q, store, corpus, k, cap) for u, q, _ in corpus.test_pairs().values()]


# ---------------------------------------------------------------------------
# metrics (binary relevance; items past the list contribute nothing)


def average_precision(ranked: Sequence, relevant) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranked, 1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def reciprocal_rank(ranked: Sequence, relevant) -> float:
    relevant = set(relevant)
    for rank, item in enumerate(ranked, 1):
        if item in relevant:
            return 1.0 / rank
    return 0.0


def ndcg_at_k(ranked: Sequence, relevant, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    relevant = set(relevant)
    dcg = sum(1.0 / math.log2(i + 1) for i, item in enumerate(ranked[:k], 1) if item in relevant)
    ideal = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal if ideal > 0 else 0.0


@dataclass
class MetricReport:
    per_query: dict[str, dict[str, float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    query_count: int = 0

    def as_dict(self) -> dict:
        return {"query_count": self.query_count, "means": self.means, "per_query": self.per_query}


def evaluate_run(run: Iterable, qrels: Mapping[str, Iterable],
                 cutoffs: Sequence[int] = DEFAULT_CUTOFFS) -> MetricReport:
    """Per-query AP, RR and NDCG@k plus their means over every qrels query.

    ``run`` holds ``RankedList`` objects or ``(query_key, items)`` pairs.
    Queries without a ranked list score zero; qrels queries with no relevant
    item are left out of the report.
    """
    lists: dict[str, list] = {}
    for entry in run:
        key, items = (entry.query_key, list(entry.items)) if isinstance(entry, RankedList) else (entry[0], list(entry[1]))
        if key in lists:
            raise RunFileError(f"duplicate query key {key!r} in run")
        if key not in qrels:
            raise RunFileError(f"query key {key!r} not in qrels")
        lists[key] = items
    names = ["ap", "rr"] + [f"ndcg@{c}" for c in cutoffs]
    judged = sorted(k for k in qrels if set(qrels[k]))
    report = MetricReport(query_count=len(judged))
    for key in judged:
        rel = set(qrels[key])
        items = lists.get(key, [])
        vals = {"ap": average_precision(items, rel), "rr": reciprocal_rank(items, rel)}
        for c in cutoffs:
            vals[f"ndcg@{c}"] = ndcg_at_k(items, rel, c)
        report.per_query[key] = vals
    n = max(len(judged), 1)
    report.means = {
        ("map" if m == "ap" else "mrr" if m == "rr" else m): sum(v[m] for v in report.per_query.values()) / n
        for m in names
    }
    return report


def fisher_randomization_test(a: Sequence[float], b: Sequence[float], iterations: int = 100_000,
                              seed: int = 0) -> float:
    """Two-sided paired randomization test on the mean difference of ``a - b``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.shape[0] < 2:
        raise ValueError("need at least two paired observations")
    observed = abs(d.mean())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = 10_000
    done = 0
    while done < iterations:
        m = min(chunk, iterations - done)
        signs = rng.integers(0, 2, size=(m, d.shape[0])) * 2 - 1
        perm = np.abs((signs * d).mean(axis=1))
        hits += int(np.count_nonzero(perm >= observed - 1e-12))
        done += m
    return hits / iterations


# ---------------------------------------------------------------------------
# six-column run files and qrels


def write_run(run: Iterable[RankedList], path, item_names: Sequence[str], tag: str = "xpsearch") -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rl in run:
            for rank, (item, score) in enumerate(zip(rl.items, rl.scores), 1):
                fh.write(f"{rl.query_key} Q0 {item_names[item]} {rank} {float(score)!r} {tag}\n")


def read_run(path) -> dict[str, list[str]]:
    out: dict[str, list[tuple[int, str]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            cols = line.split()
            if len(cols) != 6:
                raise RunFileError(f"{path}:{lineno}: expected 6 columns")
            key, _, item, rank = cols[0], cols[1], cols[2], int(cols[3])
            out.setdefault(key, []).append((rank, item))
    return {k: [item for _, item in sorted(v)] for k, v in out.items()}


def write_qrels(qrels: Mapping[str, Iterable[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in qrels:
            for item in sorted(qrels[key]):
                fh.write(f"{key} 0 {item} 1\n")


def read_qrels(path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            cols = line.split()
            if len(cols) != 4:
                raise RunFileError(f"{path}:{lineno}: expected 4 columns")
            if int(cols[3]) > 0:
                out.setdefault(cols[0], set()).add(cols[2])
            else:
                out.setdefault(cols[0], set())
    return out


def corpus_qrels(corpus: Corpus) -> dict[str, set[str]]:
    names = corpus.names["item"]
    return {key: {names[i] for i in rel} for key, (_, _, rel) in corpus.test_pairs().items()}


def run_to_names(run: Iterable[RankedList], corpus: Corpus) -> list[tuple[str, list[str]]]:
    names = corpus.names["item"]
    return [(rl.query_key, [names[i] for i in rl.items]) for rl in run]
