"""Desk-scale synthetic corpora with a planted brand-affinity structure.

Every user is loyal to one brand and every query names one category.  A
purchase for (user, query) is always the *flagship* item of the user's brand
in the query's category, i.e. the lowest-id item carrying both.  The ground
truth therefore fixes the ideal ranking exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, load_corpus


@dataclass(frozen=True)
class SynthSpec:
    users: int = 200
    items: int = 100
    brands: int = 10
    categories: int = 5
    queries: int = 20
    purchases_per_user: int = 8
    test_fraction: float = 0.3

    def validate(self):
        for name in ("users", "items", "brands", "categories", "queries"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.items < self.brands * self.categories:
            raise ValueError("need at least one item per (brand, category) pair")
        if self.purchases_per_user < 1:
            raise ValueError("purchases_per_user must be >= 1")


@dataclass(frozen=True)
class GroundTruth:
    user_brand: dict[str, str]
    query_category: dict[str, str]
    item_brand: dict[str, str]
    item_category: dict[str, str]

    def ideal_ranking(self, user: str, query: str, items: list[str]) -> list[str]:
        """Items sharing brand and category first, then brand, then category; ties by position."""
        b, c = self.user_brand[user], self.query_category[query]

        def key(pos_name):
            pos, name = pos_name
            return (-(2 * (self.item_brand[name] == b) + (self.item_category[name] == c)), pos)

        return [name for _, name in sorted(enumerate(items), key=key)]


def _item_attrs(spec: SynthSpec, i: int) -> tuple[int, int]:
    return i % spec.brands, (i // spec.brands) % spec.categories


def _flagship(spec: SynthSpec, brand: int, cat: int) -> int:
    return cat * spec.brands + brand


def generate_synthetic(spec: SynthSpec, seed: int, out_dir) -> tuple[Path, Path, Path]:
    """Write ``triples.tsv``, ``purchases.tsv`` and ``ground_truth.jsonl`` under ``out_dir``.

    Output is a pure function of ``(spec, seed)``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    user_brand = rng.integers(0, spec.brands, size=spec.users)
    query_cat = np.arange(spec.queries) % spec.categories
    query_text = [f"cat{query_cat[q]} kw{q}" for q in range(spec.queries)]

    n_test = min(max(int(round(spec.test_fraction * spec.queries)), 1), spec.queries - 1)
    test_queries = set(rng.permutation(spec.queries)[:n_test].tolist())

    purchases = []
    for u in range(spec.users):
        for q in rng.integers(0, spec.queries, size=spec.purchases_per_user):
            q = int(q)
            item = _flagship(spec, int(user_brand[u]), int(query_cat[q]))
            split = "test" if q in test_queries else "train"
            purchases.append((u, q, item, split))

    lines = []
    for i in range(spec.items):
        b, c = _item_attrs(spec, i)
        lines.append(f"item\ti{i}\tbrand\tbrand\tb{b}")
        lines.append(f"item\ti{i}\tcategory\tcategory\tc{c}")
    # co-purchase structure from train sessions only
    seen = set()
    by_user: dict[int, list[int]] = {}
    for u, _, item, split in purchases:
        if split == "train":
            by_user.setdefault(u, []).append(item)
    for u in range(spec.users):
        seq = by_user.get(u, [])
        for a, b in zip(seq, seq[1:]):
            if a != b and (a, b) not in seen:
                seen.add((a, b))
                lines.append(f"item\ti{a}\talso_bought\titem\ti{b}")
    n_combo = spec.brands * spec.categories
    for i in range(n_combo, spec.items):
        lines.append(f"item\ti{i}\talso_viewed\titem\ti{i % n_combo}")
    for c in range(spec.categories):
        for b in range(spec.brands):
            nxt = _flagship(spec, b, (c + 1) % spec.categories)
            lines.append(f"item\ti{_flagship(spec, b, c)}\tbought_together\titem\ti{nxt}")

    tpath = out / "triples.tsv"
    ppath = out / "purchases.tsv"
    gpath = out / "ground_truth.jsonl"
    with open(tpath, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(ppath, "w", encoding="utf-8", newline="\n") as fh:
        for u, q, item, split in purchases:
            fh.write(f"u{u}\t{query_text[q]}\ti{item}\t{split}\n")
    with open(gpath, "w", encoding="utf-8", newline="\n") as fh:
        for u in range(spec.users):
            fh.write(json.dumps({"user": f"u{u}", "brand": f"b{user_brand[u]}"}) + "\n")
        for q in range(spec.queries):
            fh.write(json.dumps({"query": query_text[q], "category": f"c{query_cat[q]}"}) + "\n")
    return tpath, ppath, gpath


def read_ground_truth(gt_path, corpus: Corpus) -> GroundTruth:
    """Load the JSON-lines ground truth; item attributes come from the corpus triples."""
    user_brand, query_cat = {}, {}
    with open(gt_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "user" in rec:
                user_brand[rec["user"]] = rec["brand"]
            else:
                query_cat[rec["query"]] = rec["category"]
    names = corpus.names
    item_brand = {names["item"][h]: names["brand"][t] for h, t in corpus.triples["brand"]}
    item_cat = {names["item"][h]: names["category"][t] for h, t in corpus.triples["category"]}
    return GroundTruth(user_brand, query_cat, item_brand, item_cat)


def synthetic_corpus(spec: SynthSpec, seed: int, out_dir) -> tuple[Corpus, GroundTruth]:
    tpath, ppath, gpath = generate_synthetic(spec, seed, out_dir)
    corpus = load_corpus(tpath, ppath)
    return corpus, read_ground_truth(gpath, corpus)
