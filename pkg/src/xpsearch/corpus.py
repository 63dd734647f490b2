"""Heterogeneous product corpus: entity registries, KG triples and purchases.

Entities are identified by ``(entity_type, id)`` where ``id`` is a dense
integer assigned in first-seen file order.  The triples file is read before
the purchases file, so ids are reproducible for a given pair of inputs.
"""

from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

ENTITY_TYPES = ("user", "item", "word", "brand", "category")

# relation -> (head type, tail type)
SCHEMA = OrderedDict(
    [
        ("search_purchase", ("user", "item")),
        ("also_bought", ("item", "item")),
        ("also_viewed", ("item", "item")),
        ("bought_together", ("item", "item")),
        ("brand", ("item", "brand")),
        ("category", ("item", "category")),
    ]
)
# relations with a learned vector; search_purchase is the encoded query instead
KG_RELATIONS = tuple(r for r in SCHEMA if r != "search_purchase")

# knowledge domains attended by the gated user model
DOMAINS = ("item", "brand", "category")
SPLITS = ("train", "test")


class CorpusError(Exception):
    """Base class for corpus problems."""


class ParseError(CorpusError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class SchemaError(CorpusError):
    pass


class EntityRef(NamedTuple):
    entity_type: str
    id: int


class Triple(NamedTuple):
    head: EntityRef
    relation: str
    tail: EntityRef


@dataclass(frozen=True)
class PurchaseRecord:
    user: int
    query_id: int
    words: tuple[int, ...]
    item: int
    split: str | None
    empty_query: bool = False


# ---------------------------------------------------------------------------
# fragments produced by the parsers (names, not ids)


@dataclass
class TripleFragment:
    rows: list[tuple[str, str, str, str, str]] = field(default_factory=list)
    duplicates: int = 0


@dataclass
class PurchaseFragment:
    # (user name, raw query text, kept tokens, item name, split)
    rows: list[tuple[str, str, tuple[str, ...], str, str | None]] = field(default_factory=list)
    vocabulary: dict[str, int] = field(default_factory=dict)


def parse_triples(path) -> TripleFragment:
    """Read a ``head_type head_id relation tail_type tail_id`` TSV file."""
    path = Path(path)
    frag = TripleFragment()
    seen = set()
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise ParseError(path, lineno, f"expected 5 tab-separated columns, got {len(cols)}")
            head_type, head_id, rel, tail_type, tail_id = cols
            if rel not in SCHEMA:
                raise SchemaError(f"{path}:{lineno}: unknown relation {rel!r}")
            if rel == "search_purchase":
                raise SchemaError(f"{path}:{lineno}: search_purchase rows belong in the purchases file")
            for t in (head_type, tail_type):
                if t not in ENTITY_TYPES:
                    raise SchemaError(f"{path}:{lineno}: unknown entity type {t!r}")
            if (head_type, tail_type) != SCHEMA[rel]:
                raise SchemaError(
                    f"{path}:{lineno}: relation {rel} expects {SCHEMA[rel][0]}->{SCHEMA[rel][1]}, "
                    f"got {head_type}->{tail_type}"
                )
            if not head_id or not tail_id:
                raise ParseError(path, lineno, "empty entity id")
            row = (head_type, head_id, rel, tail_type, tail_id)
            if row in seen:
                frag.duplicates += 1
                continue
            seen.add(row)
            frag.rows.append(row)
    return frag


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def parse_purchases(path, vocab_min_count: int = 1) -> PurchaseFragment:
    """Read ``user_id query_text item_id [split]`` rows.

    Words occurring fewer than ``vocab_min_count`` times are dropped; a record
    left with no words is kept and flagged as an empty query.
    """
    path = Path(path)
    raw = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ParseError(path, lineno, f"expected 3 or 4 tab-separated columns, got {len(cols)}")
            user, query, item = cols[:3]
            split = cols[3] if len(cols) == 4 else None
            if split is not None and split not in SPLITS:
                raise ParseError(path, lineno, f"unknown split tag {split!r}")
            if not user or not item:
                raise ParseError(path, lineno, "empty user or item id")
            raw.append((lineno, user, query, item, split))
    if not raw:
        raise ParseError(path, 0, "empty purchases file")
    has_split = {r[4] is not None for r in raw}
    if len(has_split) > 1:
        raise ParseError(path, raw[0][0], "split column present on some rows but not others")

    counts = Counter(w for r in raw for w in tokenize(r[2]))
    vocab = {w: c for w, c in counts.items() if c >= vocab_min_count}
    frag = PurchaseFragment(vocabulary=vocab)
    for _, user, query, item, split in raw:
        kept = tuple(w for w in tokenize(query) if w in vocab)
        frag.rows.append((user, " ".join(tokenize(query)), kept, item, split))
    return frag


# ---------------------------------------------------------------------------


class _Registry:
    def __init__(self):
        self.names = {t: [] for t in ENTITY_TYPES}
        self.index = {t: {} for t in ENTITY_TYPES}

    def add(self, etype, name):
        idx = self.index[etype]
        if name not in idx:
            idx[name] = len(self.names[etype])
            self.names[etype].append(name)
        return idx[name]


@dataclass(frozen=True, eq=False)
class Corpus:
    """Immutable, indexed corpus.

    ``omega[domain][user]`` lists the entities of ``domain`` associated with
    ``user`` through train purchases, oldest first, deduplicated so each entity
    sits at the position of its most recent association.
    """

    names: dict[str, tuple[str, ...]]
    index: dict[str, dict[str, int]]
    word_freq: np.ndarray
    triples: dict[str, np.ndarray]  # relation -> (n, 2) int array of (head, tail)
    triple_order: np.ndarray  # (n, 3) of (relation index into KG_RELATIONS, head, tail), file order
    duplicate_triples: int
    queries: tuple[str, ...]
    purchases: tuple[PurchaseRecord, ...]
    omega: dict[str, tuple[np.ndarray, ...]]

    # -- sizes -------------------------------------------------------------
    def count(self, etype: str) -> int:
        return len(self.names[etype])

    @property
    def n_users(self):
        return self.count("user")

    @property
    def n_items(self):
        return self.count("item")

    def sizes(self) -> dict[str, int]:
        return {t: self.count(t) for t in ENTITY_TYPES}

    # -- lookups -----------------------------------------------------------
    def ref(self, etype: str, name: str) -> EntityRef:
        return EntityRef(etype, self.index[etype][name])

    def name(self, etype: str, idx: int) -> str:
        return self.names[etype][idx]

    def iter_triples(self) -> Iterator[Triple]:
        for r, h, t in self.triple_order:
            rel = KG_RELATIONS[r]
            ht, tt = SCHEMA[rel]
            yield Triple(EntityRef(ht, int(h)), rel, EntityRef(tt, int(t)))

    def train_purchases(self) -> list[PurchaseRecord]:
        return [p for p in self.purchases if p.split == "train"]

    def test_purchases(self) -> list[PurchaseRecord]:
        return [p for p in self.purchases if p.split == "test"]

    def has_split(self) -> bool:
        return all(p.split is not None for p in self.purchases)

    def query_words(self, query_id: int) -> tuple[int, ...]:
        toks = self.queries[query_id].split()
        widx = self.index["word"]
        return tuple(widx[w] for w in toks if w in widx)

    def tails(self, relation: str, head: int) -> np.ndarray:
        arr = self.triples[relation]
        return arr[arr[:, 0] == head, 1]

    def query_key(self, user: int, query_id: int) -> str:
        return f"{self.names['user'][user]}::{query_id}"

    def test_pairs(self) -> dict[str, tuple[int, int, set[int]]]:
        """Map query key -> (user, query_id, relevant item ids) over the test split."""
        pairs: dict[str, tuple[int, int, set[int]]] = {}
        for p in self.test_purchases():
            key = self.query_key(p.user, p.query_id)
            if key not in pairs:
                pairs[key] = (p.user, p.query_id, set())
            pairs[key][2].add(p.item)
        return pairs

    # -- equality ----------------------------------------------------------
    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (
            self.names == other.names
            and np.array_equal(self.word_freq, other.word_freq)
            and np.array_equal(self.triple_order, other.triple_order)
            and self.queries == other.queries
            and self.purchases == other.purchases
        )

    __hash__ = None


def _omega(purchases: Iterable[PurchaseRecord], n_users: int, triples: dict[str, np.ndarray]):
    item_brand: dict[int, list[int]] = {}
    item_cat: dict[int, list[int]] = {}
    for h, t in triples["brand"]:
        item_brand.setdefault(int(h), []).append(int(t))
    for h, t in triples["category"]:
        item_cat.setdefault(int(h), []).append(int(t))

    ordered = {d: [OrderedDict() for _ in range(n_users)] for d in DOMAINS}

    def touch(od, key):
        od.pop(key, None)
        od[key] = None

    for p in purchases:
        if p.split != "train":
            continue
        touch(ordered["item"][p.user], p.item)
        for b in item_brand.get(p.item, ()):
            touch(ordered["brand"][p.user], b)
        for c in item_cat.get(p.item, ()):
            touch(ordered["category"][p.user], c)
    return {
        d: tuple(np.fromiter(od.keys(), dtype=np.int64, count=len(od)) for od in ordered[d])
        for d in DOMAINS
    }


def build_corpus(triples: TripleFragment, purchases: PurchaseFragment) -> Corpus:
    reg = _Registry()
    rel_rows: dict[str, list[tuple[int, int]]] = {r: [] for r in KG_RELATIONS}
    order = []
    for ht, hid, rel, tt, tid in triples.rows:
        h, t = reg.add(ht, hid), reg.add(tt, tid)
        rel_rows[rel].append((h, t))
        order.append((KG_RELATIONS.index(rel), h, t))

    query_ids: dict[str, int] = {}
    records = []
    for user, qtext, kept, item, split in purchases.rows:
        u = reg.add("user", user)
        words = tuple(reg.add("word", w) for w in kept)
        i = reg.add("item", item)
        if qtext not in query_ids:
            query_ids[qtext] = len(query_ids)
        records.append(PurchaseRecord(u, query_ids[qtext], words, i, split, empty_query=not words))

    word_freq = np.array([purchases.vocabulary[w] for w in reg.names["word"]], dtype=np.int64)
    tri = {r: np.array(rows, dtype=np.int64).reshape(-1, 2) for r, rows in rel_rows.items()}
    n_users = len(reg.names["user"])
    return Corpus(
        names={t: tuple(v) for t, v in reg.names.items()},
        index=reg.index,
        word_freq=word_freq,
        triples=tri,
        triple_order=np.array(order, dtype=np.int64).reshape(-1, 3),
        duplicate_triples=triples.duplicates,
        queries=tuple(query_ids),
        purchases=tuple(records),
        omega=_omega(records, n_users, tri),
    )


def split_corpus(corpus: Corpus, test_fraction: float, seed: int) -> Corpus:
    """Assign train/test by partitioning distinct query strings.

    ``round(test_fraction * n_queries)`` queries (at least one, at most
    ``n - 1``) become test queries; every purchase inherits its query's split.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n = len(corpus.queries)
    if n < 2:
        raise CorpusError("need at least 2 distinct queries to split")
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    rng = np.random.default_rng(seed)
    test = set(rng.permutation(n)[:n_test].tolist())
    purchases = tuple(
        replace(p, split="test" if p.query_id in test else "train") for p in corpus.purchases
    )
    return replace(corpus, purchases=purchases, omega=_omega(purchases, corpus.n_users, corpus.triples))


def load_corpus(triples_path, purchases_path, vocab_min_count: int = 1,
                test_fraction: float = 0.3, seed: int = 0) -> Corpus:
    """Parse both files; split by query when the purchases carry no split column."""
    corpus = build_corpus(parse_triples(triples_path), parse_purchases(purchases_path, vocab_min_count))
    if not corpus.has_split():
        corpus = split_corpus(corpus, test_fraction, seed)
    return corpus


def write_corpus(corpus: Corpus, directory) -> tuple[Path, Path]:
    """Emit ``triples.tsv`` and ``purchases.tsv`` that parse back to ``corpus``.

    Triples keep their original order so entity ids are reassigned identically.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tpath = directory / "triples.tsv"
    ppath = directory / "purchases.tsv"
    names = corpus.names
    with open(tpath, "w", encoding="utf-8", newline="\n") as fh:
        for tr in corpus.iter_triples():
            h, t = tr.head, tr.tail
            fh.write(f"{h.entity_type}\t{names[h.entity_type][h.id]}\t{tr.relation}\t"
                     f"{t.entity_type}\t{names[t.entity_type][t.id]}\n")
    with open(ppath, "w", encoding="utf-8", newline="\n") as fh:
        for p in corpus.purchases:
            cols = [names["user"][p.user], corpus.queries[p.query_id], names["item"][p.item]]
            if p.split is not None:
                cols.append(p.split)
            fh.write("\t".join(cols) + "\n")
    return tpath, ppath
