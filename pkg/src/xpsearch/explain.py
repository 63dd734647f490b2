"""Search explanations.

Model-agnostic (MAE): soft-matched knowledge-graph paths between the
user-query pair and the item, scored on a trained vanilla DREM.
Model-intrinsic (MIE): attention weights of DREM-HGN.
Both kinds are rendered through one template table.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import hgn
from .corpus import DOMAINS, KG_RELATIONS, SCHEMA, Corpus
from .model import encode_query
from .store import EmbeddingStore

MAX_GROUP = 3
MAX_ENTITIES = 3
DEFAULT_GAMMA = 1.0

DEFAULT_TEMPLATES = {
    "T1": 'This product was retrieved because it is frequently {relation_phrase} with products '
          'retrieved by the query "{query}"[, such as {entities}].',
    "T2": "This product was retrieved [{percent}% ]because the user often buys products with "
          "{domain} such as {entities}.",
    "T3": "This product was retrieved {percent}% because of its popularity under the query.",
    "rel.search_purchase": "purchased",
    "rel.also_bought": "also bought",
    "rel.also_viewed": "also viewed",
    "rel.bought_together": "bought together",
    "rel.brand": "sold under the same brand",
    "rel.category": "listed in the same category",
    "domain.item": "items",
    "domain.brand": "brands",
    "domain.category": "categories",
}

_PLACEHOLDER = re.compile(r"\{(\w+)\}")
_OPTIONAL = re.compile(r"\[([^\[\]]*)\]")


class Templates:
    """Template and phrase table; file lines are ``id<TAB>text``, ``#`` comments."""

    def __init__(self, entries: dict[str, str] | None = None):
        self.entries = dict(DEFAULT_TEMPLATES)
        if entries:
            self.entries.update(entries)

    @classmethod
    def from_file(cls, path) -> "Templates":
        entries = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected id<TAB>text")
            key, text = line.split("\t", 1)
            entries[key.strip()] = text
        return cls(entries)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for k, v in self.entries.items():
                fh.write(f"{k}\t{v}\n")

    def phrase(self, kind: str, key: str) -> str:
        return self.entries.get(f"{kind}.{key}", key.replace("_", " "))

    def render(self, template_id: str, **values) -> str:
        """Fill placeholders; a ``[...]`` segment is dropped unless all its placeholders have values."""
        text = self.entries[template_id]
        present = {k: v for k, v in values.items() if v is not None and v != ""}

        def optional(m):
            seg = m.group(1)
            needed = _PLACEHOLDER.findall(seg)
            return seg if all(n in present for n in needed) else ""

        text = _OPTIONAL.sub(optional, text)
        return _PLACEHOLDER.sub(lambda m: str(present.get(m.group(1), "")), text)


def _join_entities(names: Sequence[str]) -> str:
    names = list(names)
    if len(names) <= 1:
        return "".join(names)
    return ", ".join(names[:-1]) + " and " + names[-1]


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class PathSpec:
    """Relation walks from the user (starting with search_purchase) and from the item."""

    user_side: tuple[str, ...]
    item_side: tuple[str, ...]
    entity_type: str

    @property
    def j(self) -> int:
        # hops beyond search_purchase
        return len(self.user_side) - 1

    @property
    def m(self) -> int:
        return len(self.item_side)

    @property
    def length(self) -> int:
        return self.j + self.m

    def type_checks(self) -> bool:
        return _walk("user", self.user_side) == self.entity_type == _walk("item", self.item_side) \
            and self.user_side[:1] == ("search_purchase",)

    def meeting_relation(self) -> str:
        """The relation whose tail is the meeting entity."""
        if self.j:
            return self.user_side[-1]
        if self.m:
            return self.item_side[-1]
        return "search_purchase"

    def label(self) -> str:
        return f"{','.join(self.user_side)}|{','.join(self.item_side)}"


@dataclass
class InferencePath:
    path: PathSpec
    entities: list[int]
    entity_scores: list[float]

    @property
    def score(self) -> float:
        return self.entity_scores[0]


@dataclass
class Explanation:
    source: str                      # path | attention_domain | attention_popularity
    entity_type: str | None
    entity_ids: list[int]
    entities: list[str]
    score: float
    text: str
    relations: tuple[str, ...] = ()
    path: PathSpec | None = None
    domain: str | None = None
    weight_percent: int | None = None
    entity_scores: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "source": self.source,
            "entity_type": self.entity_type,
            "entities": self.entities,
            "entity_ids": [int(i) for i in self.entity_ids],
            "entity_scores": [float(s) for s in self.entity_scores],
            "score": float(self.score),
            "text": self.text,
            "relations": list(self.relations),
            "domain": self.domain,
            "weight_percent": self.weight_percent,
        }
        if self.path is not None:
            d["path"] = {"user_side": list(self.path.user_side), "item_side": list(self.path.item_side),
                         "entity_type": self.path.entity_type}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        p = d.get("path")
        path = PathSpec(tuple(p["user_side"]), tuple(p["item_side"]), p["entity_type"]) if p else None
        return cls(
            source=d["source"], entity_type=d["entity_type"], entity_ids=[int(i) for i in d["entity_ids"]],
            entities=list(d["entities"]), score=float(d["score"]), text=d["text"],
            relations=tuple(d.get("relations", ())), path=path, domain=d.get("domain"),
            weight_percent=d.get("weight_percent"), entity_scores=[float(s) for s in d.get("entity_scores", [])],
        )


@dataclass
class ExplanationGroup:
    kind: str  # MAE | MIE
    explanations: list[Explanation]
    log_purchase_prob: float | None = None
    mrr: float | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "explanations": [e.to_dict() for e in self.explanations],
                "log_purchase_prob": self.log_purchase_prob, "mrr": self.mrr}

    @classmethod
    def from_dict(cls, d: dict) -> "ExplanationGroup":
        return cls(d["kind"], [Explanation.from_dict(e) for e in d["explanations"]],
                   d.get("log_purchase_prob"), d.get("mrr"))


# ---------------------------------------------------------------------------
# path enumeration and soft matching


def _walk(start: str, relations: Sequence[str]) -> str | None:
    cur = start
    for r in relations:
        head, tail = SCHEMA[r]
        if head != cur:
            return None
        cur = tail
    return cur


def _walks(start: str, max_len: int) -> list[tuple[tuple[str, ...], str]]:
    out = [((), start)]
    frontier = [((), start)]
    for _ in range(max_len):
        nxt = []
        for rels, cur in frontier:
            for r in KG_RELATIONS:
                if SCHEMA[r][0] == cur:
                    nxt.append((rels + (r,), SCHEMA[r][1]))
        out.extend(nxt)
        frontier = nxt
    return out


def enumerate_paths(max_len_per_side: int = 2) -> list[PathSpec]:
    """All schema-valid path pairs with at most ``max_len_per_side`` KG hops per side."""
    if max_len_per_side not in (1, 2):
        raise ValueError("max_len_per_side must be 1 or 2")
    user_walks = [(("search_purchase",) + rels, t) for rels, t in _walks("item", max_len_per_side)]
    item_walks = _walks("item", max_len_per_side)
    paths = []
    for (us, ut), (its, it) in itertools.product(user_walks, item_walks):
        if ut == it:
            paths.append(PathSpec(us, its, ut))
    return sorted(set(paths), key=lambda p: (p.length, p.label()))


def _relation_vec(store: EmbeddingStore, rel: str) -> np.ndarray:
    return store["relation"][KG_RELATIONS.index(rel)]


def path_endpoints(path: PathSpec, user: int, words, item: int, store: EmbeddingStore):
    """``e_u = u + q + sum(user-side relations)``, ``e_i = i + sum(item-side relations)``."""
    e_u = store["user"][user] + encode_query(words, store)
    for r in path.user_side[1:]:
        e_u = e_u + _relation_vec(store, r)
    e_i = store["item"][item].copy()
    for r in path.item_side:
        e_i = e_i + _relation_vec(store, r)
    return e_u, e_i


def soft_match_scores(path: PathSpec, user: int, words, item: int, store: EmbeddingStore,
                      gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Soft matching score of every entity of the meeting type.

    Each side is a log-softmax over the meeting entity space whose numerator
    carries a ``-gamma * hops`` penalty and whose normaliser does not.
    """
    E = store[path.entity_type]
    if E.shape[0] == 0:
        raise ValueError("empty meeting entity space")
    e_u, e_i = path_endpoints(path, user, words, item, store)
    su, si = E @ e_u, E @ e_i
    lse = np.logaddexp.reduce
    return (su - gamma * path.j - lse(su)) + (si - gamma * path.m - lse(si))


def soft_match(path: PathSpec, entity: int, user: int, words, item: int, store: EmbeddingStore,
               gamma: float = DEFAULT_GAMMA) -> float:
    return float(soft_match_scores(path, user, words, item, store, gamma)[entity])


def observed_entities(corpus: Corpus, etype: str) -> np.ndarray:
    """Entities of ``etype`` that occur in some triple or train purchase."""
    seen = np.zeros(corpus.count(etype), dtype=bool)
    for rel, arr in corpus.triples.items():
        ht, tt = SCHEMA[rel]
        if ht == etype:
            seen[arr[:, 0]] = True
        if tt == etype:
            seen[arr[:, 1]] = True
    if etype == "item":
        for p in corpus.train_purchases():
            seen[p.item] = True
    return seen


def top_paths(user: int, words, item: int, store: EmbeddingStore, corpus: Corpus,
              gamma: float = DEFAULT_GAMMA, topk: int = MAX_GROUP, max_len: int = 2,
              paths: Sequence[PathSpec] | None = None) -> list[InferencePath]:
    """The ``topk`` paths whose best observed meeting entity scores highest.

    Ties break by path length, then entity id.  The explained item never
    serves as its own meeting entity.
    """
    if topk < 1:
        raise ValueError("topk must be >= 1")
    paths = list(paths) if paths is not None else enumerate_paths(max_len)
    mask_cache = {}
    ranked = []
    for pidx, p in enumerate(paths):
        scores = soft_match_scores(p, user, words, item, store, gamma)
        if p.entity_type not in mask_cache:
            mask_cache[p.entity_type] = observed_entities(corpus, p.entity_type)
        ok = mask_cache[p.entity_type].copy()
        if p.entity_type == "item":
            ok[item] = False
        ents = np.flatnonzero(ok)
        if ents.size == 0:
            continue
        order = ents[np.lexsort((ents, -scores[ents]))][:MAX_ENTITIES]
        ranked.append((-float(scores[order[0]]), p.length, int(order[0]), pidx,
                       InferencePath(p, order.tolist(), scores[order].tolist())))
    ranked.sort(key=lambda r: r[:4])
    return [r[-1] for r in ranked[:topk]]


# ---------------------------------------------------------------------------
# rendering


def _characteristic_relation(path: PathSpec) -> str:
    extra = path.user_side[1:] + path.item_side
    return extra[0] if extra else "search_purchase"


def render_path(ip: InferencePath, corpus: Corpus, query_text: str, templates: Templates) -> Explanation:
    p = ip.path
    names = [corpus.name(p.entity_type, e) for e in ip.entities]
    if p.entity_type == "item":
        text = templates.render(
            "T1",
            relation_phrase=templates.phrase("rel", _characteristic_relation(p)),
            query=query_text,
            entities=_join_entities(names),
        )
    else:
        text = templates.render("T2", domain=templates.phrase("domain", p.entity_type),
                                entities=_join_entities(names))
    return Explanation(
        source="path", entity_type=p.entity_type, entity_ids=list(ip.entities), entities=names,
        score=ip.score, text=text, relations=p.user_side + p.item_side, path=p,
        entity_scores=list(ip.entity_scores),
    )


def explain_mae(user: int, query_id: int, item: int, store: EmbeddingStore, corpus: Corpus,
                gamma: float = DEFAULT_GAMMA, topk: int = MAX_GROUP, max_len: int = 2,
                score_floor: float = -math.inf, templates: Templates | None = None) -> ExplanationGroup:
    """Top soft-matched paths rendered as a model-agnostic group.

    Paths whose rendered text repeats a better-scoring one are skipped.  When
    no path scores above ``score_floor`` the group falls back to the single
    direct-match path ``(search_purchase | -)``.
    """
    if store.model_kind != "drem":
        raise ValueError("model-agnostic explanations need a vanilla DREM store")
    templates = templates or Templates()
    words = corpus.query_words(query_id)
    qtext = corpus.queries[query_id]
    limit = min(topk, MAX_GROUP)
    out, seen = [], set()
    for ip in top_paths(user, words, item, store, corpus, gamma, len(enumerate_paths(max_len)), max_len):
        if len(out) == limit or ip.score <= score_floor:
            break
        ex = render_path(ip, corpus, qtext, templates)
        if ex.text not in seen:
            seen.add(ex.text)
            out.append(ex)
    if not out:
        direct = PathSpec(("search_purchase",), (), "item")
        out = [render_path(ip, corpus, qtext, templates)
               for ip in top_paths(user, words, item, store, corpus, gamma, 1, max_len, paths=[direct])]
    return ExplanationGroup("MAE", out)


def percent(weight: float) -> int:
    """Round half up to an integer percentage."""
    return int(math.floor(100.0 * weight + 0.5))


def mie_from_trace(trace: hgn.AttentionTrace, corpus: Corpus, templates: Templates | None = None,
                   topk: int = MAX_GROUP) -> ExplanationGroup:
    """Rank non-empty domains and the popularity gate by top-level attention."""
    templates = templates or Templates()
    options = []
    for k, d in enumerate(DOMAINS):
        if len(trace.entity_ids[d]):
            options.append((-trace.domain_weights[d], k, d))
    options.append((-trace.zero_weight, len(DOMAINS), None))
    options.sort()
    out = []
    for negw, _, d in options[:topk]:
        w = -negw
        pct = percent(w)
        if d is None:
            out.append(Explanation(
                source="attention_popularity", entity_type=None, entity_ids=[], entities=[], score=w,
                text=templates.render("T3", percent=pct), weight_percent=pct,
            ))
            continue
        ids = np.asarray(trace.entity_ids[d])
        ws = np.asarray(trace.entity_weights[d])
        order = np.lexsort((ids, -ws))[:MAX_ENTITIES]
        names = [corpus.name(d, int(ids[o])) for o in order]
        out.append(Explanation(
            source="attention_domain", entity_type=d, entity_ids=[int(ids[o]) for o in order], entities=names,
            score=w, text=templates.render("T2", percent=pct, domain=templates.phrase("domain", d),
                                           entities=_join_entities(names)),
            domain=d, weight_percent=pct, entity_scores=[float(ws[o]) for o in order],
        ))
    return ExplanationGroup("MIE", out)


def explain_mie(user: int, query_id: int, store: EmbeddingStore, corpus: Corpus,
                templates: Templates | None = None, cap: int = hgn.DEFAULT_OMEGA_CAP):
    """Model-intrinsic group plus the trace it was read from."""
    if store.model_kind != "drem_hgn":
        raise ValueError("model-intrinsic explanations need a DREM-HGN store")
    q = encode_query(corpus.query_words(query_id), store)
    _, trace = hgn.user_vector(user, q, corpus, store, cap)
    return mie_from_trace(trace, corpus, templates), trace


def explanation_record(corpus: Corpus, user: int, query_id: int, item: int,
                       groups: dict[str, ExplanationGroup]) -> str:
    rec = {
        "user": corpus.name("user", user),
        "query": corpus.queries[query_id],
        "item": corpus.name("item", item),
        "groups": {k: g.to_dict() for k, g in groups.items()},
    }
    return json.dumps(rec, sort_keys=True)
