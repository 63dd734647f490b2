"""Explanation-group features, pairwise preference datasets and label files."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import SCHEMA, Corpus
from .explain import Explanation, ExplanationGroup

ENTITY_FEATURES = (
    "exist_confidence",
    "existence_rate",
    "entity_iuf",
    "entity_iif",
    "user_entity_mutual_info",
    "item_entity_mutual_info",
    "relation_info_entropy",
)
AGGREGATES = ("max", "min", "mean")
GROUP_FEATURES = ("mrr", "log_purchase_prob")
N_SLOTS = 3


def feature_layout() -> list[str]:
    names = []
    for s in range(1, N_SLOTS + 1):
        names.append(f"slot{s}_present")
        for f in ENTITY_FEATURES:
            for a in AGGREGATES:
                names.append(f"slot{s}_{f}_{a}")
    names.extend(GROUP_FEATURES)
    return names


FEATURE_NAMES = tuple(feature_layout())
FEATURE_LENGTH = len(FEATURE_NAMES)  # 3 * (1 + 7 * 3) + 2 = 68

ASPECTS = ("informativeness", "usefulness", "satisfaction")
PAIR_LABELS = ("first", "second", "equal", "none")
_MIRROR = {"first": "second", "second": "first", "equal": "equal", "none": "none"}


# ---------------------------------------------------------------------------
# corpus statistics


class AssociationStats:
    """Co-occurrence counts over observed data (train purchases and KG triples).

    One association record is added per train purchase ``(user, item)``, per
    triple ``(head, tail)``, and per train purchase crossed with each brand or
    category triple of the purchased item ``(user, brand|category)``.
    """

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.n_users = corpus.n_users
        self.n_items = corpus.n_items
        self.pair = Counter()
        self.marginal = Counter()
        self.users_of = defaultdict(set)
        self.items_of = defaultdict(set)
        attrs = defaultdict(list)
        for rel in ("brand", "category"):
            for h, t in corpus.triples[rel]:
                attrs[int(h)].append((rel, int(t)))
        self.purchase_counts = Counter()  # (user, item) -> count
        for p in corpus.train_purchases():
            u, i = ("user", p.user), ("item", p.item)
            self._add(u, i)
            self.purchase_counts[(p.user, p.item)] += 1
            for rel, t in attrs[p.item]:
                self._add(u, (rel, t))
        for rel, arr in corpus.triples.items():
            ht, tt = SCHEMA[rel]
            for h, t in arr:
                self._add((ht, int(h)), (tt, int(t)))
        self.total = sum(self.pair.values())
        self._heads = defaultdict(list)  # (relation, tail) -> heads
        for rel, arr in corpus.triples.items():
            for h, t in arr:
                self._heads[(rel, int(t))].append(int(h))

    def _add(self, a, b):
        key = (a, b) if a <= b else (b, a)
        self.pair[key] += 1
        self.marginal[a] += 1
        self.marginal[b] += 1
        for x, y in ((a, b), (b, a)):
            if y[0] == "user":
                self.users_of[x].add(y[1])
            elif y[0] == "item":
                self.items_of[x].add(y[1])

    def count(self, a, b) -> int:
        key = (a, b) if a <= b else (b, a)
        return self.pair.get(key, 0)

    def users_holding(self, relation: str, entity: int) -> Counter:
        """Purchase counts per user over items linked to ``entity`` by ``relation``."""
        heads = [entity] if relation == "search_purchase" else self._heads.get((relation, entity), [])
        out = Counter()
        heads = set(heads)
        for (u, i), c in self.purchase_counts.items():
            if i in heads:
                out[u] += c
        return out


def feature_iuf(entity_type: str, entity: int, stats: AssociationStats) -> float:
    return math.log(stats.n_users / (1 + len(stats.users_of.get((entity_type, entity), ()))))


def feature_iif(entity_type: str, entity: int, stats: AssociationStats) -> float:
    return math.log(stats.n_items / (1 + len(stats.items_of.get((entity_type, entity), ()))))


def feature_pmi(a: tuple[str, int], e: tuple[str, int], stats: AssociationStats) -> float:
    """``ln(N (c(a,e)+1) / ((c(a)+1)(c(e)+1)))``; symmetric in its arguments."""
    a, e = tuple(a), tuple(e)
    n = max(stats.total, 1)
    return math.log(n * (stats.count(a, e) + 1) / ((stats.marginal[a] + 1) * (stats.marginal[e] + 1)))


def entropy(counts: Iterable[float]) -> float:
    c = np.asarray([x for x in counts if x > 0], dtype=float)
    if c.size == 0:
        return 0.0
    p = c / c.sum()
    return float(-(p * np.log(p)).sum())


def feature_relation_entropy(relation: str, entity: int, stats: AssociationStats) -> float:
    return entropy(stats.users_holding(relation, entity).values())


def explanation_relation(expl: Explanation) -> str:
    if expl.path is not None:
        return expl.path.meeting_relation()
    return {"item": "search_purchase", "brand": "brand", "category": "category"}.get(expl.domain, "search_purchase")


def feature_exist_confidence(expl: Explanation) -> np.ndarray:
    """Per-entity model confidence: the soft-match score for paths, 1 for attention."""
    if expl.source == "path":
        return np.asarray(expl.entity_scores if expl.entity_scores else [expl.score], dtype=float)
    return np.ones(max(len(expl.entity_ids), 1))


def entity_observed(expl: Explanation, user: int, item: int, corpus: Corpus) -> np.ndarray:
    """Per-entity indicator that the explanation's (relation, entity) claim holds in the data.

    An entity counts as observed when it is among the user's associated
    entities of its type, or is linked to the explained item by a triple.
    """
    etype = expl.entity_type
    out = []
    for e in expl.entity_ids:
        ok = etype in corpus.omega and e in set(corpus.omega[etype][user].tolist())
        if not ok:
            for rel, arr in corpus.triples.items():
                ht, tt = SCHEMA[rel]
                if ht == "item" and tt == etype and np.any((arr[:, 0] == item) & (arr[:, 1] == e)):
                    ok = True
                    break
                if tt == "item" and ht == etype and np.any((arr[:, 1] == item) & (arr[:, 0] == e)):
                    ok = True
                    break
        out.append(1.0 if ok else 0.0)
    return np.asarray(out)


def feature_existence_rate(expl: Explanation, user: int, item: int, corpus: Corpus) -> float:
    if not expl.entity_ids:
        return 1.0
    return float(entity_observed(expl, user, item, corpus).mean())


def entity_feature_matrix(expl: Explanation, user: int, item: int, stats: AssociationStats) -> np.ndarray:
    """(n_entities, 7) per-entity features; an entity-free explanation yields one row."""
    corpus = stats.corpus
    if not expl.entity_ids:
        row = np.zeros(len(ENTITY_FEATURES))
        row[0] = 1.0 if expl.source != "path" else expl.score
        row[1] = 1.0
        return row[None, :]
    conf = feature_exist_confidence(expl)
    obs = entity_observed(expl, user, item, corpus)
    rel = explanation_relation(expl)
    et = expl.entity_type
    rows = []
    for k, e in enumerate(expl.entity_ids):
        rows.append([
            conf[k],
            obs[k],
            feature_iuf(et, e, stats),
            feature_iif(et, e, stats),
            feature_pmi(("user", user), (et, e), stats),
            feature_pmi(("item", item), (et, e), stats),
            feature_relation_entropy(rel, e, stats),
        ])
    return np.asarray(rows, dtype=float)


@dataclass
class GroupContext:
    user: int
    item: int
    mrr: float = 0.0
    log_purchase_prob: float = 0.0


def build_group_vector(group: ExplanationGroup | None, ctx: GroupContext, stats: AssociationStats) -> np.ndarray:
    """Fixed-layout vector following ``FEATURE_NAMES``; absent slots are zero."""
    vec = np.zeros(FEATURE_LENGTH)
    expls = group.explanations[:N_SLOTS] if group is not None else []
    width = 1 + len(ENTITY_FEATURES) * len(AGGREGATES)
    for s, expl in enumerate(expls):
        base = s * width
        vec[base] = 1.0
        m = entity_feature_matrix(expl, ctx.user, ctx.item, stats)
        agg = np.stack([m.max(axis=0), m.min(axis=0), m.mean(axis=0)], axis=1)  # (7, 3)
        vec[base + 1: base + width] = agg.reshape(-1)
    vec[-2] = ctx.mrr
    vec[-1] = ctx.log_purchase_prob
    if not np.all(np.isfinite(vec)):
        raise FloatingPointError("non-finite feature")
    return vec


# ---------------------------------------------------------------------------
# pairwise preference data


@dataclass(frozen=True)
class PreferencePair:
    case_id: str
    aspect: str
    order: str            # forward = MIE first, backward = MAE first
    features: np.ndarray
    label: str            # first | second | equal | none

    @property
    def target(self) -> int:
        return int(self.label == "first")


@dataclass
class Case:
    case_id: str
    mie: np.ndarray
    mae: np.ndarray
    labels: dict  # aspect -> label from the MIE-first point of view


def mirror_label(label: str) -> str:
    return _MIRROR[label]


def build_pair_dataset(cases: Sequence[Case], aspects: Sequence[str] = ASPECTS) -> list[PreferencePair]:
    """Two data points per case and aspect: ``MIE||MAE`` and ``MAE||MIE`` with mirrored labels."""
    out = []
    for c in cases:
        for a in aspects:
            if a not in c.labels:
                raise KeyError(f"case {c.case_id}: missing label for {a}")
            lab = c.labels[a]
            if lab not in PAIR_LABELS:
                raise ValueError(f"case {c.case_id}: bad label {lab!r}")
            out.append(PreferencePair(c.case_id, a, "forward", np.concatenate([c.mie, c.mae]), lab))
            out.append(PreferencePair(c.case_id, a, "backward", np.concatenate([c.mae, c.mie]), mirror_label(lab)))
    return out


def pair_header() -> list[str]:
    return ["case_id", "aspect", "order", "label"] + [f"a_{n}" for n in FEATURE_NAMES] + [f"b_{n}" for n in FEATURE_NAMES]


def write_feature_file(pairs: Sequence[PreferencePair], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(pair_header())
        for p in pairs:
            w.writerow([p.case_id, p.aspect, p.order, p.label] + [repr(float(x)) for x in p.features])


def read_feature_file(path) -> list[PreferencePair]:
    with open(path, encoding="utf-8", newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:4] != ["case_id", "aspect", "order", "label"]:
            raise ValueError(f"{path}: unexpected header")
        return [PreferencePair(row[0], row[1], row[2], np.array([float(x) for x in row[4:]]), row[3]) for row in r]


# ---------------------------------------------------------------------------
# crowd label files


MANIFEST_HEADER = ("case_id", "user", "query", "item", "group_a", "group_b")


def write_manifest(rows: Iterable[Sequence[str]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def read_manifest(path) -> dict[str, dict]:
    """``case_id,user,query,item,group_a,group_b`` with groups named MIE or MAE."""
    out = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if {row["group_a"], row["group_b"]} != {"MIE", "MAE"}:
                raise ValueError(f"case {row['case_id']}: groups must be MIE and MAE")
            out[row["case_id"]] = row
    return out


def read_labels(path) -> dict[tuple[str, str], list[str]]:
    """``case_id,aspect,worker_id,label`` -> annotations per (case, aspect)."""
    out: dict[tuple[str, str], list[str]] = defaultdict(list)
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            lab = row["label"]
            if lab not in ("A", "B", "equal", "none"):
                raise ValueError(f"bad label {lab!r}")
            if row["aspect"] not in ASPECTS:
                raise ValueError(f"bad aspect {row['aspect']!r}")
            out[(row["case_id"], row["aspect"])].append(lab)
    return dict(out)


def to_mie_first(label: str, manifest_row: dict) -> str:
    """Translate an anonymised A/B verdict into first (MIE) / second (MAE)."""
    if label in ("equal", "none"):
        return label
    winner = manifest_row["group_a"] if label == "A" else manifest_row["group_b"]
    return "first" if winner == "MIE" else "second"
