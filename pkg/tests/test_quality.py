import math

import numpy as np
import pytest

from xpsearch.corpus import load_corpus
from xpsearch.explain import Explanation, ExplanationGroup, PathSpec
from xpsearch.quality import (
    FEATURE_LENGTH, FEATURE_NAMES, AssociationStats, Case, GroupContext, build_group_vector, build_pair_dataset,
    entity_feature_matrix, entropy, feature_exist_confidence, feature_existence_rate, feature_iif, feature_iuf,
    feature_pmi, mirror_label, read_feature_file, read_labels, read_manifest, to_mie_first, write_feature_file,
    write_manifest,
)

from conftest import TINY_TRIPLES, write


@pytest.fixture
def stats(tiny_corpus):
    return AssociationStats(tiny_corpus)


def brand_id(corpus, name):
    return corpus.ref("brand", name).id


def test_iuf_hundred_users(tmp_path):
    # 9 of 100 users buy the acme item
    rows = [f"u{k}\tq{k}\t{'i1' if k < 9 else 'i3'}\ttrain\n" for k in range(100)]
    corpus = load_corpus(write(tmp_path / "t.tsv", TINY_TRIPLES), write(tmp_path / "p.tsv", "".join(rows)))
    st = AssociationStats(corpus)
    assert feature_iuf("brand", brand_id(corpus, "acme"), st) == pytest.approx(math.log(10), abs=1e-12)
    assert feature_iuf("brand", brand_id(corpus, "zeta"), st) == pytest.approx(math.log(100 / 92))
    # an item no one bought
    assert feature_iuf("item", corpus.ref("item", "i2").id, st) == pytest.approx(math.log(100))


def test_iuf_every_user_negative(tiny_corpus, stats):
    # every tiny user bought some "cases" item in train
    assert feature_iuf("category", tiny_corpus.ref("category", "cases").id, stats) < 0


def test_iif_counts_items(tiny_corpus, stats):
    acme = brand_id(tiny_corpus, "acme")
    assert feature_iif("brand", acme, stats) == pytest.approx(math.log(3 / 3))
    assert feature_iif("brand", brand_id(tiny_corpus, "zeta"), stats) == pytest.approx(math.log(3 / 2))


def test_pmi_symmetric(tiny_corpus, stats):
    a, e = ("user", 0), ("brand", brand_id(tiny_corpus, "acme"))
    assert feature_pmi(a, e, stats) == feature_pmi(e, a, stats)


def test_pmi_exclusive_pair(tmp_path):
    # i4 is never bought, so its only association record is (i4, acme)
    triples = "item\ti1\tbrand\tbrand\tacme\nitem\ti2\tbrand\tbrand\tzeta\nitem\ti4\tbrand\tbrand\tacme\n"
    purchases = "u1\tq\ti1\ttrain\nu2\tq\ti2\ttrain\nu2\tr\ti1\ttrain\n"
    corpus = load_corpus(write(tmp_path / "t.tsv", triples), write(tmp_path / "p.tsv", purchases))
    st = AssociationStats(corpus)
    # counting script: (u,i) x3, (u,brand) x3, (i,brand) x3
    n = 9
    a, e = ("item", corpus.ref("item", "i4").id), ("brand", brand_id(corpus, "acme"))
    ce = 4  # acme meets u1, u2 (both via i1), i1 and i4
    assert st.total == n and st.marginal[e] == ce
    assert st.marginal[a] == st.count(a, e) == 1
    assert feature_pmi(a, e, st) == pytest.approx(math.log(n / (ce + 1)), abs=1e-12)


def test_entropy_examples():
    assert entropy([5, 5, 5, 5]) == pytest.approx(math.log(4))
    assert entropy([7]) == 0.0
    assert entropy([3, 1]) == pytest.approx(0.5623, abs=5e-5)
    assert entropy([]) == 0.0


def path_expl(ids, scores, etype="brand"):
    p = PathSpec(("search_purchase", "brand"), ("brand",), "brand") if etype == "brand" else \
        PathSpec(("search_purchase",), ("also_bought",), "item")
    return Explanation("path", etype, list(ids), [str(i) for i in ids], scores[0], "t", path=p,
                       entity_scores=list(scores))


def test_exist_confidence():
    assert feature_exist_confidence(path_expl([0], [-2.31])).tolist() == [-2.31]
    mie = Explanation("attention_domain", "brand", [0, 1], ["a", "b"], 0.5, "t", domain="brand")
    assert feature_exist_confidence(mie).tolist() == [1.0, 1.0]


def test_existence_rate(tiny_corpus):
    u1 = tiny_corpus.ref("user", "u1").id
    i3 = tiny_corpus.ref("item", "i3").id
    acme, zeta = brand_id(tiny_corpus, "acme"), brand_id(tiny_corpus, "zeta")
    # acme is u1's brand; zeta is i3's brand
    assert feature_existence_rate(path_expl([acme, zeta], [-1, -2]), u1, i3, tiny_corpus) == 1.0
    # for item i1 neither u1's omega nor i1's triples mention zeta
    i1 = tiny_corpus.ref("item", "i1").id
    assert feature_existence_rate(path_expl([acme, zeta], [-1, -2]), u1, i1, tiny_corpus) == 0.5
    pop = Explanation("attention_popularity", None, [], [], 0.3, "t")
    assert feature_existence_rate(pop, u1, i1, tiny_corpus) == 1.0


def test_entity_matrix_aggregates(tiny_corpus, stats):
    expl = path_expl([0, 1, 2], [-1.0, -2.0, -4.5], etype="item")
    m = entity_feature_matrix(expl, 0, 1, stats)
    assert m.shape == (3, 7)
    group = ExplanationGroup("MAE", [expl])
    vec = build_group_vector(group, GroupContext(0, 1, 0.5, -1.0), stats)
    conf = FEATURE_NAMES.index("slot1_exist_confidence_max")
    assert vec[conf:conf + 3].tolist() == [-1.0, -4.5, -2.5]


def test_group_vector_layout(tiny_corpus, stats):
    assert FEATURE_LENGTH == 68 == len(FEATURE_NAMES)
    empty = build_group_vector(None, GroupContext(0, 1, 0.25, -3.0), stats)
    assert empty[:-2].tolist() == [0.0] * 66 and empty[-2:].tolist() == [0.25, -3.0]
    group = ExplanationGroup("MAE", [path_expl([0], [-1.0]), path_expl([1], [-2.0])])
    ctx = GroupContext(0, 1, 0.5, -1.0)
    a, b = build_group_vector(group, ctx, stats), build_group_vector(group, ctx, stats)
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
    flags = [a[FEATURE_NAMES.index(f"slot{s}_present")] for s in (1, 2, 3)]
    assert flags == [1.0, 1.0, 0.0]


def make_cases(n, rng):
    labels = ("first", "second", "equal", "none")
    return [Case(f"c{k}", rng.normal(size=FEATURE_LENGTH), rng.normal(size=FEATURE_LENGTH),
                 {a: labels[rng.integers(4)] for a in ("informativeness", "usefulness", "satisfaction")})
            for k in range(n)]


def test_pair_dataset_mirrors():
    cases = make_cases(101, np.random.default_rng(0))
    pairs = build_pair_dataset(cases)
    for aspect in ("informativeness", "usefulness", "satisfaction"):
        assert sum(p.aspect == aspect for p in pairs) == 202
    fwd, bwd = pairs[0], pairs[1]
    assert np.array_equal(fwd.features[:FEATURE_LENGTH], bwd.features[FEATURE_LENGTH:])
    assert bwd.label == mirror_label(fwd.label)
    assert mirror_label("first") == "second" and mirror_label("equal") == "equal"


def test_pair_dataset_errors():
    c = make_cases(1, np.random.default_rng(1))[0]
    del c.labels["usefulness"]
    with pytest.raises(KeyError):
        build_pair_dataset([c])
    c.labels["usefulness"] = "maybe"
    with pytest.raises(ValueError):
        build_pair_dataset([c])


def test_feature_file_roundtrip(tmp_path):
    pairs = build_pair_dataset(make_cases(3, np.random.default_rng(2)))
    write_feature_file(pairs, tmp_path / "f.csv")
    back = read_feature_file(tmp_path / "f.csv")
    assert [(p.case_id, p.aspect, p.label) for p in back] == [(p.case_id, p.aspect, p.label) for p in pairs]
    assert all(np.array_equal(a.features, b.features) for a, b in zip(back, pairs))


def test_manifest_and_labels(tmp_path):
    write_manifest([("c1", "u1", "q", "i1", "MAE", "MIE")], tmp_path / "m.csv")
    manifest = read_manifest(tmp_path / "m.csv")
    assert to_mie_first("A", manifest["c1"]) == "second"
    assert to_mie_first("B", manifest["c1"]) == "first"
    assert to_mie_first("none", manifest["c1"]) == "none"
    write(tmp_path / "l.csv", "case_id,aspect,worker_id,label\nc1,usefulness,w1,A\nc1,usefulness,w2,equal\n")
    assert read_labels(tmp_path / "l.csv") == {("c1", "usefulness"): ["A", "equal"]}
    write(tmp_path / "bad.csv", "case_id,aspect,worker_id,label\nc1,usefulness,w1,C\n")
    with pytest.raises(ValueError):
        read_labels(tmp_path / "bad.csv")
