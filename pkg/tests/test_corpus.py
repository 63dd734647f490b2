import pytest

from xpsearch.corpus import (
    ParseError, SchemaError, CorpusError, build_corpus, load_corpus, parse_purchases, parse_triples,
    split_corpus, write_corpus,
)
from xpsearch.retrieval import corpus_qrels, evaluate_run
from xpsearch.synth import SynthSpec, generate_synthetic

from conftest import write


def test_parse_triple_row(tmp_path):
    frag = parse_triples(write(tmp_path / "t.tsv", "item\ti1\talso_bought\titem\ti2\n"))
    assert frag.rows == [("item", "i1", "also_bought", "item", "i2")]


def test_unknown_relation_rejected(tmp_path):
    with pytest.raises(SchemaError):
        parse_triples(write(tmp_path / "t.tsv", "item\ti1\tlikes\titem\ti2\n"))


def test_schema_mismatch_rejected(tmp_path):
    with pytest.raises(SchemaError):
        parse_triples(write(tmp_path / "t.tsv", "item\ti1\tbrand\tcategory\tc1\n"))


def test_malformed_row_reports_line(tmp_path):
    with pytest.raises(ParseError) as err:
        parse_triples(write(tmp_path / "t.tsv", "item\ti1\tbrand\tbrand\tb1\nitem\ti2\tbrand\n"))
    assert err.value.lineno == 2


def test_duplicate_triples_counted(tmp_path):
    row = "item\ti1\tbrand\tbrand\tb1\n"
    frag = parse_triples(write(tmp_path / "t.tsv", row * 3))
    assert len(frag.rows) == 1 and frag.duplicates == 2


def test_parse_purchase_tokenizes(tmp_path):
    frag = parse_purchases(write(tmp_path / "p.tsv", "u1\tTablet Case\ti9\ttrain\n"))
    user, _, toks, item, split = frag.rows[0]
    assert (user, toks, item, split) == ("u1", ("tablet", "case"), "i9", "train")


def test_min_count_flags_empty_query(tmp_path):
    text = "u1\trare\ti1\ttrain\nu1\tcommon word\ti2\ttrain\nu2\tcommon\ti2\ttrain\n"
    corpus = build_corpus(parse_triples(write(tmp_path / "t.tsv", "item\ti1\tbrand\tbrand\tb\n")),
                          parse_purchases(write(tmp_path / "p.tsv", text), vocab_min_count=2))
    flags = [p.empty_query for p in corpus.purchases]
    assert flags == [True, False, False]


def test_same_query_two_items_kept(tmp_path, tiny_files):
    text = "u1\tq\ti1\ttrain\nu1\tq\ti2\ttrain\n"
    corpus = load_corpus(tiny_files[0], write(tmp_path / "p2.tsv", text))
    assert len(corpus.purchases) == 2


def test_unknown_split_and_empty_file(tmp_path):
    with pytest.raises(CorpusError):
        parse_purchases(write(tmp_path / "p.tsv", "u1\tq\ti1\tdev\n"))
    with pytest.raises(CorpusError):
        parse_purchases(write(tmp_path / "e.tsv", ""))


def test_split_count_and_determinism(tmp_path, tiny_files):
    text = "".join(f"u{k % 3}\tquery {k}\ti{k % 3 + 1}\n" for k in range(10))
    corpus = load_corpus(tiny_files[0], write(tmp_path / "p.tsv", text), seed=7)
    test_q = {p.query_id for p in corpus.test_purchases()}
    assert len(test_q) == 3
    again = split_corpus(corpus, 0.3, 7)
    assert again.purchases == corpus.purchases


def test_split_needs_two_queries(tmp_path, tiny_files):
    corpus = load_corpus(tiny_files[0], write(tmp_path / "p.tsv", "u1\tq\ti1\ttrain\n"))
    with pytest.raises(CorpusError):
        split_corpus(corpus, 0.3, 0)


def test_ids_dense_first_seen(tiny_corpus):
    assert tiny_corpus.names["item"] == ("i1", "i2", "i3")
    assert tiny_corpus.names["brand"] == ("acme", "zeta")
    assert tiny_corpus.ref("user", "u2").id == 1


def test_omega_train_only(tiny_corpus):
    u2 = tiny_corpus.ref("user", "u2").id
    i3 = tiny_corpus.ref("item", "i3").id
    assert tiny_corpus.omega["item"][u2].tolist() == [i3]   # the test purchase of i2 is excluded
    assert [tiny_corpus.name("brand", b) for b in tiny_corpus.omega["brand"][u2]] == ["zeta"]


def test_omega_unchanged_without_test_records(tmp_path, tiny_files):
    full = load_corpus(*tiny_files)
    lines = [l for l in tiny_files[1].read_text().splitlines() if not l.endswith("test")]
    trimmed = load_corpus(tiny_files[0], write(tmp_path / "p_train.tsv", "\n".join(lines) + "\n"))
    assert trimmed.names == full.names
    for d in full.omega:
        for a, b in zip(full.omega[d], trimmed.omega[d]):
            assert a.tolist() == b.tolist()


def test_roundtrip(tmp_path, tiny_corpus):
    write_corpus(tiny_corpus, tmp_path / "out")
    again = load_corpus(tmp_path / "out" / "triples.tsv", tmp_path / "out" / "purchases.tsv")
    assert again == tiny_corpus


def test_synthetic_roundtrip_and_bytes(tmp_path):
    spec = SynthSpec(users=20, items=12, brands=3, categories=2, queries=6)
    a = generate_synthetic(spec, 4, tmp_path / "a")
    b = generate_synthetic(spec, 4, tmp_path / "b")
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    corpus = load_corpus(a[0], a[1])
    write_corpus(corpus, tmp_path / "c")
    assert load_corpus(tmp_path / "c" / "triples.tsv", tmp_path / "c" / "purchases.tsv") == corpus


def test_synthetic_users_single_brand(synth):
    corpus, gt = synth
    assert corpus.n_users == 200
    brand_of = {int(h): int(t) for h, t in corpus.triples["brand"]}
    per_user = {}
    for p in corpus.purchases:
        per_user.setdefault(p.user, set()).add(brand_of[p.item])
    assert all(len(s) == 1 for s in per_user.values())


def test_synthetic_oracle_mrr_is_one(synth):
    corpus, gt = synth
    items = list(corpus.names["item"])
    run = []
    for key, (u, q, _) in corpus.test_pairs().items():
        run.append((key, gt.ideal_ranking(corpus.name("user", u), corpus.queries[q], items)[:100]))
    assert evaluate_run(run, corpus_qrels(corpus)).means["mrr"] == 1.0


def test_synthetic_validation():
    with pytest.raises(ValueError):
        SynthSpec(users=1).validate()
