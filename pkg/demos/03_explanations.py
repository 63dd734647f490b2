"""
Two kinds of search explanations
================================

Post-hoc (model-agnostic): for a retrieved item, enumerate relation paths
that leave the user-query pair through the purchase relation and leave the
item through knowledge-graph relations, and find where the two walks most
plausibly meet.  The soft-match score of a meeting entity is the sum of two
log-softmax terms, one per side, with a per-hop penalty gamma.

Pre-hoc (model-intrinsic): read the DREM-HGN attention weights, including
the zero-vector gate that stands for "popular under this query".

Run:  python3 demos/03_explanations.py
"""

# %%
import tempfile
from pathlib import Path

from xpsearch import explain
from xpsearch.model import ModelConfig, train
from xpsearch.synth import SynthSpec, synthetic_corpus

work = Path(tempfile.mkdtemp(prefix="xpsearch-demo-"))
corpus, truth = synthetic_corpus(SynthSpec(users=80, items=40, brands=5, categories=4, queries=12), 0, work)
drem = train(corpus, ModelConfig(dim=16, epochs=30, model="drem", seed=0)).store
hgn = train(corpus, ModelConfig(dim=16, epochs=30, model="drem_hgn", seed=0)).store

# %%
paths = explain.enumerate_paths(2)
print(len(paths), "schema-valid path types with up to two hops per side, e.g.")
for p in paths[:4] + paths[-2:]:
    print("   ", p.label(), "->", p.entity_type)

# %%
key, (user, qid, relevant) = sorted(corpus.test_pairs().items())[0]
item = min(relevant)
print(f"user {corpus.name('user', user)}, query {corpus.queries[qid]!r}, item {corpus.name('item', item)}")

mae = explain.explain_mae(user, qid, item, drem, corpus, gamma=1.0)
for e in mae.explanations:
    print(f"  [{e.score:7.3f}] {e.text}")

# %% [markdown]
# Raising gamma shifts every score of a path by -(hops) * delta, so longer
# paths fall behind shorter ones.

# %%
p = next(p for p in paths if p.entity_type == "brand" and p.length == 2)
words = corpus.query_words(qid)
s1 = explain.soft_match_scores(p, user, words, item, drem, gamma=0.5)
s2 = explain.soft_match_scores(p, user, words, item, drem, gamma=1.5)
print(p.label(), "shift:", (s2 - s1).round(12).tolist())

# %%
mie, trace = explain.explain_mie(user, qid, hgn, corpus)
for e in mie.explanations:
    print(f"  {e.text}")
print(trace.to_json(corpus, corpus.queries[qid]))
