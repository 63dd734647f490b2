"""
Predicting which explanation group people prefer
================================================

Each explanation group becomes a fixed 68-value vector: for up to three
explanations, the max / min / mean over its entities of seven fidelity and
novelty features, plus the retrieval model's MRR and the log-probability of
the purchase.  A case (MIE group vs MAE group) yields two mirrored rows per
aspect, and gradient-boosted trees are cross-validated on them.

Real crowd labels are not bundled, so this demo simulates three workers per
case who lean toward the group with more observed (existing) entities.

Run:  python3 demos/04_explanation_quality.py
"""

# %%
import tempfile
from pathlib import Path

import numpy as np

from xpsearch import explain, quality, retrieval
from xpsearch.agreement import fleiss_kappa, majority_vote, pearson
from xpsearch.gbdt import GbdtParams, cross_validate
from xpsearch.model import ModelConfig, train
from xpsearch.synth import SynthSpec, synthetic_corpus

work = Path(tempfile.mkdtemp(prefix="xpsearch-demo-"))
corpus, truth = synthetic_corpus(SynthSpec(users=80, items=40, brands=5, categories=4, queries=12), 0, work)
stores = {k: train(corpus, ModelConfig(dim=16, epochs=30, model=k, seed=0)).store for k in ("drem", "drem_hgn")}
stats = quality.AssociationStats(corpus)

# %%
print(quality.FEATURE_LENGTH, "features per group:", quality.FEATURE_NAMES[:4], "...", quality.FEATURE_NAMES[-2:])

cases, rng = [], np.random.default_rng(0)
votes = []
rate = quality.FEATURE_NAMES.index("slot1_existence_rate_mean")
for key, (user, qid, relevant) in sorted(corpus.test_pairs().items())[:60]:
    item = min(relevant)
    vecs = {}
    for kind, name in (("drem_hgn", "MIE"), ("drem", "MAE")):
        scores, _ = retrieval.item_scores(user, corpus.query_words(qid), stores[kind], corpus)
        if name == "MIE":
            group, _ = explain.explain_mie(user, qid, stores[kind], corpus)
        else:
            group = explain.explain_mae(user, qid, item, stores[kind], corpus)
        ctx = quality.GroupContext(user, item, 0.0, retrieval.log_purchase_prob(scores, item))
        vecs[name] = quality.build_group_vector(group, ctx, stats)
    lean = vecs["MIE"][rate] - vecs["MAE"][rate]
    workers = ["first" if lean + rng.normal(0, 0.3) > 0 else "second" for _ in range(3)]
    votes.append([w == "first" for w in workers])
    label = majority_vote(workers)
    cases.append(quality.Case(key, vecs["MIE"], vecs["MAE"], {a: label for a in quality.ASPECTS}))

# %%
print("Fleiss kappa among simulated workers:", round(fleiss_kappa(np.array(votes, dtype=int)), 3))
pairs = quality.build_pair_dataset(cases)
print(len(pairs), "rows;", sum(p.aspect == "usefulness" for p in pairs), "per aspect")

# %%
grid = {"max_depth": (5,), "max_leaves": (10,), "min_leaf": (5,), "learning_rate": (0.1, 0.5)}
report = cross_validate(pairs, folds=5, grid=grid, seed=0)
for aspect, r in report.items():
    print(f"{aspect:16s} correct {r['correct']}/{r['total']}  type1 {r['type1']}  type2 {r['type2']}")

# %%
# Per-case agreement between two aspects' vote shares, as one would report for real labels.
share = np.array(votes, dtype=float).mean(axis=1)
noisy = np.clip(share + rng.normal(0, 0.1, size=share.size), 0, 1)
print("Pearson r between aspects:", round(pearson(share, noisy), 3))
