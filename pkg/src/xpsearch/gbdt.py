"""Gradient-boosted regression trees on logistic loss, exact greedy splits.

Each tree is fit to the residuals ``y - p`` with sum-of-squares (variance)
reduction and grown leaf-wise up to ``max_leaves``; leaf values are one
Newton step ``sum(r) / sum(p (1 - p))``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .quality import ASPECTS, PreferencePair


@dataclass(frozen=True)
class GbdtParams:
    n_trees: int = 50
    max_depth: int = 5
    max_leaves: int = 10
    min_leaf: int = 10
    learning_rate: float = 0.1


# a small slice of the usual ranges: depth 5-20, leaves 10-30, min leaf 10-50, lr 0.1-0.5
DEFAULT_GRID = {
    "max_depth": (5,),
    "max_leaves": (10, 30),
    "min_leaf": (10,),
    "learning_rate": (0.1, 0.5),
}


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)      # -1 for leaves
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)
    gain: list[float] = field(default_factory=list)

    def _new(self, value=0.0):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        self.gain.append(0.0)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        feature = np.asarray(self.feature)
        while True:
            f = feature[node]
            inner = f >= 0
            if not inner.any():
                break
            rows = np.flatnonzero(inner)
            go_left = X[rows, f[rows]] <= np.asarray(self.threshold)[node[rows]]
            node[rows] = np.where(go_left, np.asarray(self.left)[node[rows]], np.asarray(self.right)[node[rows]])
        return np.asarray(self.value)[node]

    @property
    def n_leaves(self) -> int:
        return sum(1 for f in self.feature if f < 0)


@dataclass
class GbdtModel:
    prior: float
    shrinkage: float
    trees: list[Tree]
    params: GbdtParams

    def decision(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        z = np.full(X.shape[0], self.prior)
        for t in self.trees:
            z += self.shrinkage * t.predict(X)
        return z

    def gains(self, n_features: int) -> np.ndarray:
        """Total split gain per feature."""
        g = np.zeros(n_features)
        for t in self.trees:
            for f, gain in zip(t.feature, t.gain):
                if f >= 0:
                    g[f] += gain
        return g


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def best_split(X: np.ndarray, r: np.ndarray, idx: np.ndarray, min_leaf: int):
    """Exhaustive scan; returns ``(gain, feature, threshold)`` or None.

    Thresholds are midpoints between consecutive distinct values.  Ties keep
    the lowest feature and the lowest threshold.
    """
    n = idx.shape[0]
    if n < 2 * min_leaf:
        return None
    rs = r[idx]
    total = rs.sum()
    Xs = X[idx]
    order = np.argsort(Xs, axis=0, kind="stable")          # (n, F)
    xs = np.take_along_axis(Xs, order, axis=0)
    sl = np.cumsum(rs[order], axis=0)[:-1]                 # left sums, (n-1, F)
    nl = np.arange(1, n)[:, None]
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    gain = sl * sl / nl + (total - sl) ** 2 / (n - nl) - total * total / n
    gain = np.where(valid, gain, -np.inf)
    k_best = np.argmax(gain, axis=0)                       # lowest threshold per feature
    g_best = gain[k_best, np.arange(X.shape[1])]
    f = int(np.argmax(g_best))                             # lowest feature on ties
    if not g_best[f] > 1e-12:
        return None
    k = int(k_best[f])
    return float(g_best[f]), f, float((xs[k, f] + xs[k + 1, f]) / 2.0)


def _fit_tree(X, r, hess, params: GbdtParams) -> Tree:
    tree = Tree()

    def leaf_value(idx):
        return float(r[idx].sum() / (hess[idx].sum() + 1e-12))

    root = tree._new(leaf_value(np.arange(X.shape[0])))
    # leaf-wise growth: (node, idx, depth, candidate split)
    frontier = []
    all_idx = np.arange(X.shape[0])
    frontier.append((root, all_idx, 0, best_split(X, r, all_idx, params.min_leaf)))
    while tree.n_leaves < params.max_leaves:
        cands = [(c[3][0], k) for k, c in enumerate(frontier) if c[3] is not None and c[2] < params.max_depth]
        if not cands:
            break
        _, k = max(cands, key=lambda t: (t[0], -t[1]))
        node, idx, depth, (gain, f, thr) = frontier.pop(k)
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        tree.feature[node], tree.threshold[node] = f, thr
        tree.gain[node] = gain
        tree.left[node] = tree._new(leaf_value(li))
        tree.right[node] = tree._new(leaf_value(ri))
        for child, cidx in ((tree.left[node], li), (tree.right[node], ri)):
            frontier.append((child, cidx, depth + 1, best_split(X, r, cidx, params.min_leaf)))
    return tree


def gbdt_train(X, y, params: GbdtParams = GbdtParams(), seed: int = 0) -> GbdtModel:
    """Boost ``params.n_trees`` trees on binary targets ``y``.

    The fit has no stochastic steps; ``seed`` is accepted so callers can keep
    one seed per invocation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("training data has a single class")
    base = y.mean()
    prior = float(np.log(base / (1.0 - base)))
    model = GbdtModel(prior, params.learning_rate, [], params)
    z = np.full(y.shape[0], prior)
    for _ in range(params.n_trees):
        p = sigmoid(z)
        r = y - p
        tree = _fit_tree(X, r, p * (1.0 - p), params)
        model.trees.append(tree)
        z += params.learning_rate * tree.predict(X)
    return model


def gbdt_predict(model: GbdtModel, X) -> np.ndarray:
    return sigmoid(model.decision(X))


# ---------------------------------------------------------------------------
# cross validation; errors split into type 1 (truth equal) and type 2 (wrong side)


def _grid_points(grid: dict) -> list[GbdtParams]:
    keys = sorted(grid)
    return [GbdtParams(**dict(zip(keys, vals))) for vals in itertools.product(*(grid[k] for k in keys))]


def _case_predictions(pairs: Sequence[PreferencePair], probs: np.ndarray) -> dict[str, str]:
    """Combine forward/backward probabilities into one verdict per case (MIE-first view)."""
    by_case: dict[str, dict[str, float]] = {}
    for p, pr in zip(pairs, probs):
        by_case.setdefault(p.case_id, {})[p.order] = pr
    out = {}
    for c, d in by_case.items():
        fwd = d.get("forward", 0.5) > 0.5
        bwd = d.get("backward", 0.5) > 0.5
        out[c] = "first" if fwd and not bwd else "second" if bwd and not fwd else "equal"
    return out


def score_pairs(pairs: Sequence[PreferencePair], probs: np.ndarray) -> dict[str, int]:
    verdict = _case_predictions(pairs, probs)
    res = {"total": 0, "correct": 0, "type1": 0, "type2": 0}
    for p in pairs:
        pred = verdict[p.case_id]
        if p.order == "backward":
            pred = {"first": "second", "second": "first"}.get(pred, pred)
        truth = "equal" if p.label in ("equal", "none") else p.label
        res["total"] += 1
        if pred == truth:
            res["correct"] += 1
        elif truth == "equal":
            res["type1"] += 1
        else:
            res["type2"] += 1
    return res


def assign_folds(case_ids: Sequence[str], folds: int, seed: int) -> dict[str, int]:
    cases = sorted(set(case_ids))
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > len(cases):
        raise ValueError(f"{folds} folds but only {len(cases)} cases")
    perm = np.random.default_rng(seed).permutation(len(cases))
    return {cases[c]: k % folds for k, c in enumerate(perm)}


def _fit_select(pairs, grid, seed):
    points = _grid_points(grid)
    X = np.stack([p.features for p in pairs])
    y = np.array([p.target for p in pairs])
    if len(points) == 1:
        return gbdt_train(X, y, points[0], seed)
    # inner 3-fold selection over cases
    fold_of = assign_folds([p.case_id for p in pairs], min(3, len({p.case_id for p in pairs})), seed + 1)
    inner = np.array([fold_of[p.case_id] for p in pairs])
    best, best_acc = points[0], -1.0
    for params in points:
        correct = total = 0
        for k in np.unique(inner):
            tr, te = inner != k, inner == k
            if np.unique(y[tr]).size < 2:
                continue
            m = gbdt_train(X[tr], y[tr], params, seed)
            sub = [p for p, t in zip(pairs, te) if t]
            s = score_pairs(sub, gbdt_predict(m, X[te]))
            correct += s["correct"]
            total += s["total"]
        acc = correct / total if total else 0.0
        if acc > best_acc:
            best, best_acc = params, acc
    return gbdt_train(X, y, best, seed)


def cross_validate(pairs: Sequence[PreferencePair], folds: int = 5, grid: dict | None = None,
                   seed: int = 0) -> dict[str, dict[str, int]]:
    """Per-aspect counts aggregated over test folds; both orders of a case share a fold."""
    grid = grid or DEFAULT_GRID
    report = {}
    aspects = [a for a in ASPECTS if any(p.aspect == a for p in pairs)]
    aspects += sorted({p.aspect for p in pairs} - set(aspects))
    for aspect in aspects:
        sub = [p for p in pairs if p.aspect == aspect]
        fold_of = assign_folds([p.case_id for p in sub], folds, seed)
        totals = {"total": 0, "correct": 0, "type1": 0, "type2": 0}
        for k in range(folds):
            train = [p for p in sub if fold_of[p.case_id] != k]
            test = [p for p in sub if fold_of[p.case_id] == k]
            if not test:
                continue
            model = _fit_select(train, grid, seed)
            probs = gbdt_predict(model, np.stack([p.features for p in test]))
            for key, v in score_pairs(test, probs).items():
                totals[key] += v
        report[aspect] = totals
    return report


def write_cv_report(report: dict[str, dict[str, int]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("aspect,total,correct,type1,type2\n")
        for aspect, r in report.items():
            fh.write(f"{aspect},{r['total']},{r['correct']},{r['type1']},{r['type2']}\n")
