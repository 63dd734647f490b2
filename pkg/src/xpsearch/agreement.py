"""Annotation analysis: majority vote, Fleiss' kappa, Pearson correlation."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np


def majority_vote(labels: Sequence[str]) -> str:
    """Modal label of exactly three annotations; a three-way tie yields ``"equal"``."""
    if len(labels) != 3:
        raise ValueError(f"expected 3 annotations, got {len(labels)}")
    (label, n), = Counter(labels).most_common(1)
    return label if n >= 2 else "equal"


def fleiss_kappa(ratings) -> float:
    """Fleiss' kappa for an (n_cases, n_raters) matrix of category codes.

    Binary codes (0/1, or booleans) are the intended use, but any small set of
    categories works.
    """
    R = np.asarray(ratings)
    if R.ndim != 2 or R.shape[1] < 2:
        raise ValueError("need an (n_cases, n_raters>=2) matrix")
    cats = np.unique(R)
    n_raters = R.shape[1]
    counts = np.stack([(R == c).sum(axis=1) for c in cats], axis=1).astype(float)
    p_j = counts.sum(axis=0) / counts.sum()
    P_i = ((counts * counts).sum(axis=1) - n_raters) / (n_raters * (n_raters - 1))
    P_bar = P_i.mean()
    P_e = float((p_j * p_j).sum())
    if np.isclose(P_e, 1.0):
        raise ValueError("kappa undefined: every rating falls in one category")
    return float((P_bar - P_e) / (1.0 - P_e))


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.shape[0] < 2:
        raise ValueError("need two equal-length sequences of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))
