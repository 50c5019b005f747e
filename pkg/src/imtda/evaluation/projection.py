"""Deterministic 2-D PCA projection of labelled feature collections."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass
class Projection:
    coords: np.ndarray  # (N, 2)
    labels: list[str]  # collection name per row
    components: np.ndarray  # (2, D)
    explained_variance: np.ndarray  # (2,)
    mean: np.ndarray

    def of(self, label: str) -> np.ndarray:
        return self.coords[[i for i, l in enumerate(self.labels) if l == label]]


def feature_projection_2d(feature_sets: Mapping[str, np.ndarray]) -> Projection:
    """Project the pooled vectors of every collection onto their top-2 PCs.

    Each component's largest-magnitude loading is made positive. When the
    data has rank < 2, missing components are zero (zero coordinates).
    """
    labels, rows = [], []
    for name, vecs in feature_sets.items():
        v = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
        rows.append(v)
        labels += [name] * v.shape[0]
    if not rows:
        raise ValueError("no feature vectors")
    x = np.concatenate(rows)
    if x.shape[0] < 3:
        raise ValueError(f"need at least 3 vectors, got {x.shape[0]}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    comps = np.zeros((2, x.shape[1]))
    var = np.zeros(2)
    for k in range(min(2, vt.shape[0])):
        if s[k] <= tol:
            break
        c = vt[k]
        j = np.argmax(np.abs(c))
        comps[k] = c if c[j] > 0 else -c
        var[k] = s[k] ** 2 / (x.shape[0] - 1)
    return Projection(xc @ comps.T, labels, comps, var, mean)
