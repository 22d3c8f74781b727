"""Brute-force reference implementations shared by unit and acceptance tests.

These deliberately avoid numpy vectorisation and the package's own helpers.
"""

from __future__ import annotations

import math
from datetime import date, timedelta
from itertools import combinations

import numpy as np


def brute_pool(vectors: list[np.ndarray]) -> np.ndarray:
    dim = len(vectors[0])
    out = []
    for j in range(dim):
        s = 0.0
        for v in vectors:
            s += float(v[j])
        out.append(s / len(vectors))
    return np.array(out, dtype=np.float32)


def brute_matrix(pooled: dict[tuple[str, date], np.ndarray], start: date, end: date, dim: int) -> np.ndarray:
    groups = sorted({g for g, _ in pooled})
    n = (end - start).days + 1
    rows = []
    for t in range(n):
        day = start + timedelta(days=t)
        row = []
        for g in groups:
            v = pooled.get((g, day))
            row.extend([float(x) for x in v] if v is not None else [0.0] * dim)
        rows.append(row)
    return np.array(rows, dtype=np.float64).reshape(n, dim * len(groups))


def random_fusion_fixture(rng: np.random.Generator):
    """Random messages-as-vectors per (group, day); returns (raw, start, end, dim)."""
    dim = int(rng.integers(2, 7))
    n_groups = int(rng.integers(1, 5))
    n_days = int(rng.integers(1, 12))
    start = date(2023, 1, 1) + timedelta(days=int(rng.integers(0, 300)))
    raw = {}
    for g in range(n_groups):
        gid = f"g{int(rng.integers(0, 100)):02d}_{g}"
        for t in range(n_days):
            if rng.random() < 0.6:
                k = int(rng.integers(1, 5))
                raw[(gid, start + timedelta(days=t))] = [rng.standard_normal(dim) for _ in range(k)]
    return raw, start, start + timedelta(days=n_days - 1), dim


def tfidf_oracle(docs: list[list[str]]) -> tuple[list[str], list[list[float]]]:
    terms = sorted({t for d in docs for t in d})
    n = len(docs)
    table = []
    for d in docs:
        row = []
        for term in terms:
            tf = sum(1 for t in d if t == term)
            df = sum(1 for other in docs if term in other)
            row.append(tf * (math.log((1 + n) / (1 + df)) + 1))
        table.append(row)
    return terms, table


def cooc_oracle(token_lists: list[list[str]]) -> dict[tuple[str, str], int]:
    weights: dict[tuple[str, str], int] = {}
    for toks in token_lists:
        distinct = sorted(set(toks))
        for a, b in combinations(distinct, 2):
            weights[(a, b)] = weights.get((a, b), 0) + 1
    return weights


def metrics_oracle(tp: int, fp: int, fn: int, tn: int) -> tuple[float, float, float, float]:
    p = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    r = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f = (2 * p * r / (p + r)) if (p + r) > 0 else 0.0
    a = (tp + tn) / (tp + fp + fn + tn)
    return p, r, f, a
