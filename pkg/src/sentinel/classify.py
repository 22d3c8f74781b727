"""Stratified splitting, a Gini random forest, metrics and feature-set assembly."""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CacheReadError, ContractError
from .fuse import FeatureMatrix
from .ingest import RawMessage
from .text import content_tokens, tfidf, top_terms_by_df

DEFAULT_TREES = 251
DEFAULT_VOCAB = 2000
FEATURE_KINDS = ("text", "hybrid", "tfidf")


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_indices: np.ndarray
    test_indices: np.ndarray
    ratio: float = 0.7
    seed: int = 0
    kind: str = "stratified"

    def train_mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        m[self.train_indices] = True
        return m

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind, "ratio": self.ratio, "seed": self.seed,
            "train_indices": self.train_indices.tolist(), "test_indices": self.test_indices.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        d = json.loads(text)
        return cls(np.array(d["train_indices"], dtype=np.int64), np.array(d["test_indices"], dtype=np.int64),
                   d["ratio"], d["seed"], d["kind"])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(y, ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    """Per class, a seeded shuffle sends round(ratio * class_size) indices to train."""
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError("stratified_split needs both classes present")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in classes:
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = _round_half_up(ratio * len(idx))
        train.append(idx[:k])
        test.append(idx[k:])
    return SplitSpec(np.sort(np.concatenate(train)), np.sort(np.concatenate(test)), ratio, seed, "stratified")


def temporal_split(y, ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    """First round(ratio * n) days train, the rest test."""
    n = len(y)
    k = _round_half_up(ratio * n)
    return SplitSpec(np.arange(k), np.arange(k, n), ratio, seed, "temporal")


def make_split(kind: str, y, ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    if kind == "stratified":
        return stratified_split(y, ratio, seed)
    if kind == "temporal":
        return temporal_split(y, ratio, seed)
    raise ContractError(f"unknown split kind {kind!r}")


# --------------------------------------------------------------------------
# trees
# --------------------------------------------------------------------------

@dataclass
class Tree:
    """Array-encoded binary tree. Leaves have ``feature == -1``.

    ``value[i]`` holds the weighted class votes reaching node ``i``; samples go
    left when ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def leaf_class(self) -> np.ndarray:
        # ties go to the negative class
        return (self.value[:, 1] > self.value[:, 0]).astype(np.int8)

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.leaf_class()[self.apply(X)]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


def _gini(w_pos: np.ndarray, w_tot: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(w_tot > 0, w_pos / w_tot, 0.0)
    return 2.0 * p * (1.0 - p)


def _best_split(X: np.ndarray, y: np.ndarray, w: np.ndarray, feats: np.ndarray):
    """Best (gain, feature, threshold) over ``feats`` by weighted Gini decrease.

    Ties in gain go to the lowest feature index, then the lowest threshold.
    """
    vals = X[:, feats]
    order = np.argsort(vals, axis=0, kind="stable")
    sv = np.take_along_axis(vals, order, axis=0)
    sw = w[order]
    swp = (w * y)[order]
    cw = np.cumsum(sw, axis=0)[:-1]
    cwp = np.cumsum(swp, axis=0)[:-1]
    total, total_pos = w.sum(), (w * y).sum()
    valid = sv[1:] > sv[:-1]
    if not valid.any():
        return None
    parent = _gini(np.array(total_pos), np.array(total))
    rw, rwp = total - cw, total_pos - cwp
    child = (cw * _gini(cwp, cw) + rw * _gini(rwp, rw)) / total
    gain = np.where(valid, parent - child, -np.inf)
    best = gain.max()
    rows, cols = np.nonzero(gain >= best - 1e-12)
    cand = sorted(
        (int(feats[c]), 0.5 * (sv[r, c] + sv[r + 1, c]), sv[r, c], sv[r + 1, c]) for r, c in zip(rows, cols)
    )
    f, thr, lo, hi = cand[0]
    if not lo <= thr < hi:
        thr = lo
    return float(best), f, float(thr)


def build_tree(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    max_features: int,
    rng: np.random.Generator,
    max_depth: int | None = None,
    min_leaf: int = 1,
    counts: np.ndarray | None = None,
) -> Tree:
    """Grow one tree on weighted samples (weights already include bootstrap multiplicity).

    ``counts`` is the number of bootstrap draws per row, used for ``min_leaf``.
    """
    n, d = X.shape
    counts = np.ones(n) if counts is None else counts
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        wy = weights[idx] * y[idx]
        value.append((weights[idx].sum() - wy.sum(), wy.sum()))
        return len(feature) - 1

    stack = [(np.arange(n), 0, new_node(np.arange(n)))]
    while stack:
        idx, depth, node = stack.pop()
        ys = y[idx]
        if ys.min() == ys.max() or counts[idx].sum() < 2 * min_leaf:
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        Xn = X[idx]
        varying = np.ptp(Xn, axis=0) > 0
        perm = rng.permutation(d)
        feats = perm[varying[perm]][:max_features]
        if feats.size == 0:
            continue
        found = _best_split(Xn, ys, weights[idx], np.sort(feats))
        if found is None:
            continue
        _, f, thr = found
        go_left = Xn[:, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        if counts[li].sum() < min_leaf or counts[ri].sum() < min_leaf:
            continue
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(li), new_node(ri)
        stack.append((ri, depth + 1, right[node]))
        stack.append((li, depth + 1, left[node]))

    return Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=np.float64),
                np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
                np.array(value, dtype=np.float64).reshape(-1, 2))


# --------------------------------------------------------------------------
# forest
# --------------------------------------------------------------------------

@dataclass
class RandomForestModel:
    trees: list[Tree]
    n_features: int
    max_features: int
    seed: int
    class_weight: str | None = None
    degenerate: bool = False

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _class_weights(y: np.ndarray, rule: str | None) -> np.ndarray:
    if rule is None:
        return np.ones(2)
    if rule == "balanced":
        n_pos = y.sum()
        n_neg = len(y) - n_pos
        return np.array([len(y) / (2.0 * n_neg), len(y) / (2.0 * n_pos)])
    raise ContractError(f"unknown class_weight {rule!r}")


def rf_train(
    X,
    y,
    n_trees: int = DEFAULT_TREES,
    seed: int = 0,
    max_depth: int | None = None,
    min_leaf: int = 1,
    max_features: int | None = None,
    class_weight: str | None = None,
    n_jobs: int = 1,
) -> RandomForestModel:
    """Bootstrap-aggregated Gini trees; tree ``i`` draws from ``default_rng(seed + i)``.

    ``class_weight="balanced"`` reweights each class by n / (2 * n_class) in
    both the impurity and the leaf votes; ``None`` counts samples as-is.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int8)
    if X.ndim != 2 or len(X) != len(y):
        raise ContractError("X must be 2-D with one row per label")
    if len(y) < 2 or len(np.unique(y)) < 2:
        raise ContractError("rf_train needs >= 2 samples with both classes present")
    if n_trees < 1 or n_trees % 2 == 0:
        raise ContractError("n_trees must be odd so majority votes cannot tie")
    d = X.shape[1]
    k = max_features or max(1, math.ceil(math.sqrt(d)))
    cw = _class_weights(y, class_weight)
    degenerate = d == 0 or not np.any(np.ptp(X, axis=0) > 0)

    def grow(i: int) -> Tree:
        rng = np.random.default_rng(seed + i)
        draws = np.bincount(rng.integers(0, len(y), size=len(y)), minlength=len(y)).astype(float)
        rows = np.flatnonzero(draws)
        w = draws[rows] * cw[y[rows]]
        return build_tree(X[rows], y[rows], w, k, rng, max_depth, min_leaf, draws[rows])

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(grow, range(n_trees)))
    else:
        trees = [grow(i) for i in range(n_trees)]
    return RandomForestModel(trees, d, k, seed, class_weight, degenerate)


def rf_predict(model: RandomForestModel, rows) -> tuple[np.ndarray, np.ndarray]:
    """Strict-majority labels and the fraction of trees voting positive."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != model.n_features:
        raise ContractError(f"expected rows with {model.n_features} features, got shape {rows.shape}")
    votes = np.zeros(len(rows), dtype=np.int64)
    for tree in model.trees:
        votes += tree.predict(rows)
    labels = (2 * votes > model.n_trees).astype(np.int8)
    return labels, votes / model.n_trees


# --------------------------------------------------------------------------
# model file
# --------------------------------------------------------------------------

FOREST_MAGIC = b"SNTLFRST"
FOREST_VERSION = 1


def write_forest(path: Path, model: RandomForestModel) -> None:
    """Trees are written node by node in preorder."""
    cw = (model.class_weight or "").encode("ascii")
    out = [FOREST_MAGIC, struct.pack("<HIIqIB", FOREST_VERSION, model.n_features, model.max_features,
                                     model.seed, model.n_trees, int(model.degenerate)),
           struct.pack("<H", len(cw)), cw]
    for tree in model.trees:
        out.append(struct.pack("<I", tree.n_nodes))
        stack = [0]
        while stack:
            i = stack.pop()
            out.append(struct.pack("<qddd", tree.feature[i], tree.threshold[i], *tree.value[i]))
            if tree.feature[i] >= 0:
                stack.append(tree.right[i])
                stack.append(tree.left[i])
    Path(path).write_bytes(b"".join(out))


def read_forest(path: Path) -> RandomForestModel:
    data = Path(path).read_bytes()
    if not data.startswith(FOREST_MAGIC):
        raise CacheReadError(f"{path}: not a forest file")
    pos = len(FOREST_MAGIC)
    version, n_feat, max_feat, seed, n_trees, degenerate = struct.unpack_from("<HIIqIB", data, pos)
    if version != FOREST_VERSION:
        raise CacheReadError(f"{path}: forest version {version}, expected {FOREST_VERSION}")
    pos += struct.calcsize("<HIIqIB")
    (clen,) = struct.unpack_from("<H", data, pos)
    pos += 2
    cw = data[pos : pos + clen].decode("ascii") or None
    pos += clen
    rec = struct.calcsize("<qddd")
    trees = []
    for _ in range(n_trees):
        (n_nodes,) = struct.unpack_from("<I", data, pos)
        pos += 4
        feature = np.full(n_nodes, -1, dtype=np.int64)
        threshold = np.zeros(n_nodes)
        left = np.full(n_nodes, -1, dtype=np.int64)
        right = np.full(n_nodes, -1, dtype=np.int64)
        value = np.zeros((n_nodes, 2))
        # rebuild from preorder: a node's left child is the next record, its right
        # child follows the whole left subtree
        next_id = 0
        stack: list[tuple[int, str]] = []
        for _ in range(n_nodes):
            f, thr, v0, v1 = struct.unpack_from("<qddd", data, pos)
            pos += rec
            i = next_id
            next_id += 1
            if stack:
                parent, side = stack.pop()
                (left if side == "L" else right)[parent] = i
            feature[i], threshold[i], value[i] = f, thr, (v0, v1)
            if f >= 0:
                stack.append((i, "R"))
                stack.append((i, "L"))
        trees.append(Tree(feature, threshold, left, right, value))
    return RandomForestModel(trees, n_feat, max_feat, seed, cw, bool(degenerate))


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float
    accuracy: float

    def to_dict(self) -> dict:
        return asdict(self)


def metrics_from_counts(tp: int, fp: int, fn: int, tn: int) -> Metrics:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    total = tp + fp + fn + tn
    return Metrics(tp, fp, fn, tn, precision, recall, f1, (tp + tn) / total if total else 0.0)


def compute_metrics(pred, truth) -> Metrics:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape or pred.size == 0:
        raise ContractError("pred and truth must be non-empty and equally long")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return metrics_from_counts(tp, fp, fn, tn)


# --------------------------------------------------------------------------
# feature sets
# --------------------------------------------------------------------------

def day_documents(corpus: Iterable[RawMessage], dates: Sequence[date]) -> list[list[str]]:
    """Content tokens of every message, one document per day in ``dates``."""
    pos = {d: i for i, d in enumerate(dates)}
    docs: list[list[str]] = [[] for _ in dates]
    for m in corpus:
        i = pos.get(m.day)
        if i is not None:
            docs[i].extend(content_tokens(m.text))
    return docs


def build_feature_set(
    kind: str,
    X: FeatureMatrix,
    H: np.ndarray | None = None,
    corpus: Iterable[RawMessage] | None = None,
    vocab_size: int = DEFAULT_VOCAB,
) -> np.ndarray:
    if kind == "text":
        return np.asarray(X.rows, dtype=np.float64)
    if kind == "hybrid":
        if H is None:
            raise ContractError("hybrid features need graph embeddings")
        H = np.asarray(H, dtype=np.float64)
        if H.ndim != 2 or H.shape[0] != X.n_days:
            raise ContractError(f"graph embeddings have shape {H.shape}, expected ({X.n_days}, k)")
        return np.hstack([X.rows, H])
    if kind == "tfidf":
        if corpus is None:
            raise ContractError("tfidf features need the message corpus")
        docs = day_documents(corpus, X.dates)
        vocab = top_terms_by_df(docs, vocab_size)
        return tfidf(docs, vocab)[0]
    raise ContractError(f"unknown feature kind {kind!r}")
