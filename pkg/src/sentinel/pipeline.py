"""Stage functions wired together: ingest -> embed -> fuse -> daygraph -> classify."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np

from .classify import (
    DEFAULT_TREES,
    Metrics,
    SplitSpec,
    build_feature_set,
    compute_metrics,
    make_split,
    rf_predict,
    rf_train,
)
from .daygraph import TrainConfig, TrainResult, build_day_graph, node_embeddings, train_sage
from .embed import DailyGroupEmbedding, EmbeddingProvider, embed_docs
from .fuse import FeatureMatrix, LabeledDataset, align_labels, build_daily_matrix, default_range
from .ingest import (
    DEFAULT_ANON_KEY,
    DEFAULT_START,
    CyberEvent,
    RawMessage,
    daily_event_counts,
    docs_for_corpus,
    load_groups_dir,
    parse_event_timeline,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = DEFAULT_TREES
    max_depth: int | None = None
    min_leaf: int = 1
    class_weight: str | None = None
    n_jobs: int = 1


@dataclass
class Prepared:
    corpus: list[RawMessage]
    events: list[CyberEvent]
    entries: list[DailyGroupEmbedding]
    dataset: LabeledDataset


def ingest_inputs(groups_dir: Path, events_csv: Path, start: date = DEFAULT_START, date_order: str = "iso",
                  key: bytes = DEFAULT_ANON_KEY) -> tuple[list[RawMessage], list[CyberEvent]]:
    corpus = load_groups_dir(groups_dir, start, key)
    with open(events_csv, "rb") as fh:
        events = parse_event_timeline(fh, date_order=date_order, start=start)
    return corpus, events


def fuse_dataset(entries: Sequence[DailyGroupEmbedding], events: Sequence[CyberEvent],
                 day_span: tuple[date, date] | None = None, dim: int | None = None) -> LabeledDataset:
    start, end = day_span or default_range(entries, events)
    X = build_daily_matrix(entries, start, end, dim)
    return align_labels(X, daily_event_counts(events, start, end))


def prepare(corpus: list[RawMessage], events: list[CyberEvent], provider: EmbeddingProvider,
            day_span: tuple[date, date] | None = None, max_inflight: int = 4) -> Prepared:
    entries = embed_docs(provider, docs_for_corpus(corpus), max_inflight)
    return Prepared(corpus, events, entries, fuse_dataset(entries, events, day_span, provider.dim))


@dataclass
class KindResult:
    kind: str
    metrics: Metrics
    vote_fraction: np.ndarray = field(repr=False)
    degenerate: bool = False


@dataclass
class Evaluation:
    split: SplitSpec
    results: dict[str, KindResult]
    graph: TrainResult | None = None
    graph_embeddings: np.ndarray | None = field(default=None, repr=False)


def train_graph_embeddings(X: FeatureMatrix, y: np.ndarray, split: SplitSpec, cfg: TrainConfig) -> tuple[TrainResult, np.ndarray]:
    g = build_day_graph(X.rows)
    result = train_sage(g, y, split.train_mask(X.n_days), cfg)
    return result, node_embeddings(g, result.params)


def evaluate(
    ds: LabeledDataset,
    corpus: Sequence[RawMessage] | None,
    seed: int = 0,
    kinds: Sequence[str] = ("text", "hybrid", "tfidf"),
    split_kind: str = "stratified",
    ratio: float = 0.7,
    graph_cfg: TrainConfig = TrainConfig(),
    forest: ForestConfig = ForestConfig(),
    H: np.ndarray | None = None,
) -> Evaluation:
    """Split once, then fit and score one forest per feature kind on that split.

    The graph model sees labels of training days only. ``H`` skips graph
    training when embeddings for this split are already known.
    """
    y = ds.y
    split = make_split(split_kind, y, ratio, seed)
    graph = None
    if "hybrid" in kinds and H is None:
        graph, H = train_graph_embeddings(ds.X, y, split, TrainConfig(**{**graph_cfg.__dict__, "seed": seed}))
    results = {}
    for kind in kinds:
        F = build_feature_set(kind, ds.X, H, corpus)
        model = rf_train(F[split.train_indices], y[split.train_indices], forest.n_trees, seed,
                         forest.max_depth, forest.min_leaf, class_weight=forest.class_weight, n_jobs=forest.n_jobs)
        pred, frac = rf_predict(model, F[split.test_indices])
        results[kind] = KindResult(kind, compute_metrics(pred, y[split.test_indices]), frac, model.degenerate)
    return Evaluation(split, results, graph, H)


def all_positive_f1(truth) -> float:
    return compute_metrics(np.ones(len(truth), dtype=np.int8), truth).f1
