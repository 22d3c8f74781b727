"""File-level stage runners shared by the CLI and ``full_run``.

Every stage reads only files written by earlier stages, so deleting a later
stage's outputs and rerunning reproduces them exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import replace
from datetime import date
from pathlib import Path
from statistics import median
from typing import Sequence

import numpy as np

from . import analysis
from .classify import FEATURE_KINDS, SplitSpec, build_feature_set, compute_metrics, make_split, rf_predict, rf_train
from .config import RunConfig
from .daygraph import TrainConfig, TrainResult, build_day_graph, node_embeddings, train_sage, write_params
from .embed import EmbeddingProvider, cache_read, cache_write, embed_docs
from .errors import DataError, ProjectionError, SentinelError, StageError
from .fuse import FeatureMatrix, LabeledDataset, read_label_sidecar, read_matrix, write_label_sidecar, write_matrix
from .ingest import (
    CORPUS_FILE,
    DEFAULT_ANON_KEY,
    DEFAULT_START,
    EVENTS_FILE,
    RawMessage,
    daily_event_counts,
    docs_for_corpus,
    read_corpus,
    read_events,
    write_corpus,
    write_events,
)
from .pipeline import ForestConfig, fuse_dataset, ingest_inputs

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = "1.0"
# report keys that vary between identical reruns and stay out of the determinism hash
NON_DETERMINISTIC_KEYS = ("timings", "paths", "determinism_hash")


def _corpus_file(path: Path) -> Path:
    path = Path(path)
    return path / CORPUS_FILE if path.is_dir() else path


def _events_file(path: Path) -> Path:
    path = Path(path)
    return path / EVENTS_FILE if path.is_dir() else path


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_ingest(groups_dir: Path, events_csv: Path, out_dir: Path, start: date = DEFAULT_START,
                 date_order: str = "iso", key: bytes = DEFAULT_ANON_KEY) -> dict:
    corpus, events = ingest_inputs(Path(groups_dir), Path(events_csv), start, date_order, key)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(out_dir / CORPUS_FILE, corpus)
    write_events(out_dir / EVENTS_FILE, events)
    types: dict[str, int] = {}
    for ev in events:
        types[ev.canonical_type] = types.get(ev.canonical_type, 0) + 1
    return {
        "messages": len(corpus),
        "groups": len({m.group_id for m in corpus}),
        "events": len(events),
        "event_days": len({ev.date for ev in events}),
        "attack_types": dict(sorted(types.items())),
    }


def stage_embed(corpus: Path, cache: Path, provider: EmbeddingProvider, max_inflight: int = 4) -> dict:
    messages = read_corpus(_corpus_file(corpus))
    entries = embed_docs(provider, docs_for_corpus(messages), max_inflight)
    Path(cache).parent.mkdir(parents=True, exist_ok=True)
    cache_write(cache, entries, provider.identity, provider.dim)
    return {"group_days": len(entries), "messages_embedded": sum(e.message_count for e in entries)}


def stage_fuse(cache: Path, events: Path, matrix_out: Path, labels_out: Path,
               day_range: tuple[date, date] | None = None, provider_id: str | None = None,
               dim: int | None = None) -> LabeledDataset:
    pid, dim, entries = cache_read(cache, provider_id, dim)
    ds = fuse_dataset(entries, read_events(_events_file(events)), day_range, dim)
    write_matrix(matrix_out, ds.X, pid)
    write_label_sidecar(labels_out, ds)
    return ds


def load_dataset(matrix: Path, labels: Path) -> LabeledDataset:
    _, X = read_matrix(matrix)
    dates, y = read_label_sidecar(labels)
    if dates != X.dates:
        raise DataError(f"{labels} does not cover the same days as {matrix}")
    return LabeledDataset(X, y)


def stage_split(labels: Path, out: Path, kind: str = "stratified", ratio: float = 0.7, seed: int = 0) -> SplitSpec:
    _, y = read_label_sidecar(labels)
    split = make_split(kind, y, ratio, seed)
    Path(out).write_text(split.to_json() + "\n", encoding="utf-8")
    return split


def read_split(path: Path) -> SplitSpec:
    return SplitSpec.from_json(Path(path).read_text(encoding="utf-8"))


def stage_train_graph(ds: LabeledDataset, split: SplitSpec, cfg: TrainConfig, params_out: Path,
                      embeds_out: Path) -> TrainResult:
    g = build_day_graph(ds.X.rows)
    result = train_sage(g, ds.y, split.train_mask(ds.X.n_days), cfg)
    write_params(params_out, result.params, cfg.seed, cfg.epochs)
    np.save(embeds_out, node_embeddings(g, result.params))
    return result


def stage_evaluate(ds: LabeledDataset, split: SplitSpec, kinds: Sequence[str], seed: int,
                   H: np.ndarray | None = None, corpus: Sequence[RawMessage] | None = None,
                   forest: ForestConfig = ForestConfig()) -> list[dict]:
    """One metrics record per feature kind, all on the same split."""
    y = ds.y
    out = []
    for kind in kinds:
        F = build_feature_set(kind, ds.X, H, corpus)
        model = rf_train(F[split.train_indices], y[split.train_indices], forest.n_trees, seed, forest.max_depth,
                         forest.min_leaf, class_weight=forest.class_weight, n_jobs=forest.n_jobs)
        pred, frac = rf_predict(model, F[split.test_indices])
        m = compute_metrics(pred, y[split.test_indices])
        out.append({
            "model_kind": kind, "seed": seed, "split": split.kind, **m.to_dict(),
            "degenerate": model.degenerate,
            "test_dates": [ds.X.dates[i].isoformat() for i in split.test_indices],
            "vote_fraction": [float(v) for v in frac],
        })
    return out


COMPARISON_HEADER = ["model", "precision", "recall", "f1", "accuracy"]
MODEL_NAMES = {"text": "Text embeddings only", "hybrid": "Text + graph embeddings", "tfidf": "TF-IDF baseline"}


def write_comparison(path: Path, rows: dict[str, dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for kind, m in rows.items():
            w.writerow([MODEL_NAMES.get(kind, kind)] + [f"{m[k]:.4f}" for k in COMPARISON_HEADER[1:]])


def run_analyses(corpus_path: Path, events_path: Path, out_dir: Path, provider: EmbeddingProvider,
                 keywords: Sequence[str] | None = None, top_n: int = 50, top_k: int = 10,
                 drift_terms: int = 20) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = read_corpus(_corpus_file(corpus_path))
    events = read_events(_events_file(events_path))
    summary: dict = {}

    analysis.weekly_volume(corpus).write_csv(out_dir / "weekly_messages.csv")
    if events:
        days = [ev.date for ev in events]
        analysis.weekly_events(daily_event_counts(events, min(days), max(days))).write_csv(out_dir / "weekly_events.csv")

    seeded = analysis.filter_seed_messages(corpus)
    graph = analysis.build_cooc_graph(seeded, top_n=top_n)
    (out_dir / "cooc.dot").write_text(graph.to_dot(), encoding="utf-8")
    (out_dir / "cooc.json").write_text(graph.to_json() + "\n", encoding="utf-8")
    summary["cooc"] = {"seed_messages": len(seeded), "nodes": len(graph.nodes), "edges": len(graph.edges)}

    tf = analysis.tfidf_weekly(corpus, top_k)
    tf.write_csv(out_dir / "tfidf.csv", keywords or analysis.ATTACK_KEYWORDS)
    tf.write_top_csv(out_dir / "tfidf_top.csv")
    summary["tfidf"] = {"weeks": len(tf.week_starts), "terms": len(tf.terms)}

    coord = analysis.coordination_density(corpus)
    coord.write_csv(out_dir / "coordination.csv")
    summary["coordination"] = {"weeks": len(coord.week_starts), "max_density": float(coord.densities.max(initial=0.0))}

    try:
        rows = analysis.weekly_drift(corpus, provider, drift_terms, keywords or analysis.ATTACK_KEYWORDS)
        analysis.write_drift_csv(out_dir / "drift.csv", rows)
        summary["drift"] = {"weeks": len(rows)}
    except ProjectionError as exc:
        logger.warning("drift projection skipped: %s", exc)
        summary["drift"] = {"skipped": str(exc)}
    return summary


# --------------------------------------------------------------------------
# full run
# --------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def determinism_hash(report: dict) -> str:
    body = {k: v for k, v in report.items() if k not in NON_DETERMINISTIC_KEYS}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except SentinelError as exc:
        raise StageError(name, exc) from exc
    except OSError as exc:
        raise StageError(name, DataError(f"{exc.strerror}: {exc.filename}")) from exc
    finally:
        timings[name] = round(time.perf_counter() - t0, 6)


def _median_block(records: list[dict]) -> dict:
    return {k: float(median(r[k] for r in records)) for k in ("precision", "recall", "f1", "accuracy")}


def full_run(cfg: RunConfig, provider: EmbeddingProvider | None = None) -> dict:
    """Run every stage for each seed and write ``report.json`` under ``cfg.out_dir``."""
    timings: dict[str, float] = {}
    out = Path(cfg.out_dir)
    with _stage("validate", timings):
        missing = [str(p) for p in (cfg.groups_dir, cfg.events) if not Path(p).exists()]
        if missing:
            raise DataError(f"input not found: {', '.join(missing)}")
        if provider is None:
            provider = cfg.provider.build(cfg.api_key)
        out.mkdir(parents=True, exist_ok=True)

    ingest_dir = out / "ingest"
    with _stage("ingest", timings):
        volumes = stage_ingest(cfg.groups_dir, cfg.events, ingest_dir, cfg.start, cfg.date_order, cfg.anon_key)

    cache = cfg.cache_path
    with _stage("embed", timings):
        if cfg.cache is not None and Path(cache).exists():
            cache_read(cache, provider.identity, provider.dim)
            logger.info("reusing embedding cache %s", cache)
        else:
            volumes.update(stage_embed(ingest_dir, cache, provider, cfg.max_inflight))

    matrix, labels = out / "matrix.bin", out / "labels.csv"
    with _stage("fuse", timings):
        ds = stage_fuse(cache, ingest_dir, matrix, labels, cfg.day_range, provider.identity, provider.dim)
        y = ds.y
        zero_message_event_days = int(np.sum((y == 1) & (ds.X.message_totals == 0)))

    with _stage("ingest-reload", timings):
        corpus = read_corpus(ingest_dir / CORPUS_FILE)

    per_seed: dict[str, list[dict]] = {k: [] for k in FEATURE_KINDS}
    graph_losses = {}
    for seed in cfg.seeds:
        sdir = out / f"seed_{seed}"
        sdir.mkdir(exist_ok=True)
        with _stage("split", timings):
            split = stage_split(labels, sdir / "split.json", cfg.split_kind, cfg.ratio, seed)
        with _stage("train-graph", timings):
            result = stage_train_graph(load_dataset(matrix, labels), split, replace(cfg.graph, seed=seed),
                                       sdir / "params.bin", sdir / "graph_embeds.npy")
            graph_losses[str(seed)] = {"initial": result.losses[0], "final": result.losses[-1],
                                       "pos_weight": result.pos_weight}
        with _stage("evaluate", timings):
            H = np.load(sdir / "graph_embeds.npy")
            records = stage_evaluate(load_dataset(matrix, labels), read_split(sdir / "split.json"), FEATURE_KINDS,
                                     seed, H, corpus, cfg.forest)
            (sdir / "metrics.json").write_text(json.dumps(records, indent=1) + "\n", encoding="utf-8")
            for r in records:
                per_seed[r["model_kind"]].append({k: v for k, v in r.items() if k not in ("vote_fraction", "test_dates")})
        for k in ("split", "train-graph", "evaluate"):
            timings[f"{k}[{seed}]"] = timings.pop(k)

    metrics = {k: {"per_seed": rows, "median": _median_block(rows)} for k, rows in per_seed.items()}
    medians = {k: v["median"] for k, v in metrics.items()}
    write_comparison(out / "comparison.csv", medians)
    ordering = sorted(FEATURE_KINDS, key=lambda k: (-medians[k]["f1"], k))

    with _stage("analysis", timings):
        analyses = run_analyses(ingest_dir, ingest_dir, out / "analysis", provider, cfg.keywords,
                                cfg.top_n, cfg.top_k, cfg.drift_terms)

    artifacts = {p.relative_to(out).as_posix(): _sha256(p)
                 for p in sorted(out.rglob("*")) if p.is_file() and p.name != "report.json"}
    n_pos = int(y.sum())
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "provider": provider.identity,
        "volumes": {**volumes, "days": int(len(y)),
                    "range": [ds.X.dates[0].isoformat(), ds.X.dates[-1].isoformat()]},
        "class_balance": {"positive_days": n_pos, "negative_days": int(len(y) - n_pos),
                          "positive_fraction": n_pos / len(y)},
        "zero_message_event_days": zero_message_event_days,
        "hyperparameters": cfg.hyperparameters(),
        "graph_training": graph_losses,
        "metrics": metrics,
        "ordering": ordering,
        "hybrid_minus_text_f1": medians["hybrid"]["f1"] - medians["text"]["f1"],
        "analysis": analyses,
        "artifacts": artifacts,
        "paths": {"groups_dir": str(cfg.groups_dir), "events": str(cfg.events), "out_dir": str(out),
                  "cache": str(cache)},
        "timings": timings,
    }
    report["determinism_hash"] = determinism_hash(report)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
