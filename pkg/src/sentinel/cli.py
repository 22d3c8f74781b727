"""Command-line entry point: ``sentinel <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence,
5 provider or transport error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import date
from pathlib import Path

import numpy as np

from . import analysis
from .classify import FEATURE_KINDS, make_split
from .config import DATE_ORDERS, SPLIT_KINDS, load_config, parse_range
from .daygraph import AGGREGATORS, TrainConfig
from .embed import DEFAULT_BATCH_LIMIT, DEFAULT_REMOTE_MODEL, EmbeddingProviderSpec
from .errors import ConfigError, SentinelError, StageError
from .ingest import daily_event_counts, read_corpus, read_events
from .pipeline import ForestConfig
from .runner import (
    _corpus_file,
    _events_file,
    full_run,
    load_dataset,
    read_split,
    stage_embed,
    stage_evaluate,
    stage_fuse,
    stage_ingest,
    stage_split,
    stage_train_graph,
    write_comparison,
)
from .synth import SynthConfig, write_synth

logger = logging.getLogger("sentinel")


def _range_arg(text: str) -> tuple[date, date]:
    try:
        return parse_range(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM-DD:YYYY-MM-DD, got {text!r}") from None


def _provider_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("local", "remote"), default="local")
    p.add_argument("--dim", type=int, default=None, help="embedding dimension (default 32 local, 1536 remote)")
    p.add_argument("--model", default=DEFAULT_REMOTE_MODEL)
    p.add_argument("--endpoint", default=EmbeddingProviderSpec.endpoint)
    p.add_argument("--batch-limit", type=int, default=DEFAULT_BATCH_LIMIT)
    p.add_argument("--hash-seed", type=int, default=0)


def _provider(args):
    kind = "remote" if args.provider == "remote" else "local-hash"
    dim = args.dim or (1536 if kind == "remote" else 32)
    spec = EmbeddingProviderSpec(kind, args.model, dim, args.batch_limit, args.hash_seed, args.endpoint)
    return spec.build()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sentinel", description="Chat-signal cyber event forecasting pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse group exports and the incident timeline")
    p.add_argument("--groups-dir", type=Path, required=True)
    p.add_argument("--events", type=Path, required=True)
    p.add_argument("--start", type=date.fromisoformat, default=date(2023, 1, 1))
    p.add_argument("--date-order", choices=DATE_ORDERS, default="iso")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("embed", help="embed and pool messages per group-day into a cache file")
    p.add_argument("--corpus", type=Path, required=True, help="ingest output directory or corpus.tsv")
    _provider_args(p)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--max-inflight", type=int, default=4)

    p = sub.add_parser("fuse", help="assemble the day x (group*dim) matrix and label sidecar")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--events", type=Path, required=True, help="ingest output directory or events.tsv")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None, help="label CSV path (default: <out>.labels.csv)")
    p.add_argument("--range", type=_range_arg, default=None)

    p = sub.add_parser("split", help="write a train/test split mask")
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--split", choices=SPLIT_KINDS, default="stratified")
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train-graph", help="train GraphSAGE on the day graph")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True, help="split JSON from `sentinel split`")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--pos-weight", type=float, default=None)
    p.add_argument("--aggregator", choices=AGGREGATORS, default="typed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--embeds-out", type=Path, default=None, help="graph embeddings .npy (default: <out>.npy)")

    p = sub.add_parser("evaluate", help="train and score random forests")
    p.add_argument("--features", default="hybrid", help="comma list of text, hybrid, tfidf")
    p.add_argument("--matrix", type=Path, required=True)
    p.add_argument("--labels", type=Path, default=None, help="default: <matrix>.labels.csv")
    p.add_argument("--graph-embeds", type=Path, default=None)
    p.add_argument("--corpus", type=Path, default=None, help="needed for tfidf features")
    p.add_argument("--mask", type=Path, default=None, help="split JSON; otherwise derived from --split/--seed")
    p.add_argument("--split", choices=SPLIT_KINDS, default="stratified")
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trees", type=int, default=251)
    p.add_argument("--max-depth", type=int, default=None)
    p.add_argument("--min-leaf", type=int, default=1)
    p.add_argument("--class-weight", choices=("balanced",), default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--comparison", type=Path, default=None, help="also write a model comparison CSV")

    p = sub.add_parser("analyze", help="exploratory weekly analyses")
    p.add_argument("analysis", choices=("volume", "cooc", "tfidf", "coordination", "drift"))
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--events", type=Path, default=None, help="volume: bucket events instead of messages")
    p.add_argument("--seeds", default="apt,cve")
    p.add_argument("--top-n", type=int, default=50)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--keywords", default=None, help="comma list; tfidf CSV columns and drift term filter")
    p.add_argument("--drift-terms", type=int, default=20)
    _provider_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus with a planted signal")
    p.add_argument("--groups", type=int, default=4)
    p.add_argument("--days", type=int, default=240)
    p.add_argument("--event-rate", type=float, default=0.3)
    p.add_argument("--lead", type=int, default=1)
    p.add_argument("--signal", type=float, default=0.9)
    p.add_argument("--messages", default="3-10", help="per group-day range, e.g. 3-10")
    p.add_argument("--forward-rate", type=float, default=0.02)
    p.add_argument("--start", type=date.fromisoformat, default=date(2023, 1, 1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", type=Path, required=True)
    return ap


def _labels_for(matrix: Path, labels: Path | None) -> Path:
    return labels or matrix.with_suffix(".labels.csv")


def _cmd_ingest(a) -> None:
    summary = stage_ingest(a.groups_dir, a.events, a.out, a.start, a.date_order)
    print(json.dumps(summary, sort_keys=True))


def _cmd_embed(a) -> None:
    print(json.dumps(stage_embed(a.corpus, a.cache, _provider(a), a.max_inflight), sort_keys=True))


def _cmd_fuse(a) -> None:
    ds = stage_fuse(a.cache, a.events, a.out, _labels_for(a.out, a.labels), a.range)
    print(json.dumps({"days": ds.X.n_days, "groups": len(ds.X.group_order), "positive_days": int(ds.y.sum())}))


def _cmd_split(a) -> None:
    s = stage_split(a.labels, a.out, a.split, a.ratio, a.seed)
    print(json.dumps({"train": len(s.train_indices), "test": len(s.test_indices)}))


def _cmd_train_graph(a) -> None:
    ds = load_dataset(a.matrix, a.labels)
    cfg = TrainConfig(a.hidden, a.embed, a.lr, a.epochs, a.pos_weight, a.seed, a.aggregator)
    result = stage_train_graph(ds, read_split(a.mask), cfg, a.out, a.embeds_out or a.out.with_suffix(".npy"))
    print(json.dumps({"initial_loss": result.losses[0], "final_loss": result.losses[-1], "pos_weight": result.pos_weight}))


def _cmd_evaluate(a) -> None:
    kinds = [k.strip() for k in a.features.split(",") if k.strip()]
    bad = [k for k in kinds if k not in FEATURE_KINDS]
    if bad or not kinds:
        raise ConfigError([f"--features must be a comma list of {', '.join(FEATURE_KINDS)}"])
    if a.trees < 1 or a.trees % 2 == 0:
        raise ConfigError(["--trees must be a positive odd integer"])
    ds = load_dataset(a.matrix, _labels_for(a.matrix, a.labels))
    if a.mask is not None:
        split = read_split(a.mask)
    else:
        split = make_split(a.split, ds.y, a.ratio, a.seed)
    H = None
    if "hybrid" in kinds:
        if a.graph_embeds is None:
            raise ConfigError(["hybrid features need --graph-embeds"])
        H = np.load(a.graph_embeds)
    corpus = None
    if "tfidf" in kinds:
        if a.corpus is None:
            raise ConfigError(["tfidf features need --corpus"])
        corpus = read_corpus(_corpus_file(a.corpus))
    forest = ForestConfig(a.trees, a.max_depth, a.min_leaf, a.class_weight)
    records = stage_evaluate(ds, split, kinds, a.seed, H, corpus, forest)
    a.out.write_text(json.dumps(records[0] if len(records) == 1 else records, indent=1) + "\n", encoding="utf-8")
    if a.comparison:
        write_comparison(a.comparison, {r["model_kind"]: r for r in records})
    for r in records:
        print(f"{r['model_kind']:>7}  P={r['precision']:.3f} R={r['recall']:.3f} F1={r['f1']:.3f} Acc={r['accuracy']:.3f}")


def _cmd_analyze(a) -> None:
    corpus = read_corpus(_corpus_file(a.corpus))
    keywords = tuple(k.strip().lower() for k in a.keywords.split(",") if k.strip()) if a.keywords else None
    kind = a.analysis
    if kind == "volume":
        if a.events is not None:
            events = read_events(_events_file(a.events))
            days = [ev.date for ev in events]
            series = analysis.weekly_events(daily_event_counts(events, min(days), max(days)))
        else:
            series = analysis.weekly_volume(corpus)
        series.write_csv(a.out)
    elif kind == "cooc":
        seeds = [s.strip() for s in a.seeds.split(",") if s.strip()]
        g = analysis.build_cooc_graph(analysis.filter_seed_messages(corpus, seeds), top_n=a.top_n)
        a.out.write_text(g.to_dot() if a.out.suffix == ".dot" else g.to_json() + "\n", encoding="utf-8")
    elif kind == "tfidf":
        tf = analysis.tfidf_weekly(corpus, a.top_k)
        tf.write_csv(a.out, keywords)
        tf.write_top_csv(a.out.with_name(a.out.stem + "_top.csv"))
    elif kind == "coordination":
        analysis.coordination_density(corpus).write_csv(a.out)
    else:
        rows = analysis.weekly_drift(corpus, _provider(a), a.drift_terms, keywords or analysis.ATTACK_KEYWORDS)
        analysis.write_drift_csv(a.out, rows)


def _cmd_synth(a) -> None:
    lo, sep, hi = a.messages.partition("-")
    try:
        mmin, mmax = int(lo), int(hi if sep else lo)
    except ValueError:
        raise ConfigError([f"--messages must look like 3-10, got {a.messages!r}"]) from None
    cfg = SynthConfig(a.groups, a.days, a.event_rate, a.lead, a.signal, mmin, mmax, a.seed, a.start, a.forward_rate)
    out = write_synth(a.out, cfg)
    print(json.dumps({"groups": len(out.groups), "event_days": len(out.manifest["event_days"])}))


def _cmd_run(a) -> None:
    report = full_run(load_config(a.config))
    med = {k: v["median"]["f1"] for k, v in report["metrics"].items()}
    print(json.dumps({"ordering": report["ordering"], "median_f1": med,
                      "determinism_hash": report["determinism_hash"]}, sort_keys=True))


COMMANDS = {
    "ingest": _cmd_ingest, "embed": _cmd_embed, "fuse": _cmd_fuse, "split": _cmd_split,
    "train-graph": _cmd_train_graph, "evaluate": _cmd_evaluate, "analyze": _cmd_analyze,
    "synth": _cmd_synth, "run": _cmd_run,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except SentinelError as exc:
        err = {"error": type(exc.cause if isinstance(exc, StageError) else exc).__name__,
               "exit_code": exc.exit_code, "message": str(exc)}
        if isinstance(exc, StageError):
            err["stage"] = exc.stage
        if isinstance(exc, ConfigError):
            err["errors"] = exc.errors
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "OSError", "exit_code": 3, "message": f"{exc.strerror}: {exc.filename}"}), file=sys.stderr)
        return 3
    return 0
