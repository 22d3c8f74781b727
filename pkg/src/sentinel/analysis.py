"""Exploratory outputs over the normalised corpus: weekly series, keyword
co-occurrence, weekly TF-IDF, cross-group coordination and semantic drift."""

from __future__ import annotations

import csv
import itertools
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed import EmbeddingProvider
from .errors import ProjectionError
from .ingest import EventTimeline, RawMessage
from .text import content_tokens, load_stopwords, split_tokens, tfidf

DEFAULT_SEEDS = ("apt", "cve")
# single-token forms of the incident taxonomy, used as the tracked keyword list
ATTACK_KEYWORDS = (
    "malware", "vulnerability", "ransomware", "ddos", "phishing", "exploit", "takeover", "scam",
    "misconfiguration", "injection", "malvertising", "defacement", "sqli", "credential", "bruteforce",
    "deepfake", "hijacking", "drainer", "botnet", "breach", "backdoor", "trojan", "spyware",
)
_CVE_ID = re.compile(r"\bcve-\d{4}-\d+\b", re.IGNORECASE)


def week_start(d: date) -> date:
    return d - timedelta(days=d.weekday())


def _week_range(first: date, last: date) -> list[date]:
    a, b = week_start(first), week_start(last)
    return [a + timedelta(weeks=i) for i in range((b - a).days // 7 + 1)]


def minmax(values: Sequence[float]) -> np.ndarray:
    """Min-max onto [0, 1]; a constant series maps to all zeros."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


# --------------------------------------------------------------------------
# weekly series
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WeeklySeries:
    week_starts: list[date]
    values: np.ndarray
    normalized: bool = False

    def normalized_values(self) -> np.ndarray:
        return minmax(self.values)

    def write_csv(self, path: Path) -> None:
        norm = self.normalized_values()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["week_start", "value", "normalized_value"])
            for d, v, n in zip(self.week_starts, self.values, norm):
                w.writerow([d.isoformat(), _num(v), _num(n)])


def _num(x) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() else repr(x)


def _bucket(days: Iterable[date], weights: Iterable[float] | None = None, normalize: bool = False) -> WeeklySeries:
    days = list(days)
    weights = [1.0] * len(days) if weights is None else list(weights)
    if not days:
        return WeeklySeries([], np.zeros(0), normalize)
    weeks = _week_range(min(days), max(days))
    pos = {w: i for i, w in enumerate(weeks)}
    vals = np.zeros(len(weeks))
    for d, wt in zip(days, weights):
        vals[pos[week_start(d)]] += wt
    series = WeeklySeries(weeks, vals, False)
    return WeeklySeries(weeks, series.normalized_values(), True) if normalize else series


def weekly_volume(corpus: Sequence[RawMessage], normalize: bool = False) -> WeeklySeries:
    return _bucket((m.day for m in corpus), normalize=normalize)


def weekly_events(tl: EventTimeline, normalize: bool = False) -> WeeklySeries:
    return _bucket(tl.dates, tl.counts, normalize)


# --------------------------------------------------------------------------
# seed filter + co-occurrence
# --------------------------------------------------------------------------

def _seed_patterns(seeds: Sequence[str]):
    return [re.compile(rf"{re.escape(s.lower())}\d*") for s in seeds]


def filter_seed_messages(corpus: Iterable[RawMessage], seeds: Sequence[str] = DEFAULT_SEEDS) -> list[RawMessage]:
    """Keep messages with a seed as a whole token (optionally digit-suffixed, e.g. APT29) or a CVE id."""
    patterns = _seed_patterns(seeds)
    out = []
    for m in corpus:
        if _CVE_ID.search(m.text) or any(p.fullmatch(t) for t in split_tokens(m.text) for p in patterns):
            out.append(m)
    return out


@dataclass
class CoocGraph:
    nodes: dict[str, int]
    edges: dict[tuple[str, str], int] = field(default_factory=dict)

    def weight(self, a: str, b: str) -> int:
        return self.edges.get((a, b) if a < b else (b, a), 0)

    def to_dot(self) -> str:
        lines = ["graph cooccurrence {", "  node [shape=plaintext];"]
        for term, freq in self.nodes.items():
            lines.append(f'  "{term}" [freq={freq}];')
        for (a, b), w in sorted(self.edges.items()):
            lines.append(f'  "{a}" -- "{b}" [weight={w}];')
        lines.append("}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({
            "nodes": [{"term": t, "freq": f} for t, f in self.nodes.items()],
            "edges": [{"source": a, "target": b, "weight": w} for (a, b), w in sorted(self.edges.items())],
        }, indent=1)


def build_cooc_graph(messages: Iterable[RawMessage | str], stopwords: Iterable[str] | None = None,
                     top_n: int = 50) -> CoocGraph:
    """Each message adds 1 to every unordered pair of its distinct kept tokens.

    Node frequency is the number of messages containing the token; the graph
    keeps the ``top_n`` most frequent nodes (ties lexicographic).
    """
    stop = load_stopwords() if stopwords is None else frozenset(stopwords)
    freq: Counter[str] = Counter()
    pairs: Counter[tuple[str, str]] = Counter()
    for m in messages:
        text = m.text if isinstance(m, RawMessage) else m
        toks = sorted(set(content_tokens(text, stop)))
        freq.update(toks)
        pairs.update(itertools.combinations(toks, 2))
    kept = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    keep = {t for t, _ in kept}
    edges = {p: w for p, w in sorted(pairs.items()) if p[0] in keep and p[1] in keep}
    return CoocGraph(dict(kept), edges)


# --------------------------------------------------------------------------
# weekly TF-IDF
# --------------------------------------------------------------------------

@dataclass
class TfidfMatrix:
    week_starts: list[date]
    terms: list[str]
    scores: np.ndarray
    top_terms: list[list[tuple[str, float]]]

    def column(self, term: str) -> np.ndarray:
        return self.scores[:, self.terms.index(term)]

    def write_csv(self, path: Path, keywords: Sequence[str] | None = None) -> None:
        cols = list(range(len(self.terms))) if keywords is None else [self.terms.index(k) for k in keywords if k in self.terms]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["week_start"] + [self.terms[j] for j in cols])
            for d, row in zip(self.week_starts, self.scores):
                w.writerow([d.isoformat()] + [repr(float(row[j])) for j in cols])

    def write_top_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["week_start", "rank", "term", "score"])
            for d, top in zip(self.week_starts, self.top_terms):
                for rank, (term, score) in enumerate(top, 1):
                    w.writerow([d.isoformat(), rank, term, repr(score)])


def weekly_documents(corpus: Sequence[RawMessage]) -> tuple[list[date], list[list[str]]]:
    weeks = _week_range(min(m.day for m in corpus), max(m.day for m in corpus)) if corpus else []
    pos = {w: i for i, w in enumerate(weeks)}
    docs: list[list[str]] = [[] for _ in weeks]
    for m in corpus:
        docs[pos[week_start(m.day)]].extend(content_tokens(m.text))
    return weeks, docs


def _top_k(row: np.ndarray, terms: Sequence[str], k: int) -> list[tuple[str, float]]:
    ranked = sorted(((terms[j], float(row[j])) for j in np.flatnonzero(row > 0)), key=lambda ts: (-ts[1], ts[0]))
    return ranked[:k]


def tfidf_weekly(corpus: Sequence[RawMessage], top_k: int = 10) -> TfidfMatrix:
    """One document per calendar week (Monday start); tf = raw count, idf smoothed."""
    weeks, docs = weekly_documents(corpus)
    scores, terms = tfidf(docs)
    return TfidfMatrix(weeks, terms, scores, [_top_k(row, terms, top_k) for row in scores])


# --------------------------------------------------------------------------
# coordination
# --------------------------------------------------------------------------

@dataclass
class CoordinationSeries:
    week_starts: list[date]
    densities: np.ndarray
    node_counts: np.ndarray
    edge_counts: np.ndarray

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["week_start", "nodes", "edges", "density"])
            for row in zip(self.week_starts, self.node_counts, self.edge_counts, self.densities):
                w.writerow([row[0].isoformat(), int(row[1]), int(row[2]), repr(float(row[3]))])


def graph_density(n_nodes: int, n_edges: int) -> float:
    return 0.0 if n_nodes < 2 else 2.0 * n_edges / (n_nodes * (n_nodes - 1))


def coordination_density(corpus: Sequence[RawMessage]) -> CoordinationSeries:
    """Weekly graphs linking groups that posted an identical (trimmed) text that week."""
    if not corpus:
        return CoordinationSeries([], np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    weeks = _week_range(min(m.day for m in corpus), max(m.day for m in corpus))
    posters: dict[date, set[str]] = defaultdict(set)
    shared: dict[date, dict[str, set[str]]] = defaultdict(lambda: defaultdict(set))
    for m in corpus:
        w = week_start(m.day)
        posters[w].add(m.group_id)
        text = m.text.strip()
        if text:
            shared[w][text].add(m.group_id)
    dens, nodes, edges = [], [], []
    for w in weeks:
        pairs = set()
        for groups in shared[w].values():
            pairs.update(itertools.combinations(sorted(groups), 2))
        v, e = len(posters[w]), len(pairs)
        nodes.append(v)
        edges.append(e)
        dens.append(graph_density(v, e))
    return CoordinationSeries(weeks, np.array(dens), np.array(nodes), np.array(edges))


# --------------------------------------------------------------------------
# drift projection
# --------------------------------------------------------------------------

def _power_top(C: np.ndarray, rng: np.random.Generator, max_iter: int, tol: float) -> tuple[float, np.ndarray]:
    v = rng.standard_normal(C.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = C @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, np.zeros_like(v)
        w /= norm
        done = np.linalg.norm(w - v) < tol
        v, lam = w, norm
        if done:
            break
    return lam, v


def pca_2d(X: np.ndarray, max_iter: int = 10000, tol: float = 1e-13) -> tuple[np.ndarray, np.ndarray]:
    """Top-two principal axes by power iteration with deflation.

    Each axis is oriented so its first nonzero loading is positive; the second
    is explicitly orthogonalised against the first. Returns (coords, axes).
    """
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc
    rng = np.random.default_rng(0)
    axes = []
    for _ in range(2):
        lam, v = _power_top(C, rng, max_iter, tol)
        for a in axes:
            v = v - (v @ a) * a
        n = np.linalg.norm(v)
        v = v / n if n > 1e-12 else np.zeros_like(v)
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            v = -v
        axes.append(v)
        C = C - lam * np.outer(v, v)
    A = np.stack(axes)
    return Xc @ A.T, A


def weekly_drift(corpus: Sequence[RawMessage], provider: EmbeddingProvider, top_terms: int = 20,
                 keywords: Sequence[str] | None = None) -> list[tuple[date, float, float]]:
    """Average the embeddings of each week's top TF-IDF terms, then project to 2-D.

    With ``keywords`` only those terms are eligible. Weeks with no eligible
    term are skipped; fewer than three remaining weeks is an error.
    """
    tf = tfidf_weekly(corpus, top_k=len(keywords) if keywords else top_terms)
    allowed = None if keywords is None else set(keywords)
    weeks, vectors = [], []
    for w, row in zip(tf.week_starts, tf.scores):
        ranked = _top_k(row, tf.terms, len(tf.terms))
        chosen = [t for t, _ in ranked if allowed is None or t in allowed][:top_terms]
        if not chosen:
            continue
        vecs = provider.embed(chosen)
        weeks.append(w)
        vectors.append(vecs.mean(axis=0))
    if len(weeks) < 3:
        raise ProjectionError(f"drift projection needs >= 3 weeks with terms, got {len(weeks)}")
    coords, _ = pca_2d(np.array(vectors))
    return [(w, float(x), float(y)) for w, (x, y) in zip(weeks, coords)]


def write_drift_csv(path: Path, rows: Sequence[tuple[date, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["week_start", "x", "y"])
        for d, x, y in rows:
            w.writerow([d.isoformat(), repr(x), repr(y)])
