"""Tokenisation, stopwords and the smoothed TF-IDF used by analysis and the TF baseline."""

from __future__ import annotations

import math
import re
from collections import Counter
from functools import lru_cache
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

STOPWORDS_VERSION = 1
_SPLIT = re.compile(r"[^0-9a-z]+")


@lru_cache(maxsize=None)
def load_stopwords() -> frozenset[str]:
    raw = resources.files("sentinel").joinpath(f"data/stopwords_en_v{STOPWORDS_VERSION}.txt").read_text("utf-8")
    return frozenset(w.strip() for w in raw.splitlines() if w.strip() and not w.startswith("#"))


def split_tokens(text: str) -> list[str]:
    """Lowercase and split on anything that is not an ASCII letter or digit."""
    return [t for t in _SPLIT.split(text.lower()) if t]


def content_tokens(text: str, stopwords: Iterable[str] | None = None, min_len: int = 3) -> list[str]:
    stop = load_stopwords() if stopwords is None else stopwords
    return [t for t in split_tokens(text) if len(t) >= min_len and t not in stop]


def top_terms_by_df(docs: Sequence[Sequence[str]], limit: int) -> list[str]:
    df: Counter[str] = Counter()
    for doc in docs:
        df.update(set(doc))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))
    return [term for term, _ in ranked[:limit]]


def tfidf(docs: Sequence[Sequence[str]], vocabulary: Sequence[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Raw-count tf times smoothed idf.

    ``docs`` are already-tokenised documents. Without a vocabulary every term
    seen is a column, sorted lexicographically. Document frequencies are always
    taken over all ``docs``.
    """
    counts = [Counter(doc) for doc in docs]
    df: Counter[str] = Counter()
    for c in counts:
        df.update(c.keys())
    terms = sorted(df) if vocabulary is None else list(vocabulary)
    col = {t: j for j, t in enumerate(terms)}
    out = np.zeros((len(docs), len(terms)))
    n = len(docs)
    idf = {t: math.log((1.0 + n) / (1.0 + df[t])) + 1.0 for t in terms}
    for i, c in enumerate(counts):
        for term, tf in c.items():
            j = col.get(term)
            if j is not None:
                out[i, j] = tf * idf[term]
    return out, terms
