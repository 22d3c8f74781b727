from __future__ import annotations

import json
import math
from datetime import date, datetime, timedelta, timezone
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import cooc_oracle, tfidf_oracle
from sentinel.analysis import (
    ATTACK_KEYWORDS,
    build_cooc_graph,
    coordination_density,
    filter_seed_messages,
    graph_density,
    minmax,
    pca_2d,
    tfidf_weekly,
    week_start,
    weekly_drift,
    weekly_events,
    weekly_volume,
)
from sentinel.embed import LocalHashProvider
from sentinel.errors import ProjectionError
from sentinel.ingest import CyberEvent, RawMessage, daily_event_counts
from sentinel.text import content_tokens, load_stopwords

MONDAY = date(2023, 1, 2)


def msg(text: str, day: date = MONDAY, group: str = "g", hour: int = 12) -> RawMessage:
    return RawMessage(group, datetime(day.year, day.month, day.day, hour, tzinfo=timezone.utc), text)


# --- weekly series ------------------------------------------------------------

def test_seven_messages_one_week():
    s = weekly_volume([msg("x", MONDAY + timedelta(days=i)) for i in range(7)])
    assert s.week_starts == [MONDAY] and s.values.tolist() == [7]


def test_constant_series_minmax_is_zero():
    assert minmax([4, 4, 4]).tolist() == [0, 0, 0]
    assert minmax([1, 3, 2]).tolist() == [0, 1, 0.5]


def test_three_week_calendar_oracle():
    # Sun 2023-01-01 belongs to the week of Mon 2022-12-26
    days = [date(2023, 1, 1), date(2023, 1, 2), date(2023, 1, 8), date(2023, 1, 9), date(2023, 1, 15)]
    s = weekly_volume([msg("x", d) for d in days])
    assert s.week_starts == [date(2022, 12, 26), date(2023, 1, 2), date(2023, 1, 9)]
    assert s.values.tolist() == [1, 2, 2]
    n = weekly_volume([msg("x", d) for d in days], normalize=True)
    assert n.normalized and n.values.tolist() == [0, 1, 1]


def test_gap_weeks_are_zero_and_contiguous():
    s = weekly_volume([msg("x", MONDAY), msg("x", MONDAY + timedelta(weeks=3))])
    assert s.values.tolist() == [1, 0, 0, 1]
    assert all((b - a).days == 7 for a, b in zip(s.week_starts, s.week_starts[1:]))


def test_weekly_events():
    evs = [CyberEvent(MONDAY, "m", "malware"), CyberEvent(MONDAY, "m", "malware"), CyberEvent(MONDAY + timedelta(days=8), "m", "x")]
    tl = daily_event_counts(evs, MONDAY, MONDAY + timedelta(days=13))
    assert weekly_events(tl).values.tolist() == [2, 1]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 400), min_size=1, max_size=80))
def test_bucketing_completeness(offsets):
    corpus = [msg("x", date(2023, 1, 1) + timedelta(days=o)) for o in offsets]
    s = weekly_volume(corpus)
    assert s.values.sum() == len(corpus)
    assert all(w.weekday() == 0 for w in s.week_starts)
    assert s.week_starts[0] == week_start(min(m.day for m in corpus))


def test_weekly_csv(tmp_path):
    weekly_volume([msg("x"), msg("y", MONDAY + timedelta(weeks=1)), msg("z", MONDAY + timedelta(weeks=1))]).write_csv(tmp_path / "w.csv")
    assert (tmp_path / "w.csv").read_text().splitlines() == [
        "week_start,value,normalized_value", "2023-01-02,1,0", "2023-01-09,2,1"]


# --- seed filter --------------------------------------------------------------

def test_seed_filter_examples():
    texts = ["new CVE-2023-1234 in the wild", "adaptive", "APT29 activity", "apt.", "capture the flag",
             "cve list", "aptly named", "see cve-2021-44228"]
    kept = [m.text for m in filter_seed_messages([msg(t) for t in texts])]
    assert kept == ["new CVE-2023-1234 in the wild", "APT29 activity", "apt.", "cve list", "see cve-2021-44228"]


# --- co-occurrence ------------------------------------------------------------

def test_cooc_dedup_within_message():
    g = build_cooc_graph(["attack attack threat"])
    assert g.edges == {("attack", "threat"): 1}


def test_cooc_additivity():
    g = build_cooc_graph(["vulnerability tools", "new tools for vulnerability"])
    assert g.weight("vulnerability", "tools") == 2 and g.weight("tools", "vulnerability") == 2


FOUR = ["ransomware hits hospital network", "hospital network outage after ransomware",
        "phishing kit sold", "phishing kit targets hospital"]


def test_cooc_matches_pair_enumeration():
    stop = load_stopwords()
    toks = [content_tokens(t, stop) for t in FOUR]
    g = build_cooc_graph(FOUR)
    assert g.edges == cooc_oracle(toks)
    assert sum(g.edges.values()) == sum(math.comb(len(set(t)), 2) for t in toks)
    assert all(a < b and w >= 1 for (a, b), w in g.edges.items())


def test_cooc_top_n_truncation():
    g = build_cooc_graph(FOUR, top_n=2)
    # kit, network, phishing and ransomware all appear twice; ties are lexicographic
    assert g.nodes == {"hospital": 3, "kit": 2}
    assert set(g.edges) <= {("hospital", "kit")}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["alpha", "beta", "gamma", "delta", "epsilon", "the", "a1"]), max_size=8), max_size=10))
def test_cooc_symmetry_and_total(token_lists):
    texts = [" ".join(t) for t in token_lists]
    g = build_cooc_graph(texts, top_n=100)
    stop = load_stopwords()
    kept = [content_tokens(t, stop) for t in texts]
    assert sum(g.edges.values()) == sum(math.comb(len(set(k)), 2) for k in kept)
    for a, b in combinations(sorted(g.nodes), 2):
        assert g.weight(a, b) == g.weight(b, a)


def test_cooc_exports():
    g = build_cooc_graph(["attack threat", "attack tools"])
    dot = g.to_dot()
    assert dot.startswith("graph cooccurrence {") and '"attack" -- "threat" [weight=1];' in dot
    data = json.loads(g.to_json())
    assert {"source": "attack", "target": "tools", "weight": 1} in data["edges"]
    assert {"term": "attack", "freq": 2} in data["nodes"]


# --- weekly TF-IDF ------------------------------------------------------------

THREE_WEEKS = [msg("malware phishing malware"), msg("phishing botnet", MONDAY + timedelta(days=9)),
               msg("phishing", MONDAY + timedelta(days=16)), msg("malware", MONDAY + timedelta(days=20))]


def test_tfidf_hand_table():
    tf = tfidf_weekly(THREE_WEEKS, top_k=2)
    assert tf.terms == ["botnet", "malware", "phishing"]
    i_bot, i_mal = math.log(4 / 2) + 1, math.log(4 / 3) + 1
    hand = np.array([[0.0, 2 * i_mal, 1.0], [i_bot, 0.0, 1.0], [0.0, i_mal, 1.0]])
    assert np.max(np.abs(tf.scores - hand)) <= 1e-12
    assert tf.top_terms[0] == [("malware", 2 * i_mal), ("phishing", 1.0)]
    assert tf.top_terms[1][0][0] == "botnet"


def test_tfidf_every_week_term_has_unit_idf_and_absent_is_zero():
    tf = tfidf_weekly(THREE_WEEKS)
    assert tf.column("phishing").tolist() == [1.0, 1.0, 1.0]
    assert tf.column("botnet")[0] == 0.0


def test_tfidf_matches_oracle_and_top_ordering():
    corpus = [msg(t, MONDAY + timedelta(weeks=w)) for w, t in enumerate(
        ["exploit exploit ransomware", "ransomware ddos ddos ddos", "exploit ddos phishing phishing", "botnet"])]
    tf = tfidf_weekly(corpus, top_k=3)
    terms, table = tfidf_oracle([content_tokens(m.text) for m in corpus])
    assert tf.terms == terms and np.max(np.abs(tf.scores - np.array(table))) <= 1e-12
    for top in tf.top_terms:
        scores = [s for _, s in top]
        assert scores == sorted(scores, reverse=True)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(2, 6))
def test_tfidf_monotonicity(tf_count, df, n_weeks):
    df = min(df, n_weeks)
    corpus = []
    for w in range(n_weeks):
        text = "filler " + ("target " * (tf_count if w == 0 else 1) if w < df else "")
        corpus.append(msg(text, MONDAY + timedelta(weeks=w)))
    base = tfidf_weekly(corpus).column("target")[0]
    more_tf = list(corpus)
    more_tf[0] = msg(corpus[0].text + " target", MONDAY)
    assert tfidf_weekly(more_tf).column("target")[0] > base
    if df < n_weeks:
        more_df = list(corpus)
        more_df[df] = msg(corpus[df].text + " target", MONDAY + timedelta(weeks=df))
        assert tfidf_weekly(more_df).column("target")[0] < base
    assert (tfidf_weekly(corpus).scores >= 0).all()


def test_tfidf_csv_outputs(tmp_path):
    tf = tfidf_weekly(THREE_WEEKS, top_k=1)
    tf.write_csv(tmp_path / "t.csv", keywords=["phishing", "malware", "absent"])
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "week_start,phishing,malware"
    tf.write_top_csv(tmp_path / "top.csv")
    lines = (tmp_path / "top.csv").read_text().splitlines()
    assert lines[0] == "week_start,rank,term,score" and lines[2].startswith("2023-01-09,1,botnet,")


# --- coordination -------------------------------------------------------------

def test_density_complete_graph():
    s = coordination_density([msg("same text", group=g) for g in "ABC"])
    assert s.densities.tolist() == [1.0] and s.node_counts.tolist() == [3] and s.edge_counts.tolist() == [3]


def test_density_no_shared_text():
    s = coordination_density([msg(f"text {g}", group=g) for g in "ABC"])
    assert s.densities.tolist() == [0.0]


def test_density_two_edges():
    corpus = [msg("one", group="A"), msg(" one ", group="B"), msg("two", group="C"), msg("two\n", group="D"),
              msg("unique", group="A")]
    s = coordination_density(corpus)
    assert s.edge_counts.tolist() == [2] and s.densities[0] == 2 / 6


def test_density_is_per_week():
    s = coordination_density([msg("same", group="A"), msg("same", MONDAY + timedelta(days=7), group="B")])
    assert s.densities.tolist() == [0.0, 0.0]


def test_density_formula_bounds():
    assert graph_density(1, 0) == 0.0 and graph_density(0, 0) == 0.0
    for v in range(2, 8):
        for e in range(0, v * (v - 1) // 2 + 1):
            d = graph_density(v, e)
            assert 0.0 <= d <= 1.0 and (d == 1.0) == (e == v * (v - 1) // 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("ABCDE"), st.sampled_from(["x", "y", "z", "w"]), st.integers(0, 20)), min_size=1, max_size=30))
def test_density_property(posts):
    s = coordination_density([msg(t, MONDAY + timedelta(days=d), group=g) for g, t, d in posts])
    assert ((s.densities >= 0) & (s.densities <= 1)).all()


def test_coordination_csv(tmp_path):
    coordination_density([msg("same", group=g) for g in "AB"]).write_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().splitlines() == ["week_start,nodes,edges,density", "2023-01-02,2,1,1.0"]


# --- drift projection ---------------------------------------------------------

def test_pca_is_rotation_on_centered_2d():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((8, 2)) * np.array([3.0, 1.0])
    X -= X.mean(axis=0)
    coords, axes = pca_2d(X)
    d_in = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d_out = np.linalg.norm(coords[:, None] - coords[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-9
    assert np.allclose(axes @ axes.T, np.eye(2), atol=1e-9)


def test_pca_sign_convention_and_determinism():
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 5))
    a, axes = pca_2d(X)
    b, _ = pca_2d(X.copy())
    assert np.array_equal(a, b)
    for v in axes:
        assert v[np.flatnonzero(np.abs(v) > 1e-12)[0]] > 0
    assert a[:, 0].var() >= a[:, 1].var()


DRIFT_WEEKS = ["malware phishing botnet", "malware phishing botnet trojan", "malware ransomware exploit",
               "ransomware exploit ddos", "ransomware exploit ddos spyware"]


def drift_corpus(texts):
    return [msg(t, MONDAY + timedelta(weeks=w)) for w, t in enumerate(texts)]


def test_drift_planted_shift_separates_clusters():
    rows = weekly_drift(drift_corpus(DRIFT_WEEKS), LocalHashProvider(64), keywords=ATTACK_KEYWORDS)
    assert [r[0] for r in rows] == [MONDAY + timedelta(weeks=i) for i in range(5)]
    P = np.array([[x, y] for _, x, y in rows])
    early, late = P[:2], P[3:]
    gap = np.linalg.norm(early.mean(0) - late.mean(0))
    spread = max(np.linalg.norm(early[0] - early[1]), np.linalg.norm(late[0] - late[1]))
    assert gap > 2 * spread


def test_drift_identical_weeks_coincide_and_deterministic():
    texts = ["malware phishing", "malware phishing", "ransomware ddos", "malware phishing"]
    p = LocalHashProvider(32)
    rows = weekly_drift(drift_corpus(texts), p, keywords=ATTACK_KEYWORDS)
    assert rows[0][1:] == rows[1][1:] == rows[3][1:]
    assert rows == weekly_drift(drift_corpus(texts), p, keywords=ATTACK_KEYWORDS)


def test_drift_needs_three_weeks():
    with pytest.raises(ProjectionError):
        weekly_drift(drift_corpus(["malware", "phishing"]), LocalHashProvider(16))
    with pytest.raises(ProjectionError):
        weekly_drift(drift_corpus(["malware", "hello there", "phishing"]), LocalHashProvider(16), keywords=ATTACK_KEYWORDS)
