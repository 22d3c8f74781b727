from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_matrix, brute_pool, random_fusion_fixture
from sentinel.embed import DailyGroupEmbedding, pool_daily
from sentinel.errors import AlignmentError, ContractError
from sentinel.fuse import (
    align_labels,
    build_daily_matrix,
    default_range,
    read_label_sidecar,
    read_matrix,
    write_label_sidecar,
    write_matrix,
)
from sentinel.ingest import CyberEvent, EventTimeline, GroupDayDoc, daily_event_counts

D0 = date(2023, 1, 1)


def e(g, t, vec, n=1):
    return DailyGroupEmbedding(g, D0 + timedelta(days=t), np.asarray(vec, dtype=np.float32), n)


def test_zero_fill_missing_group_day():
    ents = [e("A", 0, [1, 2]), e("A", 1, [3, 4]), e("A", 2, [5, 6]), e("B", 0, [7, 8]), e("B", 2, [9, 10])]
    X = build_daily_matrix(ents, D0, D0 + timedelta(days=2))
    assert X.group_order == ["A", "B"]
    assert X.rows.tolist() == [[1, 2, 7, 8], [3, 4, 0, 0], [5, 6, 9, 10]]


def test_empty_entries_give_zero_rows():
    X = build_daily_matrix([], D0, D0 + timedelta(days=4), dim=3)
    assert X.rows.shape == (5, 0) and X.n_days == 5


def test_single_entry_identity():
    X = build_daily_matrix([e("g", 0, [0.1, -0.2, 0.3])], D0, D0)
    assert np.array_equal(X.rows[0], np.array([0.1, -0.2, 0.3], dtype=np.float32))


def test_duplicate_entries_rejected():
    with pytest.raises(ContractError):
        build_daily_matrix([e("g", 0, [1, 2]), e("g", 0, [3, 4])], D0, D0)


def test_mixed_dims_rejected():
    with pytest.raises(ContractError):
        build_daily_matrix([e("a", 0, [1, 2]), e("b", 0, [1, 2, 3])], D0, D0)


def test_out_of_range_entries_truncated_but_group_counted():
    X = build_daily_matrix([e("a", 0, [1, 1]), e("b", 9, [2, 2])], D0, D0 + timedelta(days=1))
    assert X.group_order == ["a", "b"] and X.rows.tolist() == [[1, 1, 0, 0], [0, 0, 0, 0]]


def test_block_recovery_and_permutation_invariance():
    rng = np.random.default_rng(5)
    ents = [e(f"g{g}", t, rng.standard_normal(3)) for g in range(3) for t in range(6) if (g + t) % 4]
    X = build_daily_matrix(ents, D0, D0 + timedelta(days=5))
    for en in ents:
        assert np.array_equal(X.block((en.date - D0).days, en.group_id), en.vector)
    rev = build_daily_matrix(list(reversed(ents)), D0, D0 + timedelta(days=5))
    assert np.array_equal(X.rows, rev.rows)
    assert X.rows.shape[1] == 3 * 3


@pytest.mark.parametrize("seed", range(10))
def test_pool_then_fuse_matches_brute_force(seed):
    raw, start, end, dim = random_fusion_fixture(np.random.default_rng(seed))
    ents = [pool_daily(GroupDayDoc(g, d, ("m",) * len(vs)), vs) for (g, d), vs in raw.items()]
    X = build_daily_matrix(ents, start, end, dim)
    expected = brute_matrix({k: brute_pool(vs) for k, vs in raw.items()}, start, end, dim)
    assert np.array_equal(X.rows, expected)


def test_align_labels_thresholds():
    X = build_daily_matrix([e("a", 0, [1, 1])], D0, D0 + timedelta(days=2))
    tl = EventTimeline(D0, D0 + timedelta(days=2), np.array([2, 0, 1]), np.array([1, 0, 1]))
    assert align_labels(X, tl).y.tolist() == [1, 0, 1]
    zero = daily_event_counts([], D0, D0 + timedelta(days=2))
    assert align_labels(X, zero).y.tolist() == [0, 0, 0]


def test_align_labels_gap_names_day():
    X = build_daily_matrix([e("a", 0, [1, 1])], D0, D0 + timedelta(days=3))
    tl = daily_event_counts([], D0, D0 + timedelta(days=2))
    with pytest.raises(AlignmentError) as exc:
        align_labels(X, tl)
    assert exc.value.missing_days == [D0 + timedelta(days=3)]
    assert "2023-01-04" in str(exc.value)


def test_align_labels_offset_window():
    X = build_daily_matrix([e("a", 0, [1, 1])], D0 + timedelta(days=1), D0 + timedelta(days=2))
    tl = daily_event_counts([CyberEvent(D0 + timedelta(days=2), "m", "malware")], D0, D0 + timedelta(days=5))
    assert align_labels(X, tl).y.tolist() == [0, 1]


def test_default_range_is_overlap():
    ents = [e("a", 2, [1, 1]), e("a", 9, [1, 1])]
    evs = [CyberEvent(D0 + timedelta(days=5), "m", "x"), CyberEvent(D0 + timedelta(days=20), "m", "x")]
    assert default_range(ents, evs) == (D0 + timedelta(days=5), D0 + timedelta(days=9))


def test_matrix_and_sidecar_round_trip(tmp_path):
    ents = [e("b", 1, [0.5, -0.25], 3), e("a", 0, [1.0, 2.0], 2)]
    X = build_daily_matrix(ents, D0, D0 + timedelta(days=2))
    write_matrix(tmp_path / "m.bin", X, "prov")
    pid, back = read_matrix(tmp_path / "m.bin")
    assert pid == "prov" and back.dates == X.dates and back.group_order == X.group_order
    assert np.array_equal(back.rows, X.rows) and back.message_totals.tolist() == [2, 3, 0]
    ds = align_labels(X, daily_event_counts([CyberEvent(D0, "m", "x")], D0, D0 + timedelta(days=2)))
    write_label_sidecar(tmp_path / "l.csv", ds)
    dates, y = read_label_sidecar(tmp_path / "l.csv")
    assert dates == X.dates and y.tolist() == [1, 0, 0]
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "date,label,messages_total"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_law(seed):
    raw, start, end, dim = random_fusion_fixture(np.random.default_rng(seed))
    ents = [pool_daily(GroupDayDoc(g, d, ("m",)), vs) for (g, d), vs in raw.items()]
    X = build_daily_matrix(ents, start, end, dim)
    assert X.rows.shape == ((end - start).days + 1, dim * len({g for g, _ in raw}))
