import csv
import io
import json
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lors.budget import (
    CSV_COLUMNS,
    REFERENCE_ADAPTIVE,
    REFERENCE_RANKS,
    REFERENCE_STATIC,
    BudgetQuery,
    count_dense,
    count_lors,
    count_model,
    format_csv,
    format_json,
    format_text,
    half_up,
    reference_tables,
    per_group_count,
    report,
    table_report,
    total_lors,
)
from lors.dense import DenseAdaptive, DenseStatic
from lors.params import AdaptiveLorsParam, StaticLorsParam


def test_static_hand_example():
    # d=4, h=4, N=2, K=1, r=1: 16/2 + 1*(4 + 4) = 16 of 16 dense
    r = report(BudgetQuery("static", d=4, h=4, r=1, K=1, N=2))
    assert (r.with_lors, r.without_lors, r.percentage) == (16.0, 16.0, 100.0)


def test_adaptive_hand_example():
    # d_q=2, d=h=3, N=1, K=1, r=1: 2*9 + (2*1*1 + 3 + 3) = 26
    q = BudgetQuery("adaptive", d=3, h=3, r=1, K=1, N=1, d_q=2)
    assert count_dense(q) == 18
    assert per_group_count(q) == 8
    assert count_lors(q) == 26.0


def test_reference_static_shape():
    assert count_dense(REFERENCE_STATIC) == 32768 * 256 == 8388608
    assert count_lors(REFERENCE_STATIC) == pytest.approx(8388608 / 6 + 8 * (32768 + 256))


def test_reference_adaptive_shape():
    assert count_dense(REFERENCE_ADAPTIVE) == 256 * 64 * 128 == 2097152
    assert count_lors(REFERENCE_ADAPTIVE) == pytest.approx(2097152 / 6 + 2 * (256 * 256 + 16 * (64 + 128)))


def test_degenerate_one_by_one():
    assert count_lors(BudgetQuery("static", d=1, h=1, r=1, K=1, N=1)) == 3.0
    assert count_dense(BudgetQuery("static", d=1, h=1, r=1, K=1, N=1)) == 1


def test_full_rank_single_layer_is_not_smaller():
    for kind, d_q in (("static", None), ("adaptive", 3)):
        q = BudgetQuery(kind, d=5, h=7, r=5, K=1, N=1, d_q=d_q)
        assert count_lors(q) >= count_dense(q)


def test_schedule_average():
    q = BudgetQuery("static", d=10, h=6, r=2, K=(1, 1, 2, 2, 3, 3), N=6)
    assert count_lors(q) == pytest.approx(60 / 6 + 2 * 32)
    assert total_lors(q) == 60 + 12 * 32
    assert q.schedule == (1, 1, 2, 2, 3, 3)


def test_schedule_allows_zero_entries():
    q = BudgetQuery("static", d=4, h=4, r=1, K=(0, 2), N=2)
    assert total_lors(q) == 16 + 2 * 8


@pytest.mark.parametrize(
    "kw",
    [
        dict(kind="mixed", d=2, h=2, r=1, K=1, N=1),
        dict(kind="static", d=0, h=2, r=1, K=1, N=1),
        dict(kind="static", d=2, h=2, r=1, K=0, N=1),
        dict(kind="static", d=2, h=2, r=1, K=(1, 1), N=3),
        dict(kind="static", d=2, h=2, r=1, K=(1, -1), N=2),
        dict(kind="adaptive", d=2, h=2, r=1, K=1, N=1),
    ],
)
def test_invalid_query(kw):
    with pytest.raises(ValueError):
        BudgetQuery(**kw)


@settings(max_examples=100, deadline=None)
@given(
    d=st.integers(1, 64),
    h=st.integers(1, 64),
    r=st.integers(1, 8),
    n=st.integers(1, 12),
    d_q=st.integers(1, 16),
    kind=st.sampled_from(["static", "adaptive"]),
    data=st.data(),
)
def test_total_is_n_times_average(d, h, r, n, d_q, kind, data):
    ks = tuple(data.draw(st.lists(st.integers(0, 4), min_size=n, max_size=n)))
    q = BudgetQuery(kind, d, h, r, ks, n, d_q)
    assert count_lors(q) * n == pytest.approx(total_lors(q), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(d=st.integers(1, 40), h=st.integers(1, 40), r=st.integers(1, 6), k=st.integers(1, 3), n=st.integers(1, 6))
def test_monotone_in_rank_and_groups(d, h, r, k, n):
    base = BudgetQuery("static", d, h, r, k, n)
    assert count_lors(base.with_rank(r + 1)) > count_lors(base)
    assert count_lors(BudgetQuery("static", d, h, r, k + 1, n)) > count_lors(base)
    more_layers = BudgetQuery("static", d, h, r, k, n + 1)
    assert total_lors(more_layers) > total_lors(base)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 12), h=st.integers(1, 12), r=st.integers(1, 4), n=st.integers(1, 4), data=st.data())
def test_closed_form_matches_enumeration(d, h, r, n, data):
    r = min(r, d, h)
    ks = data.draw(st.lists(st.integers(0, 3), min_size=n, max_size=n))
    static = StaticLorsParam(d, h, n, rank=r, groups=ks)
    assert count_model(static).weights == total_lors(BudgetQuery("static", d, h, r, tuple(ks), n))
    adaptive = AdaptiveLorsParam(3, d, h, n, rank=r, groups=ks)
    counts = count_model(adaptive)
    assert counts.weights == total_lors(BudgetQuery("adaptive", d, h, r, tuple(ks), n, 3))
    assert counts.by_role.get("bias", 0) == d * h + sum(ks) * r * r


def test_dense_enumeration():
    assert count_model(DenseStatic(5, 7, 3)).weights == 3 * count_dense(BudgetQuery("static", 5, 7, 1, 1, 1))
    dense = DenseAdaptive(4, 5, 7, 3)
    assert count_model(dense).weights == 3 * count_dense(BudgetQuery("adaptive", 5, 7, 1, 1, 1, 4))
    assert count_model(dense).by_role["bias"] == 3 * 35


def test_count_model_rejects_unknown_role():
    class Bad:
        def named_parameters(self):
            from lors.autodiff import Tensor

            yield "x/weird/W", Tensor.zeros((2,))

    with pytest.raises(ValueError):
        count_model(Bad())


def test_half_up():
    assert half_up(2.455, 2) == Decimal("2.46")
    assert half_up(0.125, 2) == Decimal("0.13")
    assert half_up(18.35, 1) == Decimal("18.4")


def test_reference_tables_layout():
    static, adaptive = reference_tables()
    assert [r.r for r in static] == list(REFERENCE_RANKS) == [r.r for r in adaptive]
    assert {r.kind for r in static} == {"static"} and {r.kind for r in adaptive} == {"adaptive"}
    text = format_text(static)
    assert "W/  LORS^T" in text and "8.39M" in text
    assert "2.10M" in format_text(adaptive)


def test_format_text_plain():
    rows = table_report([1, 2], BudgetQuery("static", 4, 4, 1, 1, 2))
    text = format_text(rows, title="tiny", mega=False)
    assert text.splitlines()[0] == "tiny"
    assert "16" in text and "24" in text


def test_csv_columns():
    rows = table_report([4, 8], REFERENCE_ADAPTIVE)
    parsed = list(csv.DictReader(io.StringIO(format_csv(rows))))
    assert tuple(parsed[0]) == CSV_COLUMNS
    assert [int(p["r"]) for p in parsed] == [4, 8]
    assert float(parsed[1]["with_lors"]) == rows[1].with_lors


def test_json_strict():
    rows = table_report([4], REFERENCE_STATIC)
    data = json.loads(format_json(rows), parse_constant=lambda c: pytest.fail(f"non-strict {c}"))
    assert set(data[0]) == set(CSV_COLUMNS)


def test_breakdown_consistent():
    r = report(REFERENCE_STATIC)
    b = r.breakdown
    assert b["shared_per_layer"] + b["private_per_layer"] == pytest.approx(r.with_lors)
    assert b["total_without_lors"] == 6 * r.without_lors


def test_table_needs_ranks():
    with pytest.raises(ValueError):
        table_report([], REFERENCE_STATIC)
