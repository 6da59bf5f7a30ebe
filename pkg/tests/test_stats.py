"""Paired t-test against textbook values and a numeric-integration oracle."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nunet.errors import DataError
from nunet.metrics import EvalReport, MetricRecord
from nunet.stats import (PairedSeries, betainc, build_comparison_table,
                         paired_t_test, t_cdf)

mpmath.mp.dps = 30


def t_cdf_oracle(t: float, dof: int) -> float:
    """Numeric integration of the Student t density."""
    nu = mpmath.mpf(dof)
    coef = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    density = lambda x: coef * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(mpmath.quad(density, [-mpmath.inf, mpmath.mpf(t)]))


def series(a, b, ids=None):
    ids = ids or [f"s{i}" for i in range(len(a))]
    return PairedSeries("A", "B", tuple(ids), tuple(a), tuple(b))


class TestTCdf:
    def test_matches_numeric_integration(self):
        # 20 probe points across dof and t ranges, tolerance 1e-8
        probes = [(t, dof) for dof in (1, 2, 4, 9, 30) for t in (-3.5, -1.0, 0.25, 2.449)]
        assert len(probes) == 20
        for t, dof in probes:
            assert t_cdf(t, dof) == pytest.approx(t_cdf_oracle(t, dof), abs=1e-8)

    def test_symmetry_and_median(self):
        assert t_cdf(0.0, 5) == 0.5
        assert t_cdf(1.7, 7) + t_cdf(-1.7, 7) == pytest.approx(1.0, abs=1e-14)

    def test_betainc_bounds(self):
        assert betainc(2.0, 0.5, 0.0) == 0.0
        assert betainc(2.0, 0.5, 1.0) == 1.0
        with pytest.raises(ValueError):
            betainc(2.0, 0.5, 1.5)


class TestPairedTTest:
    def test_identical_series(self):
        result = paired_t_test(series([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]))
        assert result.t == 0.0 and result.p == 1.0
        assert not result.degenerate

    def test_textbook_case(self):
        # frozen via the t formula by hand: d = [-1, 0, -1, 0, -1],
        # mean -0.6, sample sd 0.5477, t = -2.449 at dof 4
        result = paired_t_test(series([1, 2, 3, 4, 5], [2, 2, 4, 4, 6]))
        assert result.t == pytest.approx(-2.449, abs=1e-3)
        assert result.dof == 4
        assert result.p == pytest.approx(0.0705, abs=1e-3)

    def test_p_against_oracle(self):
        result = paired_t_test(series([1, 2, 3, 4, 5], [2, 2, 4, 4, 6]))
        expected = 2 * t_cdf_oracle(result.t, result.dof)
        assert result.p == pytest.approx(expected, abs=1e-10)

    def test_constant_nonzero_difference_degenerate(self):
        result = paired_t_test(series([1.0, 2.0, 3.0], [0.5, 1.5, 2.5]))
        assert result.degenerate
        assert result.p == 0.0
        assert math.isinf(result.t) and result.t > 0

    def test_too_few_pairs(self):
        with pytest.raises(DataError):
            paired_t_test(series([1.0], [2.0]))

    def test_unmatched_ids_rejected(self):
        with pytest.raises(DataError, match="unmatched"):
            PairedSeries.pair("A", {"x": 1.0, "y": 2.0}, "B", {"x": 1.0, "z": 2.0})


finite_floats = st.floats(min_value=-100, max_value=100,
                          allow_nan=False, allow_infinity=False)


@st.composite
def paired_values(draw):
    n = draw(st.integers(min_value=3, max_value=12))
    a = draw(st.lists(finite_floats, min_size=n, max_size=n))
    b = draw(st.lists(finite_floats, min_size=n, max_size=n))
    return a, b


class TestTTestProperties:
    @given(paired_values())
    @settings(max_examples=60, deadline=None)
    def test_antisymmetry(self, ab):
        a, b = ab
        fwd = paired_t_test(series(a, b))
        rev = paired_t_test(series(b, a))
        assert fwd.t == pytest.approx(-rev.t, rel=1e-9, abs=1e-12) or (
            math.isinf(fwd.t) and math.isinf(rev.t) and fwd.t == -rev.t)
        assert fwd.p == pytest.approx(rev.p, rel=1e-9, abs=1e-12)

    @given(paired_values(), st.floats(min_value=-10, max_value=10, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_location_invariance(self, ab, shift):
        a, b = ab
        base = paired_t_test(series(a, b))
        moved = paired_t_test(series([x + shift for x in a], [x + shift for x in b]))
        if base.degenerate or moved.degenerate:
            assert base.degenerate == moved.degenerate
        else:
            assert moved.t == pytest.approx(base.t, rel=1e-6, abs=1e-9)
            assert moved.p == pytest.approx(base.p, rel=1e-6, abs=1e-9)

    @given(st.floats(min_value=0.01, max_value=50), st.integers(min_value=1, max_value=60))
    @settings(max_examples=80, deadline=None)
    def test_p_in_unit_interval_and_monotone(self, t, dof):
        p1 = 2 * (1 - t_cdf(t, dof))
        p2 = 2 * (1 - t_cdf(t + 0.5, dof))
        assert 0.0 <= p2 <= p1 <= 1.0


def _report(method, dice_by_id, fold_of=None, plan="planX"):
    records = []
    for sid, value in dice_by_id.items():
        records.append(MetricRecord(
            id=sid, fold=(fold_of or {}).get(sid, 0), tp=1, fp=0, fn=0, tn=1,
            jaccard=value, precision=value, recall=value, specificity=value, dice=value))
    return EvalReport(method=method, records=records, fold_plan_fingerprint=plan)


class TestComparisonTable:
    def test_identical_reports_no_asterisk(self):
        values = {f"s{i}": 0.5 + 0.01 * i for i in range(6)}
        table = build_comparison_table([_report("a", values), _report("b", values)],
                                       reference_method="b")
        assert not any(cell.significant for row in table.cells.values()
                       for cell in row.values())

    def test_dominating_method(self):
        base = {f"s{i}": 0.5 + 0.02 * (i % 3) for i in range(8)}
        better = {k: v + 0.1 for k, v in base.items()}
        table = build_comparison_table([_report("worse", base), _report("better", better)],
                                       reference_method="better")
        for metric, cell in table.cells["worse"].items():
            assert cell.significant, metric  # constant margin, tiny variance
            assert table.cells["better"][metric].best

    def test_single_report(self):
        table = build_comparison_table([_report("solo", {"s0": 0.4, "s1": 0.6})])
        assert table.reference is None
        assert table.methods == ["solo"]
        md = table.to_markdown()
        assert "solo" in md

    def test_fold_plan_mismatch_rejected(self):
        a = _report("a", {"s0": 0.4, "s1": 0.6}, plan="p1")
        b = _report("b", {"s0": 0.4, "s1": 0.6}, plan="p2")
        with pytest.raises(DataError, match="fold plans"):
            build_comparison_table([a, b], reference_method="b")

    def test_markdown_marks_best_and_significant(self):
        base = {f"s{i}": 0.4 + 0.01 * (i % 5) for i in range(10)}
        better = {k: v + 0.2 for k, v in base.items()}
        table = build_comparison_table([_report("a", base), _report("b", better)],
                                       reference_method="b")
        md = table.to_markdown()
        assert "**" in md and " *" in md
        csv_text = table.to_csv()
        assert "jaccard_mean" in csv_text

    def test_fold_pairing_mode(self):
        fold_of = {f"s{i}": i % 4 for i in range(12)}
        base = {f"s{i}": 0.5 + 0.01 * (i % 4) for i in range(12)}
        better = {k: v + 0.05 for k, v in base.items()}
        table = build_comparison_table(
            [_report("a", base, fold_of), _report("b", better, fold_of)],
            reference_method="b", pairing="fold")
        assert table.pairing == "fold"
