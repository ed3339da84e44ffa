from __future__ import annotations

from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surroprev.datamodel import DomainError
from surroprev.inference import DailyDeltaSeries, decide, empirical_ci, sign_test


def series(deltas, **kw):
    start = date(2024, 1, 1)
    return DailyDeltaSeries(tuple(start + timedelta(days=k) for k in range(len(deltas))), deltas, **kw)


def test_all_negative_is_significant():
    st_ = sign_test(series([-0.01] * 10))
    assert (st_.n_pos, st_.n_neg) == (0, 10)
    assert st_.p_value == pytest.approx(2 * 0.5 ** 10)
    assert decide(series([-0.01] * 10)).significant


def test_balanced_is_not_significant():
    st_ = sign_test(series([0.01, -0.01] * 5))
    assert st_.p_value == 1.0
    assert not decide(series([0.01, -0.01] * 5)).significant


def test_single_day_is_not_significant():
    r = decide(series([-0.5]))
    assert r.sign.p_value == 1.0 and not r.significant
    assert r.ci_low is None


def test_zeros_are_dropped():
    st_ = sign_test(series([0.0, 0.0, -1.0, -1.0, -1.0]))
    assert st_.n_zero == 2
    assert st_.p_value == pytest.approx(0.25)
    assert sign_test(series([0.0, 0.0])).p_value == 1.0


def test_known_binomial_tail():
    # 21 days, 4 positive: 2 * P(X <= 4), X ~ Bin(21, 1/2)
    from math import comb

    tail = sum(comb(21, k) for k in range(5)) / 2 ** 21
    assert sign_test(series([1.0] * 4 + [-1.0] * 17)).p_value == pytest.approx(2 * tail)


@given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=40))
def test_p_value_symmetric_and_bounded(d):
    p = sign_test(series(d)).p_value
    assert 0.0 < p <= 1.0
    assert sign_test(series([-x for x in d])).p_value == pytest.approx(p)


def test_empirical_ci_linear_quantiles():
    d = [0.5, -0.2, 0.1, 0.3, -0.4]
    lo, hi = empirical_ci(series(d), 0.5)
    # sorted: -0.4 -0.2 0.1 0.3 0.5; 25% at position 1, 75% at position 3
    assert (lo, hi) == pytest.approx((-0.2, 0.3))
    lo, hi = empirical_ci(series(d), 0.95)
    assert lo == pytest.approx(-0.4 + 0.1 * 0.2)
    with pytest.raises(DomainError):
        empirical_ci(series([1.0]))


def test_relative_delta_uses_baseline():
    r = decide(series([-0.002, -0.001, -0.003]), baseline=0.04)
    assert r.mean_delta == pytest.approx(-0.002)
    assert r.relative_delta == pytest.approx(-0.05)


def test_series_validation_and_records():
    with pytest.raises(DomainError):
        DailyDeltaSeries((date(2024, 1, 2), date(2024, 1, 1)), [0.1, 0.2])
    with pytest.raises(DomainError):
        series([float("nan")])
    recs = [
        {"day": "2024-01-02", "delta": -0.1, "calibration_version": "v1", "control_point": 0.2},
        {"day": "2024-01-01", "delta": 0.2, "calibration_version": "v1", "control_point": 0.4},
    ]
    s = DailyDeltaSeries.from_records(recs)
    assert s.deltas.tolist() == [0.2, -0.1]
    assert s.baseline == pytest.approx(0.3)
    with pytest.raises(DomainError, match="calibration"):
        DailyDeltaSeries.from_records([recs[0], {**recs[1], "calibration_version": "v2"}])
