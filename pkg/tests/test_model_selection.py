import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermocal.errors import ConfigError, NumericalError
from thermocal.mcmc import PosteriorChain
from thermocal.model_selection import SelectionRecord, bic, complexity_justified, dic


def record(n_s, bic_value, dic_value=None):
    return SelectionRecord(n_s, n_s + 1, 8640, 0.0, 0.0, bic_value, bic_value, dic_value,
                           None if dic_value is None else 1.0)


def test_bic_formula():
    assert bic(0.0, 3, 8640) == pytest.approx(3 * math.log(8640), rel=1e-12)
    assert bic(0.0, 3, 8640) == pytest.approx(27.18, abs=0.02)
    assert bic(-10.0, 2, 100) == pytest.approx(20.0 + 2 * math.log(100))
    with pytest.raises(ConfigError):
        bic(0.0, 0, 10)


@given(st.floats(-1e5, 1e5), st.integers(1, 40), st.integers(1, 10 ** 6))
def test_bic_additive_and_monotone_in_n_p(ll, n_p, n_d):
    assert bic(ll, 2 * n_p, n_d) - bic(ll, n_p, n_d) == pytest.approx(n_p * math.log(n_d), abs=1e-6)
    assert bic(ll, n_p + 1, n_d) >= bic(ll, n_p, n_d)


def test_dic_degenerate_chain():
    p = np.array([0.31, 0.29])
    chain = PosteriorChain(np.tile(p, (20, 1)), 0, 0.0, np.zeros(20))
    ll_fn = lambda q: -3.5 * float(np.sum(q))
    value, p_d = dic(chain, ll_fn)
    assert p_d == 0.0
    assert value == pytest.approx(-2.0 * ll_fn(p), rel=1e-12)


def test_dic_two_point_variance():
    chain = PosteriorChain(np.array([[1.0], [2.0]]), 0, 0.5, np.zeros(2), np.array([0.0, 2.0]))
    value, p_d = dic(chain, lambda q: 0.0)
    assert p_d == pytest.approx(4.0, rel=1e-12)
    assert value == pytest.approx(8.0, rel=1e-12)


def test_dic_without_stored_values_evaluates_unique_rows():
    calls = []

    def ll(q):
        calls.append(tuple(q))
        return -float(q[0])

    samples = np.array([[1.0], [1.0], [3.0], [3.0]])
    value, p_d = dic(samples, ll)
    assert p_d == pytest.approx(2 * np.var([-1, -1, -3, -3], ddof=1))
    assert value == pytest.approx(2.0 * 2.0 + 2 * p_d)
    assert len(calls) == 3  # two distinct rows plus the mean
    with pytest.raises(ConfigError):
        dic(samples)


def test_reported_synthetic_comparison_not_justified():
    # BIC -1.818e4 -> -1.812e4 and DIC -1.825e4 -> -1.826e4 from n_s = 8 to 16
    prev, curr = record(8, -1.818e4, -1.825e4), record(16, -1.812e4, -1.826e4)
    assert not complexity_justified(prev, curr)
    assert (prev.dic - curr.dic) / abs(prev.dic) == pytest.approx(5.5e-4, rel=0.01)
    assert not complexity_justified(prev, curr, criterion="bic")


def test_doubling_magnitude_justified_and_equal_not():
    assert complexity_justified(record(1, -100.0), record(2, -200.0))
    assert not complexity_justified(record(1, -100.0), record(2, -100.0))
    assert complexity_justified(record(1, 100.0), record(2, 90.0))
    assert not complexity_justified(record(1, 100.0), record(2, 96.0))


def test_dic_preferred_when_both_have_it():
    prev, curr = record(1, -100.0, -1000.0), record(2, -200.0, -1001.0)
    assert not complexity_justified(prev, curr)
    assert complexity_justified(prev, curr, criterion="bic")
    assert complexity_justified(record(1, -100.0, -1000.0), record(2, -200.0))  # falls back to BIC


@given(st.floats(-1e6, 1e6).filter(lambda v: abs(v) > 1e-6), st.floats(-1e6, 1e6),
       st.floats(0.0, 1.0))
def test_decision_depends_only_on_inputs(prev, curr, tol):
    a = complexity_justified(record(2, prev), record(4, curr), tol)
    b = complexity_justified(record(2, prev), record(4, curr), tol)
    assert a == b
    assert a == ((prev - curr) / abs(prev) > tol)


def test_argument_errors():
    with pytest.raises(ConfigError):
        complexity_justified(record(4, -1.0), record(2, -2.0))
    with pytest.raises(NumericalError):
        complexity_justified(record(1, 0.0), record(2, -2.0))
    with pytest.raises(ConfigError):
        complexity_justified(record(1, -1.0), record(2, -2.0), criterion="waic")
    with pytest.raises(ConfigError):
        complexity_justified(record(1, -1.0), record(2, -2.0), criterion="dic")


def test_record_dict():
    d = record(4, -10.0, -12.0).to_dict()
    assert d["criterion"] == "dic"
    assert d["bic"] == -10.0
