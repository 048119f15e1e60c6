import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from stedr import metrics
from stedr.errors import InvalidArgument

import oracles

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# ---------------------------------------------------------------- PEHE / eps_ATE

def test_pehe_perfect_estimate_is_zero():
    assert metrics.pehe([0.3, -1.2, 4.0], [0.3, -1.2, 4.0]) == 0.0


def test_pehe_hand_value():
    assert metrics.pehe([1, 2], [0, 1]) == 1.0


def test_eps_ate_examples():
    assert metrics.eps_ate([1.0, 3.0], [2.0, 2.0]) == 0.0
    assert metrics.eps_ate([1.0, 2.0], [0.0, 1.0]) == 1.0


def test_length_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        metrics.pehe([1, 2], [1])
    with pytest.raises(InvalidArgument):
        metrics.eps_ate([], [])


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30))
def test_pehe_and_eps_ate_match_loops(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    assert metrics.pehe(a, b) == pytest.approx(oracles.pehe(a, b), abs=1e-9)
    assert metrics.eps_ate(a, b) == pytest.approx(oracles.eps_ate(a, b), abs=1e-9)
    assert metrics.pehe(a, b) >= 0
    assert metrics.pehe(a, a) == 0.0


# ---------------------------------------------------------------- variance stats

def test_variance_single_group_has_no_spread_across():
    _, across = metrics.variance_stats([1.0, 2.0, 5.0], [1, 1, 1], 3)
    assert across == 0.0


def test_variance_hand_example():
    within, across = metrics.variance_stats([0, 0, 2, 2], [0, 0, 1, 1], 2)
    assert within == 0.0
    assert across == 1.0


def test_variance_errors():
    with pytest.raises(InvalidArgument):
        metrics.variance_stats([1.0], [3], 3)
    with pytest.raises(InvalidArgument):
        metrics.variance_stats([], [], 2)


@given(st.integers(1, 4).flatmap(
    lambda K: st.tuples(st.just(K), st.lists(st.tuples(finite, st.integers(0, K - 1)),
                                             min_size=1, max_size=25))))
def test_variance_matches_loops(case):
    K, rows = case
    tau = [r[0] for r in rows]
    lab = [r[1] for r in rows]
    w, a = metrics.variance_stats(tau, lab, K)
    ow, oa = oracles.variance_stats(tau, lab, K)
    assert w == pytest.approx(ow, abs=1e-9)
    assert a == pytest.approx(oa, abs=1e-9)
    assert w >= 0 and a >= 0


# ---------------------------------------------------------------- SMD balance

def test_smd_identical_arms_balanced():
    X = np.random.default_rng(0).normal(size=(20, 4))
    rep = metrics.smd_balance(X, X.copy())
    assert np.all(rep.smd_per_covariate == 0)
    assert rep.balanced


def test_smd_unit_shift():
    case = np.array([[0.0], [2.0]])      # mean 1, population variance 1
    control = np.array([[-1.0], [1.0]])  # mean 0, population variance 1
    assert metrics.smd(case, control)[0] == pytest.approx(1.0)


def test_unbalanced_fraction_threshold():
    rng = np.random.default_rng(1)
    control = rng.normal(size=(400, 100))
    case = control.copy()
    case[:, :3] += 1.0
    rep = metrics.smd_balance(case, control)
    assert rep.unbalanced_fraction == pytest.approx(0.03)
    assert not rep.balanced


def test_smd_zero_variance_conventions():
    same = metrics.smd([[1.0], [1.0]], [[1.0], [1.0]])
    assert same[0] == 0.0
    apart = metrics.smd([[2.0], [2.0]], [[1.0], [1.0]])
    assert apart[0] == math.inf


def test_smd_needs_two_rows():
    with pytest.raises(InvalidArgument):
        metrics.smd([[1.0]], [[1.0], [2.0]])


table = st.integers(2, 6).flatmap(lambda n: st.integers(1, 4).flatmap(
    lambda d: st.tuples(arrays(float, (n, d), elements=finite),
                        arrays(float, (n + 1, d), elements=finite),
                        arrays(float, n, elements=st.floats(0.1, 5)),
                        arrays(float, n + 1, elements=st.floats(0.1, 5)))))


@given(table)
def test_smd_matches_loops(case):
    a, b, wa, wb = case
    got = metrics.smd(a, b, wa, wb)
    want = oracles.smd(a.tolist(), b.tolist(), wa.tolist(), wb.tolist())
    for g, w in zip(got, want):
        if math.isinf(w):
            assert math.isinf(g)
        else:
            assert g == pytest.approx(w, rel=1e-7, abs=1e-9)


@given(table, st.floats(0.5, 3.0), st.floats(-5, 5))
def test_smd_antisymmetric_and_affine_invariant(case, scale, shift):
    a, b, wa, wb = case
    fwd = metrics.smd(a, b, wa, wb)
    rev = metrics.smd(b, a, wb, wa)
    ok = np.isfinite(fwd)
    np.testing.assert_allclose(fwd[ok], -rev[ok], atol=1e-9)
    moved = metrics.smd(a * scale + shift, b * scale + shift, wa, wb)
    # tiny pooled variances amplify rounding, so compare only well-conditioned columns
    pooled = np.sqrt((a.var(axis=0) + b.var(axis=0)) / 2)
    good = ok & (pooled > 1e-3)
    np.testing.assert_allclose(moved[good], fwd[good], rtol=1e-6, atol=1e-6)


# ---------------------------------------------------------------- weighted AUC

def test_auc_examples():
    assert metrics.weighted_auc([1, 0], [0.9, 0.1], [1, 1]) == 1.0
    assert metrics.weighted_auc([1, 0, 1, 0], [0.3] * 4) == 0.5
    assert metrics.weighted_auc([1, 1, 0, 0], [0.9, 0.2, 0.8, 0.1]) == 0.75


def test_auc_single_class_rejected():
    with pytest.raises(InvalidArgument):
        metrics.weighted_auc([1, 1], [0.1, 0.2])


auc_case = st.integers(2, 20).flatmap(lambda n: st.tuples(
    arrays(bool, n, elements=st.booleans()),
    arrays(float, n, elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1)),
    arrays(float, n, elements=st.floats(0.05, 4)))).filter(lambda c: 0 < c[0].sum() < len(c[0]))


@given(auc_case)
def test_auc_matches_pairwise_loop(case):
    y, s, w = case
    got = metrics.weighted_auc(y, s, w)
    assert got == pytest.approx(oracles.weighted_auc(y.tolist(), s.tolist(), w.tolist()), abs=1e-9)
    assert metrics.weighted_auc(~y, s, w) == pytest.approx(1.0 - got, abs=1e-9)
    assert metrics.weighted_auc(y, s) == pytest.approx(metrics.rank_auc(y, s), abs=1e-9)


# ---------------------------------------------------------------- BH

def test_bh_worked_example():
    np.testing.assert_array_equal(
        np.round(metrics.bh_adjust([0.01, 0.04, 0.03]), 12), [0.03, 0.04, 0.04])


def test_bh_trivial_cases():
    np.testing.assert_array_equal(metrics.bh_adjust([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])
    assert metrics.bh_adjust([0.37])[0] == 0.37


def test_bh_rejects_out_of_range():
    with pytest.raises(InvalidArgument):
        metrics.bh_adjust([0.2, 1.5])
    with pytest.raises(InvalidArgument):
        metrics.bh_adjust([-0.1])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_bh_properties_and_oracle(p):
    adj = metrics.bh_adjust(p)
    np.testing.assert_allclose(adj, oracles.bh_adjust(p), atol=1e-12)
    assert np.all(adj >= np.asarray(p) - 1e-15)
    assert np.all(adj <= 1.0)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(adj[order]) >= -1e-15)


# ---------------------------------------------------------------- trial aggregation

def test_aggregate_constant_effect():
    agg = metrics.trial_aggregate([-0.1] * 10)[0]
    assert agg.low == agg.up == pytest.approx(-0.1)
    assert agg.p_value == 0.0


def test_aggregate_symmetric_effects():
    agg = metrics.trial_aggregate([-0.2, 0.2, -0.1, 0.1])[0]
    assert agg.p_value == pytest.approx(0.5)


def test_aggregate_ci_width_from_sampling():
    ates = np.random.default_rng(3).normal(-0.1, 0.05, size=100)
    agg = metrics.trial_aggregate(ates)[0]
    assert agg.up - agg.low == pytest.approx(0.0196, rel=0.3)


def test_aggregate_needs_two_trials():
    with pytest.raises(InvalidArgument):
        metrics.trial_aggregate([0.1])


@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 4)),
              elements=st.floats(-1, 1)))
def test_aggregate_matches_loop(ates):
    for k, agg in enumerate(metrics.trial_aggregate(ates)):
        m, lo, up = oracles.trial_mean_ci(ates[:, k].tolist())
        assert (agg.mean, agg.low, agg.up) == pytest.approx((m, lo, up), abs=1e-9)
        se = (up - lo) / (2 * 1.96)
        if se > 1e-12:
            assert agg.p_value == pytest.approx(1 - oracles.normal_cdf(-m / se), abs=1e-9)
        two = metrics.trial_aggregate(ates[:, k], two_sided=True)[0]
        assert 0.0 <= two.p_value <= 1.0


def test_effect_report_keys():
    rep = metrics.effect_report(np.array([0.0, 1.0]), np.array([0.0, 0.0]), np.array([0, 1]), 2)
    assert {"pehe", "eps_ate", "v_within", "v_across"} <= set(rep)
    assert rep["pehe"] == 0.5
