import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad
from scipy.special import gammaln

from oracles import b_kl, beta_k1_tail, i0_scan, log_family_phi
from vortexlab.hierarchy import (DepthLimitExceeded, GrowthFunction, HierarchyInstability, HierarchyProblem,
                                 IteratedIntegralQuery, a_closed, b_closed, beta_tail_bound, certify_envelope,
                                 envelope_ratio, i0_index, iterated_quadrature, lattice_csv, phi,
                                 recurrence_check, solve_hierarchy, transform_zw)
from vortexlab.kernel import InvalidParameter

LOG = GrowthFunction("log", 1.0)


def const_growth(target_phi, t=1.0):
    """Constant family whose phi equals ``target_phi`` at ``t``."""
    return GrowthFunction("constant", gamma=target_phi / t)


def q(k, l, t, g=LOG):
    return IteratedIntegralQuery(k, l, t, g)


def test_phi_values():
    assert phi(LOG, 0.0) == 0.0
    assert phi(LOG, math.e - 1) == pytest.approx(1.5, abs=1e-14)
    assert phi(GrowthFunction("constant", gamma=0.7), 3.0) == pytest.approx(2.1)
    with pytest.raises(InvalidParameter):
        phi(LOG, -1.0)


@given(st.floats(0.0, 50.0), st.floats(0.1, 3.0))
def test_phi_is_antiderivative(t, C):
    g = GrowthFunction("log", C)
    assert g.phi(t) == pytest.approx(quad(g.h, 0, t, epsabs=1e-12, epsrel=1e-12)[0], rel=1e-9, abs=1e-12)
    assert g.phi(t) == pytest.approx(log_family_phi(C, t), rel=1e-14)
    assert g.h(t) >= 0


def test_growth_validation():
    with pytest.raises(InvalidParameter):
        GrowthFunction("cubic")
    with pytest.raises(InvalidParameter):
        GrowthFunction("log", 0.0)
    with pytest.raises(InvalidParameter):
        IteratedIntegralQuery(3, 2, 1.0)


def test_closed_form_examples():
    g = const_growth(1.0)
    assert b_closed(q(1, 3, 1.0, g)) == pytest.approx(0.14699, abs=1e-5)
    assert b_closed(q(1, 3, 1.0, g)) == pytest.approx(b_kl(1, 3, 1.0), rel=1e-14)
    for k in (1, 3, 6):
        p = float(LOG.phi(2.0))
        assert b_closed(q(k, k, 2.0)) == pytest.approx(math.exp(-k * p), rel=1e-15)
        assert a_closed(q(k, k, 2.0)) == pytest.approx(1 - math.exp(-k * p), rel=1e-13)
        assert b_closed(q(k, k + 2, 0.0)) == 0.0
        assert a_closed(q(k, k + 2, 0.0)) == 0.0
    g = const_growth(0.7)
    assert a_closed(q(2, 4, 1.0, g)) == pytest.approx(iterated_quadrature(q(2, 4, 1.0, g), "A"), rel=1e-7)


def test_closed_forms_against_quadrature_lattice():
    worst = 0.0
    for k in range(1, 5):
        for l in range(k, k + 4):
            for t in (0.1, 1.0, 5.0):
                for kind, closed in (("A", a_closed), ("B", b_closed)):
                    ref = iterated_quadrature(q(k, l, t), kind)
                    worst = max(worst, abs(closed(q(k, l, t)) - ref) / abs(ref))
    assert worst <= 1e-7


def test_quadrature_depth_limit():
    with pytest.raises(DepthLimitExceeded):
        iterated_quadrature(q(1, 7, 1.0), "A")
    with pytest.raises(InvalidParameter):
        iterated_quadrature(q(1, 2, 1.0), "C")
    assert iterated_quadrature(q(3, 3, 1.0), "B") == math.exp(-3 * float(LOG.phi(1.0)))


def test_large_binomial_is_finite():
    v = b_closed(q(200, 700, 3.0))
    assert math.isfinite(v) and v >= 0
    assert v == pytest.approx(math.exp(gammaln(700) - gammaln(200) - gammaln(501)
                                       + 500 * math.log(1 - math.exp(-float(LOG.phi(3.0))))
                                       - 200 * float(LOG.phi(3.0))), rel=1e-10)


def test_recurrences():
    for k in range(1, 10):
        for l in range(k + 1, 11):
            for t in (0.5, 2.0):
                r = recurrence_check(k, l, t, LOG)
                assert abs(r["ab_identity"]) <= 1e-12
                assert abs(r["telescoping"]) <= 1e-12
                assert abs(r["b_ode"]) <= 1e-6
    with pytest.raises(InvalidParameter):
        recurrence_check(2, 2, 1.0, LOG)


def test_telescoping_up_to_twenty():
    for k in range(1, 21):
        for l in range(k + 1, 21):
            for t in (0.1, 1.0, 5.0):
                assert abs(recurrence_check(k, l, t, LOG)["telescoping"]) <= 1e-12


def test_a_monotone_in_t_and_l():
    # A_k^l = A_k^{l-1} - B_k^l, so A rises in t and falls in l
    ts = np.linspace(0, 6, 13)
    for k in range(1, 6):
        for l in range(k, k + 6):
            a = [a_closed(q(k, l, t)) for t in ts]
            assert np.all(np.diff(a) >= -1e-15)
            for t in ts:
                assert a_closed(q(k, l + 1, t)) <= a_closed(q(k, l, t)) + 1e-15


def test_negative_binomial_normalization():
    for k in (1, 2, 3, 5):
        for p in (0.2, 1.0, 2.5, 5.0 / k):
            g = const_growth(p)
            terms, l = [], k
            while True:
                terms.append(b_closed(q(k, l, 1.0, g)))
                if l >= k + 200 and terms[-1] < 1e-18:
                    break
                l += 1
            partial = np.cumsum(terms)
            assert np.all(np.diff(partial) >= 0)
            assert abs(math.fsum(terms) - 1) <= 1e-6
            # the deficit after L terms is exactly A_k^L
            L = k + 200
            assert 1 - partial[200] == pytest.approx(a_closed(q(k, L, 1.0, g)), abs=1e-12)


def test_fixed_window_normalization():
    # a fixed window of 201 terms suffices only while the tail A_k^{k+200} is small
    for k, p in ((1, 1.0), (1, 2.5), (2, 2.5), (5, 1.0)):
        terms = [b_closed(q(k, l, 1.0, const_growth(p))) for l in range(k, k + 201)]
        assert abs(math.fsum(terms) - 1) <= 1e-6
    terms = [b_closed(q(1, l, 1.0, const_growth(5.0))) for l in range(1, 202)]
    assert 1 - math.fsum(terms) == pytest.approx((1 - math.exp(-5.0)) ** 201, rel=1e-9)


def test_combinatorial_identity():
    for x in np.arange(1, 10) / 10:
        for k in range(1, 11):
            total, j = 0.0, 0
            while True:
                term = math.exp(log_comb(j + k - 1, k - 1) + j * math.log(x))
                total += term
                j += 1
                if term < 1e-18 * total and j > k:
                    break
            assert total == pytest.approx((1 - x) ** -k, rel=1e-10)


def log_comb(n, r):
    return gammaln(n + 1) - gammaln(r + 1) - gammaln(n - r + 1)


def test_weighted_sum_bound():
    for k in range(1, 6):
        for t in (0.1, 1.0, 5.0):
            p = float(LOG.phi(t))
            l = k
            s = 0.0
            while True:
                term = l * l * b_closed(q(k, l, t))
                s += term
                if l > k + 10 and term < 1e-16 * s:
                    break
                l += 1
            assert s <= k * (k + 1) * math.exp(2 * p) * (1 + 1e-12)


def test_beta_tail_bound():
    assert beta_tail_bound(3, 10, 0.2)[0] == 1.0
    for k in range(1, 9):
        for thr in np.arange(1, 10) / 10:
            bound, exact = beta_tail_bound(k, k, thr)
            assert exact == pytest.approx(beta_k1_tail(k, thr), abs=1e-14)
            assert bound >= exact
    bound, exact = beta_tail_bound(3, 10, 0.6)
    assert bound >= exact
    with pytest.raises(InvalidParameter):
        beta_tail_bound(1, 2, 1.5)


@given(st.integers(1, 30), st.integers(0, 60), st.floats(0.0, 1.0))
def test_beta_tail_bound_dominates(k, extra, thr):
    bound, exact = beta_tail_bound(k, k + extra, thr)
    assert bound >= exact - 1e-15


def test_i0_index():
    assert i0_index(1.0, 0.0) == 1
    assert i0_index(1.0, 0.5) == 7
    assert i0_index(1.0, 0.99) >= 100
    assert i0_index(1.0, 0.3) == i0_scan(1.0, 0.3)
    with pytest.raises(InvalidParameter):
        i0_index(1.0, 1.0)


@given(st.floats(0.0, 0.999))
def test_i0_matches_scan(r):
    assert i0_index(1.0, r) == i0_scan(1.0, r)


def test_transform_zw():
    z, w = transform_zw(np.zeros(6), 3, 0.5)
    assert np.all(z == 0) and np.all(w == 0)
    x = np.zeros(6)
    x[2] = 1.0
    z, _ = transform_zw(x, 3, 0.0)
    assert z[2] == pytest.approx(1 / 3**5)


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=20), st.integers(1, 9), st.floats(0, 3))
def test_recovery_bound(x, i0, p):
    x = np.array(x)
    z, w = transform_zw(x, i0, p)
    assert np.all(x <= i0**5 * z * (1 + 1e-12) + 1e-300)
    np.testing.assert_allclose(w, math.exp(-p) * z)


def test_frozen_system():
    prob = HierarchyProblem(8, 1.0, 0.3, GrowthFunction("constant", gamma=0.0), np.linspace(0, 1, 8))
    sol = solve_hierarchy(prob, 2.0)
    assert np.all(sol.x == prob.x0)


def test_problem_validation():
    with pytest.raises(InvalidParameter):
        HierarchyProblem(4, 0.3, 0.3, LOG, np.zeros(4))
    with pytest.raises(InvalidParameter):
        HierarchyProblem(4, 1.0, 0.3, LOG, np.zeros(3))
    with pytest.raises(InvalidParameter):
        HierarchyProblem(4, 1.0, 0.3, LOG, -np.ones(4))


def test_single_mode_exact():
    # N = 1: x' = h x + h, so x = (x0 + 1) e^{phi} - 1
    prob = HierarchyProblem(1, 1.0, 0.0, LOG, np.array([0.5]))
    sol = solve_hierarchy(prob, 3.0, tol=1e-9)
    exact = 1.5 * np.exp(LOG.phi(sol.times)) - 1
    np.testing.assert_allclose(sol.x[:, 0], exact, rtol=1e-8)


def test_kamke_monotone_coupling():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(0, 1, 16)
    bumped = x0.copy()
    bumped[5:] += rng.uniform(0, 1, 11)
    a = solve_hierarchy(HierarchyProblem(16, 1.0, 0.3, LOG, x0), 2.0)
    b = solve_hierarchy(HierarchyProblem(16, 1.0, 0.3, LOG, bumped), 2.0)
    assert np.all(b.x >= a.x - 1e-12)


def test_y_hook_lowers_trajectory():
    y = lambda t: np.full(9, 0.5)  # noqa: E731
    base = HierarchyProblem.standard(8)
    with_y = HierarchyProblem(8, 1.0, 0.3, base.growth, base.x0, y)
    a = solve_hierarchy(base, 1.0)
    b = solve_hierarchy(with_y, 1.0)
    assert np.all(b.x[-1] < a.x[-1])


def test_envelope_certificate():
    prob = HierarchyProblem.standard(64)
    cert = certify_envelope(prob, 5.0)
    assert math.isfinite(cert.M) and cert.stable
    sol = solve_hierarchy(prob, 5.0)
    assert np.max(envelope_ratio(sol, prob.growth)) <= cert.M * 1.1


def test_refinement_refusal():
    with pytest.raises(HierarchyInstability):
        solve_hierarchy(HierarchyProblem.standard(8), 1.0, tol=1e-30, max_halvings=2)


def test_csv_outputs():
    text = lattice_csv([1, 2], [1, 2, 3], [0.5], LOG)
    rows = text.splitlines()
    assert rows[0] == "k,l,t,A,B,bound,exact"
    assert len(rows) == 1 + 3 + 2
    sol = solve_hierarchy(HierarchyProblem.standard(4), 1.0)
    assert sol.to_csv().splitlines()[0] == "t,k,x_k"
