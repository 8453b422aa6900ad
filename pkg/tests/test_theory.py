import numpy as np
import pytest
from hypothesis import given, strategies as st

from imurn import designs
from imurn.errors import AssumptionViolated, DegenerateEigenvalue, NonPositiveFisher, NotDiagonalDesign
from imurn.rules import ConstantImmigration, DiscreteAddingRule, LinearImmigration, SqrtImmigration
from imurn.theory import (
    INVALID,
    STANDARD,
    UNIT_ROW_SUM,
    LinearRuleSpec,
    MomentSpec,
    TheoreticalSummary,
    asymptotic_covariance,
    asymptotic_covariance_diagonal,
    eigenvector_limit,
    estimate_moments,
    jacobian_dv_dtheta,
    limit_proportions,
    lower_bound,
    mixing_matrix_A,
    regime_of,
    summarize,
    validate_assumptions,
)

prob = st.floats(0.05, 0.95)
probs2 = st.tuples(prob, prob).map(np.array)


def _moments(rule, a_fn):
    return MomentSpec.from_rule(rule, a_fn)


def _zero_rule(k=2, p=0.5):
    return DiscreteAddingRule.bernoulli([p] * k, np.zeros((k, k)), np.zeros((k, k)))


@st.composite
def valid_moment_specs(draw):
    """Random adding rules with nonnegative rows summing below one."""
    k = draw(st.integers(2, 4))
    p = np.array(draw(st.lists(prob, min_size=k, max_size=k)))
    raw_s = np.array(draw(st.lists(st.floats(0, 1), min_size=k * k, max_size=k * k))).reshape(k, k)
    raw_f = np.array(draw(st.lists(st.floats(0, 1), min_size=k * k, max_size=k * k))).reshape(k, k)
    scale = draw(st.floats(0.1, 0.9))
    tot = np.maximum(raw_s.sum(1), raw_f.sum(1))[:, None] + 1e-9
    rule = DiscreteAddingRule.bernoulli(p, raw_s / tot * scale, raw_f / tot * scale)
    kind = draw(st.sampled_from(["const", "linear", "sqrt"]))
    if kind == "const":
        a_fn = ConstantImmigration(tuple(draw(st.lists(st.floats(0.2, 3), min_size=k, max_size=k))))
    elif kind == "linear":
        a_fn = LinearImmigration(draw(st.floats(0.2, 3)))
    else:
        a_fn = SqrtImmigration(draw(st.floats(0.2, 3)))
    return _moments(rule, a_fn)


@st.composite
def diagonal_moment_specs(draw):
    k = draw(st.integers(2, 4))
    p = np.array(draw(st.lists(prob, min_size=k, max_size=k)))
    succ = np.array(draw(st.lists(st.floats(0, 1.5), min_size=k, max_size=k)))
    fail = np.array(draw(st.lists(st.floats(0, 1.5), min_size=k, max_size=k)))
    mean = p * succ + (1 - p) * fail
    shrink = np.where(mean > 0.9, 0.9 / np.maximum(mean, 1e-12), 1.0)
    rule = DiscreteAddingRule.bernoulli(p, np.diag(succ * shrink), np.diag(fail * shrink))
    a_fn = draw(st.sampled_from([LinearImmigration(1.3), SqrtImmigration(0.7), ConstantImmigration(tuple(range(1, k + 1)))]))
    return _moments(rule, a_fn)


# -- examples ---------------------------------------------------------------


def test_zero_adding_matrix_symmetric():
    m = _moments(_zero_rule(), ConstantImmigration((1.0, 1.0)))
    np.testing.assert_allclose(limit_proportions(m), [0.5, 0.5])
    np.testing.assert_allclose(mixing_matrix_A(m), [[0.5, -0.5], [-0.5, 0.5]])
    assert np.all(jacobian_dv_dtheta(m) == 0)


def test_bdu_limit_and_mixing():
    d = designs.build_bdu([0.3, 0.4])
    np.testing.assert_allclose(limit_proportions(d.moments), [1 / 3, 2 / 3], atol=1e-14)
    v = np.array([1 / 3, 2 / 3])
    expected = np.diag([2.5, 5.0]) @ (np.eye(2) - np.outer(np.ones(2), v))
    np.testing.assert_allclose(mixing_matrix_A(d.moments), expected, atol=1e-13)


def test_bdu_covariance_value():
    # hand-derived: 23/9 [[1,-1],[-1,1]]
    s = designs.build_bdu([0.3, 0.4]).summary()
    np.testing.assert_allclose(s.sigma_total, 23 / 9 * np.array([[1, -1], [-1, 1]]), atol=1e-12)


def test_constant_adding_rows_give_twice_sigma_xi():
    d = np.array([[0.2, 0.1], [0.3, 0.4]])
    m = _moments(DiscreteAddingRule.bernoulli([0.6, 0.3], d, d), LinearImmigration(1.0))
    s = asymptotic_covariance(m)
    np.testing.assert_allclose(s.sigma_total, 2 * s.sigma_xi, atol=1e-14)


def test_constant_rates_give_sigma_d():
    m = designs.build_dl([0.7, 0.4]).moments
    s = asymptotic_covariance(m)
    np.testing.assert_allclose(s.sigma_total, s.sigma_D, atol=1e-14)


def test_mdl_symmetric_variance():
    s = designs.build_mdl([0.5, 0.5]).summary()
    assert s.sigma_total[0, 0] == pytest.approx(1.25, abs=1e-10)
    assert s.lower_bound[0, 0] == pytest.approx(1.0, abs=1e-10)


def test_mdl_asymmetric_values():
    # exact rationals: 531/500 and 111/125
    s = designs.build_mdl([0.7, 0.5]).summary()
    assert s.sigma_total[0, 0] == pytest.approx(531 / 500, abs=1e-12)
    assert s.lower_bound[0, 0] == pytest.approx(111 / 125, abs=1e-12)


def test_gdl_diagonal_route():
    for p, target in (([0.81, 0.36], 94 / 675), ([0.7, 0.5], 0.09163295332621284), ([0.5, 0.5], 0.125)):
        s = asymptotic_covariance_diagonal(designs.build_gdl(p).moments)
        assert s.sigma_total[0, 0] == pytest.approx(target, abs=1e-12)
    s = asymptotic_covariance_diagonal(designs.build_gdl([0.25, 0.25]).moments)
    np.testing.assert_allclose(s.v, [0.5, 0.5])
    assert s.sigma_total[0, 0] == pytest.approx(s.sigma_total[1, 1])


def test_mdl_diagonal_matches_general():
    m = designs.build_mdl([0.7, 0.5]).moments
    np.testing.assert_allclose(asymptotic_covariance_diagonal(m).sigma_total, asymptotic_covariance(m).sigma_total, atol=1e-9)


def test_diagonal_route_rejects_offdiagonal():
    d = np.array([[0.2, 0.1], [0.0, 0.3]])
    with pytest.raises(NotDiagonalDesign):
        asymptotic_covariance_diagonal(_moments(DiscreteAddingRule.bernoulli([0.5, 0.5], d, d), ConstantImmigration((1.0, 1.0))))


def test_eigenvector_limits():
    np.testing.assert_allclose(eigenvector_limit([[0.5, 0.5], [0.5, 0.5]]), [0.5, 0.5], atol=1e-14)
    np.testing.assert_allclose(eigenvector_limit([[0.2, 0.8], [0.6, 0.4]]), [3 / 7, 4 / 7], atol=1e-14)
    with pytest.raises(DegenerateEigenvalue):
        eigenvector_limit(np.eye(2))
    with pytest.raises(AssumptionViolated):
        eigenvector_limit([[0.5, 0.4], [0.5, 0.5]])


def test_validation_reports():
    bad = validate_assumptions(designs.build_bdu([0.6, 0.4]).moments)
    assert not bad.ok and bad.regime == INVALID
    assert "1.2" in bad.violations[0]
    with pytest.raises(AssumptionViolated):
        bad.raise_if_failed()
    for p in ([0.1, 0.9], [0.5, 0.5, 0.99]):
        d = designs.build_dl(p)
        rep = d.validate()
        assert rep.ok and rep.regime == STANDARD
    h = np.array([[0.2, 0.8], [0.6, 0.4]])
    m = _moments(DiscreteAddingRule.deterministic(h), ConstantImmigration((1.0, 1.0)))
    rep = validate_assumptions(m)
    assert rep.ok and rep.regime == UNIT_ROW_SUM
    assert regime_of(h) == UNIT_ROW_SUM


def test_validation_flags_negative_offdiagonal():
    s = np.array([[0.2, 0.3], [0.0, 0.3]])
    f = np.array([[0.2, -0.3], [0.0, 0.3]])
    m = _moments(DiscreteAddingRule.bernoulli([0.5, 0.5], s, f), ConstantImmigration((1.0, 1.0)))
    rep = validate_assumptions(m, DiscreteAddingRule.bernoulli([0.5, 0.5], s, f))
    assert not rep.ok


def test_nonpositive_rates_rejected():
    m = _moments(_zero_rule(), ConstantImmigration((1.0, 0.0)))
    assert not validate_assumptions(m).ok
    with pytest.raises(AssumptionViolated):
        limit_proportions(m)


def test_summary_by_regime():
    h = np.array([[0.2, 0.8], [0.6, 0.4]])
    s = summarize(_moments(DiscreteAddingRule.deterministic(h), ConstantImmigration((1.0, 1.0))))
    assert s.regime == UNIT_ROW_SUM and s.sigma_total is None
    with pytest.raises(AssumptionViolated):
        summarize(designs.build_bdu([0.6, 0.4]).moments)


def test_summary_json_round_trip():
    s = designs.build_mdl([0.7, 0.5]).summary()
    d = s.to_dict()
    assert list(d) == list(TheoreticalSummary.JSON_KEYS)
    back = TheoreticalSummary.from_dict(d)
    np.testing.assert_array_equal(back.sigma_total, s.sigma_total)
    assert back.s == s.s


def test_lower_bound_errors():
    d = designs.build_dl([0.6, 0.3])
    bad = LinearRuleSpec(d.linear.alpha, d.linear.beta, d.linear.d, d.linear.var_eta, d.linear.cov_eta_xi, np.array([1.0, 0.0]))
    with pytest.raises(NonPositiveFisher):
        lower_bound(bad, d.moments)


def test_sampled_moments_close_to_exact():
    rule = DiscreteAddingRule.bernoulli([0.7, 0.4], np.eye(2), np.zeros((2, 2)))
    m = estimate_moments(rule, ConstantImmigration((1.0, 1.0)), n_samples=200_000, seed=3)
    exact = MomentSpec.from_rule(rule, ConstantImmigration((1.0, 1.0)))
    assert m.approximate
    assert np.all(np.abs(m.h - exact.h) <= 4 * m.standard_errors["h"] + 1e-12)
    s = summarize(m)
    assert s.approximate
    np.testing.assert_allclose(s.sigma_total, summarize(exact).sigma_total, rtol=0.05)


# -- properties ---------------------------------------------------------------


@given(valid_moment_specs())
def test_limit_identities(m):
    s = asymptotic_covariance(m)
    assert abs(s.v.sum() - 1) <= 1e-12 and np.all(s.v > 0)
    np.testing.assert_allclose(s.v @ (np.eye(m.k) - m.h), s.a / s.s, atol=1e-10)
    np.testing.assert_allclose(s.A @ np.ones(m.k), 0, atol=1e-12)
    np.testing.assert_allclose(s.sigma_total, s.sigma_total.T, atol=1e-12)
    np.testing.assert_allclose(s.sigma_total @ np.ones(m.k), 0, atol=1e-10)
    assert np.linalg.eigvalsh(s.sigma_total).min() > -1e-10


@given(valid_moment_specs())
def test_numeric_and_analytic_jacobians_agree(m):
    np.testing.assert_allclose(jacobian_dv_dtheta(m, "numeric"), jacobian_dv_dtheta(m, "analytic"), atol=1e-7)


def test_numeric_jacobian_tolerates_subnormal_entries():
    h = np.array([[0.0, 3 * np.nextafter(0.0, 1.0)], [0.0, 0.0]])
    m = MomentSpec(h, np.zeros((2, 2, 2)), np.zeros((2, 2)), np.full(2, 0.25), np.full(2, 0.5), ConstantImmigration((0.5, 1.0)))
    np.testing.assert_allclose(jacobian_dv_dtheta(m, "numeric"), jacobian_dv_dtheta(m, "analytic"), atol=1e-7)

@given(diagonal_moment_specs())
def test_diagonal_route_matches_general(m):
    a = asymptotic_covariance(m)
    b = asymptotic_covariance_diagonal(m)
    np.testing.assert_allclose(b.v, a.v, atol=1e-12)
    np.testing.assert_allclose(b.sigma_total, a.sigma_total, atol=1e-9)
    np.testing.assert_allclose(b.A, a.A, atol=1e-10)


@given(
    k=st.integers(2, 4),
    data=st.data(),
)
def test_dv_dd_product_identity(k, data):
    alpha = np.array(data.draw(st.lists(st.floats(0, 0.1), min_size=k * k, max_size=k * k))).reshape(k, k)
    beta = np.array(data.draw(st.lists(st.floats(0, 0.3), min_size=k * k, max_size=k * k))).reshape(k, k)
    dvec = np.array(data.draw(st.lists(st.floats(0.1, 1.0), min_size=k, max_size=k)))
    rates = tuple(data.draw(st.lists(st.floats(0.3, 2), min_size=k, max_size=k)))
    lin = LinearRuleSpec(alpha, beta, dvec, np.full(k, 0.1), np.zeros(k), np.full(k, 10.0))
    h = lin.h_of_d()
    m = MomentSpec(h, np.zeros((k, k, k)), np.zeros((k, k)), np.full(k, 0.1), np.full(k, 0.5), ConstantImmigration(rates))
    from imurn.theory import linear_rule_jacobian

    analytic = linear_rule_jacobian(lin, m)
    a = np.asarray(rates)
    numeric = np.empty((k, k))
    for j in range(k):
        e = np.zeros(k)
        e[j] = 1e-6
        vs = []
        for sgn in (1, -1):
            u = a @ np.linalg.inv(np.eye(k) - lin.h_of_d(dvec + sgn * e))
            vs.append(u / u.sum())
        numeric[j] = (vs[0] - vs[1]) / 2e-6
    np.testing.assert_allclose(numeric, analytic, atol=1e-6)


@given(st.lists(st.floats(0.02, 0.48), min_size=2, max_size=5))
def test_bdu_attains_bound(p):
    d = designs.build_bdu(p)
    s = d.summary()
    assert np.linalg.norm(s.sigma_D - s.lower_bound, 2) <= 1e-10


@given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=2))
def test_eigenvector_residual(row_firsts):
    h = np.array([[row_firsts[0], 1 - row_firsts[0]], [row_firsts[1], 1 - row_firsts[1]]])
    v = eigenvector_limit(h)
    assert np.max(np.abs(v @ h - v)) <= 1e-12
