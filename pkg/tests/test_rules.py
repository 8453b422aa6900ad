import numpy as np
import pytest

from imurn.rules import (
    ConstantImmigration,
    DelayModel,
    DiscreteAddingRule,
    LinearImmigration,
    SqrtImmigration,
)


def test_bernoulli_moments():
    rule = DiscreteAddingRule.bernoulli([0.3, 0.6], 2 * np.eye(2), np.zeros((2, 2)))
    np.testing.assert_allclose(rule.mean_matrix(), np.diag([0.6, 1.2]))
    np.testing.assert_allclose(rule.theta(), [0.3, 0.6])
    np.testing.assert_allclose(rule.var_xi(), [0.21, 0.24])
    # Var(2 xi) and Cov(2 xi, xi)
    assert rule.row_covariances()[0, 0, 0] == pytest.approx(4 * 0.21)
    np.testing.assert_allclose(rule.row_outcome_covariance(), np.diag([0.42, 0.48]))


def test_sampling_paths_agree():
    rule = DiscreteAddingRule.bernoulli([0.3, 0.6], np.eye(2), np.zeros((2, 2)))
    u = np.linspace(0, 0.999, 37)
    for k in range(2):
        xi, rows = rule.sample(k, u[:, None])
        for i, ui in enumerate(u):
            x1, r1 = rule.sample_one(k, (ui,))
            assert x1 == xi[i] and r1 == tuple(rows[i])
    # success comes first: u < p means xi = 1
    assert rule.sample_one(0, (0.2999,))[0] == 1.0
    assert rule.sample_one(0, (0.3,))[0] == 0.0


def test_probabilities_must_sum_to_one():
    from imurn.rules import Outcome
    with pytest.raises(ValueError):
        DiscreteAddingRule(((Outcome(0.5, 1.0, (1.0,)),),))


def test_immigration_jacobians():
    th = np.array([0.3, 0.8])
    assert np.all(ConstantImmigration((1.0, 2.0)).jacobian(th) == 0)
    np.testing.assert_allclose(LinearImmigration(2.0).jacobian(th), 2 * np.eye(2))
    np.testing.assert_allclose(SqrtImmigration(1.0).jacobian(th), np.diag(0.5 / np.sqrt(th)))
    np.testing.assert_allclose(SqrtImmigration(3.0)(th), 3 * np.sqrt(th))


def test_delay_laws():
    fixed = DelayModel.fixed(2, 2)
    assert fixed.max_delay == 2 and not fixed.is_zero()
    assert fixed.sample_one(0, 0.7) == 2
    assert DelayModel.fixed(0, 3).is_zero()
    geo = DelayModel.geometric(0.5, 1)
    u = (np.arange(100_000) + 0.5) / 100_000
    lags = geo.sample(0, u)
    # P(L = l) = q (1 - q)^l has mean (1 - q) / q
    assert lags.mean() == pytest.approx(1.0, abs=1e-3)
    assert all(geo.sample_one(0, x) == y for x, y in zip(u[::997], lags[::997]))
