"""Built-in urn designs for binary outcomes.

Each builder returns a :class:`NamedDesign` bundling the engine spec, the
exact moments, the linear-rule description used by the lower bound, and the
closed-form limit (and covariance, where one is known) for cross-checking
the generic theory routines.

======  ===========================  ===============================
name    immigration rate ``a_k``     adding row after type ``k``
======  ===========================  ===============================
bdu     1                            ``2 e_k`` on success, else 0
dl      1                            ``e_k`` on success, else 0
mdl     ``c * p_hat_k``              ``e_k`` on success, else 0
gdl     ``c * sqrt(p_hat_k)``        0
const   fixed vector                 any declared rule
======  ===========================  ===============================
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import AssumptionViolated
from .rules import ConstantImmigration, DiscreteAddingRule, LinearImmigration, SqrtImmigration
from .theory import (
    INVALID,
    UNIT_ROW_SUM,
    LinearRuleSpec,
    MomentSpec,
    TheoreticalSummary,
    eigenvector_limit,
    regime_of,
    summarize,
    validate_assumptions,
)
from .urn import DesignSpec

NAMES = ("bdu", "dl", "mdl", "gdl", "const")


@dataclass(frozen=True)
class NamedDesign:
    name: str
    p: np.ndarray
    c: float
    spec: DesignSpec
    moments: MomentSpec
    linear: LinearRuleSpec | None
    closed_form_v: np.ndarray | None
    closed_form_sigma: np.ndarray | None
    theory_available: bool = True
    notes: tuple[str, ...] = field(default=())

    @property
    def k(self) -> int:
        return self.spec.k_treatments

    @property
    def regime(self) -> str:
        return regime_of(self.moments.h)

    def summary(self, mode: str = "auto") -> TheoreticalSummary:
        return summarize(self.moments, self.linear, mode)

    def validate(self):
        return validate_assumptions(self.moments, self.spec.adding_rule)

    def with_engine(self, **changes) -> "NamedDesign":
        """Copy with engine options changed (delay, estimator constants, ...)."""
        return replace(self, spec=replace(self.spec, **changes))


def _probabilities(p) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.ndim != 1 or p.size < 1:
        raise ValueError("p must be a non-empty vector")
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"success probabilities must lie in (0, 1), got {p.tolist()}")
    return p


def _masses(z0_masses, k: int) -> tuple[float, ...]:
    if z0_masses is None:
        return (1.0,) * (k + 1)
    return tuple(float(x) for x in z0_masses)


def _two_treatment_matrix(sigma2: float) -> np.ndarray:
    return sigma2 * np.array([[1.0, -1.0], [-1.0, 1.0]])


def _sandwich(dv_dp: np.ndarray, p: np.ndarray, v: np.ndarray) -> np.ndarray:
    return dv_dp.T @ np.diag(p * (1 - p) / v) @ dv_dp


def _bernoulli_linear(p: np.ndarray, beta: np.ndarray, linked: bool) -> LinearRuleSpec:
    k = p.size
    pq = p * (1 - p)
    return LinearRuleSpec(
        alpha=np.zeros((k, k)), beta=beta, d=p, var_eta=pq, cov_eta_xi=pq, fisher=1.0 / pq,
        dtheta_dd=np.ones(k) if linked else None,
    )


def _build(name, p, c, rule, a_fn, z0_masses, linear, cf_v, cf_sigma, available=True, notes=(), **engine):
    k = rule.k
    spec = DesignSpec(k, _masses(z0_masses, k), rule, a_fn, **engine)
    moments = MomentSpec.from_rule(rule, a_fn)
    return NamedDesign(name, p, float(c), spec, moments, linear, cf_v, cf_sigma, available, tuple(notes))


def build_bdu(p, z0_masses=None, **engine) -> NamedDesign:
    """Birth-and-death urn: a success returns the ball plus one more."""
    p = _probabilities(p)
    k = p.size
    eye = np.eye(k)
    rule = DiscreteAddingRule.bernoulli(p, 2 * eye, np.zeros((k, k)))
    available = bool(np.all(p < 0.5))
    cf_v = cf_sigma = None
    notes = []
    if available:
        w = 1.0 / (1.0 - 2.0 * p)
        total = w.sum()
        cf_v = w / total
        # d v_k / d p_j = 2 w_j^2 (delta_jk - v_k) / W
        dv_dp = 2.0 * (w**2)[:, None] * (eye - cf_v[None, :]) / total
        cf_sigma = _sandwich(dv_dp, p, cf_v)
    else:
        notes.append("theory unavailable: needs every p_k < 1/2")
    return _build(
        "bdu", p, 1.0, rule, ConstantImmigration(tuple([1.0] * k)), z0_masses,
        _bernoulli_linear(p, 2 * eye, linked=False), cf_v, cf_sigma, available, notes, **engine,
    )


def build_dl(p, z0_masses=None, **engine) -> NamedDesign:
    """Drop-the-loser: a success returns the ball, a failure drops it."""
    p = _probabilities(p)
    k = p.size
    eye = np.eye(k)
    rule = DiscreteAddingRule.bernoulli(p, eye, np.zeros((k, k)))
    w = 1.0 / (1.0 - p)
    total = w.sum()
    cf_v = w / total
    dv_dp = (w**2)[:, None] * (eye - cf_v[None, :]) / total
    return _build(
        "dl", p, 1.0, rule, ConstantImmigration(tuple([1.0] * k)), z0_masses,
        _bernoulli_linear(p, eye, linked=False), cf_v, _sandwich(dv_dp, p, cf_v), **engine,
    )


def build_mdl(p, c: float = 1.0, z0_masses=None, **engine) -> NamedDesign:
    """Modified drop-the-loser: immigration adds ``c * p_hat_k`` of type ``k``."""
    p = _probabilities(p)
    if not c > 0:
        raise ValueError("c must be positive")
    k = p.size
    eye = np.eye(k)
    rule = DiscreteAddingRule.bernoulli(p, eye, np.zeros((k, k)))
    odds = p / (1.0 - p)
    cf_v = odds / odds.sum()
    cf_sigma = None
    if k == 2:
        (p1, p2), (q1, q2) = p, 1.0 - p
        sigma2 = q1 * q2 * (p1**2 * (1 + q2**2) + p2**2 * (1 + q1**2)) / (p2 * q1 + p1 * q2) ** 3
        cf_sigma = _two_treatment_matrix(sigma2)
    return _build(
        "mdl", p, c, rule, LinearImmigration(float(c)), z0_masses,
        _bernoulli_linear(p, eye, linked=True), cf_v, cf_sigma, **engine,
    )


def build_gdl(p, c: float = 1.0, z0_masses=None, **engine) -> NamedDesign:
    """Generalised drop-the-loser targeting ``sqrt(p)`` allocation; nothing is added after a draw."""
    p = _probabilities(p)
    if p.size != 2:
        raise ValueError("the square-root-target design is defined for two treatments")
    if not c > 0:
        raise ValueError("c must be positive")
    zero = np.zeros((2, 2))
    rule = DiscreteAddingRule.bernoulli(p, zero, zero)
    r = np.sqrt(p)
    cf_v = r / r.sum()
    cf_sigma = _two_treatment_matrix(gdl_variance(p))
    return _build(
        "gdl", p, c, rule, SqrtImmigration(float(c)), z0_masses,
        _bernoulli_linear(p, zero, linked=True), cf_v, cf_sigma, **engine,
    )


def build_const(a_vec, d_matrix_dist=None, z0_masses=None, p=None, moments: MomentSpec | None = None, **engine) -> NamedDesign:
    """Constant immigration with an arbitrary adding rule.

    ``d_matrix_dist`` is a :class:`~imurn.rules.DiscreteAddingRule`, a fixed
    ``K x K`` matrix, or ``None`` for ``D = 0``.  Outcomes are Bernoulli(``p``)
    (default 1/2) unless the rule says otherwise.  ``moments`` overrides the
    moments derived from the rule.
    """
    a = np.asarray(a_vec, dtype=float)
    k = a.size
    if np.any(a <= 0):
        raise ValueError("constant immigration rates must be positive")
    p = np.full(k, 0.5) if p is None else _probabilities(p)
    if isinstance(d_matrix_dist, DiscreteAddingRule):
        rule = d_matrix_dist
    else:
        d = np.zeros((k, k)) if d_matrix_dist is None else np.asarray(d_matrix_dist, dtype=float)
        rule = DiscreteAddingRule.bernoulli(p, d, d)
    if rule.k != k:
        raise ValueError("adding rule and rate vector disagree on K")
    a_fn = ConstantImmigration(tuple(a.tolist()))
    spec = DesignSpec(k, _masses(z0_masses, k), rule, a_fn, **engine)
    mom = moments if moments is not None else MomentSpec.from_rule(rule, a_fn)
    regime = regime_of(mom.h)
    if regime == INVALID:
        report = validate_assumptions(mom, rule)
        raise AssumptionViolated("; ".join(report.violations), report=report)
    cf_v = None
    if np.allclose(mom.h, 0.0):
        cf_v = a / a.sum()
    elif regime == UNIT_ROW_SUM:
        cf_v = eigenvector_limit(mom.h)
    cf_sigma = np.zeros((k, k)) if np.allclose(mom.h, 0.0) and np.allclose(mom.sigma_k, 0.0) else None
    return NamedDesign("const", p, 1.0, spec, mom, None, cf_v, cf_sigma)


def gdl_variance(p) -> float:
    """Closed-form variance of ``N_1 / sqrt(n)`` for the square-root-target design."""
    p1, p2 = np.asarray(p, dtype=float)
    q1, q2 = 1.0 - p1, 1.0 - p2
    r = np.sqrt(p1) + np.sqrt(p2)
    return float((p2 * q1 / np.sqrt(p1) + p1 * q2 / np.sqrt(p2)) / (2.0 * r**3))


def gpu_reference_variance(p) -> float:
    """Variance of the immigration-free urn that targets the same ``sqrt(p)`` allocation."""
    p1, p2 = np.asarray(p, dtype=float)
    r = np.sqrt(p1) + np.sqrt(p2)
    return float(np.sqrt(p1 * p2) / r**2 + 3.0 * gdl_variance(p))


def mdl_lower_bound(p) -> float:
    (p1, p2), (q1, q2) = np.asarray(p, dtype=float), 1.0 - np.asarray(p, dtype=float)
    return float(q1 * q2 * (p1**2 + p2**2) / (p2 * q1 + p1 * q2) ** 3)


def build(name: str, p=None, c: float = 1.0, z0_masses=None, a=None, d=None, **engine) -> NamedDesign:
    """Build a design by name (used by the command line)."""
    name = name.lower()
    if name == "bdu":
        return build_bdu(p, z0_masses, **engine)
    if name == "dl":
        return build_dl(p, z0_masses, **engine)
    if name == "mdl":
        return build_mdl(p, c, z0_masses, **engine)
    if name == "gdl":
        return build_gdl(p, c, z0_masses, **engine)
    if name == "const":
        if a is None:
            raise ValueError("const design needs a rate vector 'a'")
        return build_const(a, d, z0_masses, p, **engine)
    raise ValueError(f"unknown design {name!r}; choose from {', '.join(NAMES)}")
