"""Limit proportions, asymptotic covariance and variance lower bounds.

Conventions used throughout (``K`` treatments, vectors are rows):

* ``h[k, j]`` is the mean mass of type ``j`` added after a type-``k`` draw.
* ``u = a (I - H)^-1``, ``s = u . 1`` and ``v = u / s``.
* ``A = (I - H)^-1 (I - 1' v)``.
* Jacobians are laid out with entry ``(j, k) = d v_k / d x_j``.
* ``sigma12[j, k] = Cov(D_kj, xi_k)``.

The derivative of ``v`` with respect to the estimates only goes through the
immigration rates; the mean adding matrix is held at its true value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import rng as _rng
from .errors import (
    AssumptionViolated,
    DegenerateEigenvalue,
    NonFiniteDerivative,
    NonPositiveFisher,
    NotDiagonalDesign,
    SingularSystem,
)

ROW_SUM_MARGIN = 1e-9
UNIT_ROW_SUM_TOL = 1e-12
_COND_LIMIT = 1e12

STANDARD = "standard"
UNIT_ROW_SUM = "unit-row-sum"
INVALID = "invalid"


@dataclass(frozen=True)
class MomentSpec:
    """First and second moments of a design's adding rule and outcomes."""

    h: np.ndarray
    sigma_k: np.ndarray
    sigma12: np.ndarray
    var_xi: np.ndarray
    theta: np.ndarray
    a_fn: Callable
    approximate: bool = False
    standard_errors: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        for name in ("h", "sigma_k", "sigma12", "var_xi", "theta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k = self.h.shape[0]
        if self.h.shape != (k, k) or self.sigma_k.shape != (k, k, k) or self.sigma12.shape != (k, k):
            raise ValueError("moment arrays have inconsistent shapes")
        if self.var_xi.shape != (k,) or self.theta.shape != (k,):
            raise ValueError("var_xi and theta must be K-vectors")
        if np.any(self.var_xi < 0):
            raise ValueError("outcome variances must be nonnegative")
        for s in self.sigma_k:
            if not np.allclose(s, s.T, atol=1e-12):
                raise ValueError("row covariance matrices must be symmetric")
            if np.linalg.eigvalsh(s).min() < -1e-10:
                raise ValueError("row covariance matrices must be positive semidefinite")

    @property
    def k(self) -> int:
        return self.h.shape[0]

    @classmethod
    def from_rule(cls, rule, a_fn) -> "MomentSpec":
        """Exact moments of a :class:`~imurn.rules.DiscreteAddingRule`."""
        return cls(
            h=rule.mean_matrix(),
            sigma_k=rule.row_covariances(),
            sigma12=rule.row_outcome_covariance(),
            var_xi=rule.var_xi(),
            theta=rule.theta(),
            a_fn=a_fn,
        )

    def rates(self, theta=None) -> np.ndarray:
        return np.asarray(self.a_fn(self.theta if theta is None else np.asarray(theta, dtype=float)), dtype=float)


@dataclass(frozen=True)
class LinearRuleSpec:
    """Adding rows that are affine in a scalar statistic per treatment.

    Row ``k`` of ``D`` is ``alpha[k] + beta[k] * eta_k`` with ``E eta_k = d[k]``.
    ``dtheta_dd`` links the estimated parameter to ``d`` when the immigration
    rates also move with it (``theta_k`` as a function of ``d_k``, diagonal);
    ``None`` means the rates do not depend on ``d``.
    """

    alpha: np.ndarray
    beta: np.ndarray
    d: np.ndarray
    var_eta: np.ndarray
    cov_eta_xi: np.ndarray
    fisher: np.ndarray
    dtheta_dd: np.ndarray | None = None

    def __post_init__(self):
        for name in ("alpha", "beta", "d", "var_eta", "cov_eta_xi", "fisher"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.dtheta_dd is not None:
            object.__setattr__(self, "dtheta_dd", np.asarray(self.dtheta_dd, dtype=float))
        if np.any(self.var_eta <= 0):
            raise ValueError("var_eta must be positive")

    def h_of_d(self, d=None) -> np.ndarray:
        d = self.d if d is None else np.asarray(d, dtype=float)
        return self.alpha + d[:, None] * self.beta


@dataclass
class TheoreticalSummary:
    a: np.ndarray
    v: np.ndarray
    u: np.ndarray | None = None
    s: float | None = None
    A: np.ndarray | None = None
    lambda11: np.ndarray | None = None
    lambda12: np.ndarray | None = None
    lambda22: np.ndarray | None = None
    dv_dtheta: np.ndarray | None = None
    sigma_D: np.ndarray | None = None
    sigma_xi: np.ndarray | None = None
    sigma_Dxi: np.ndarray | None = None
    sigma_total: np.ndarray | None = None
    lower_bound: np.ndarray | None = None
    regime: str = STANDARD
    approximate: bool = False

    JSON_KEYS = (
        "a", "u", "s", "v", "A", "lambda11", "lambda12", "lambda22", "dv_dtheta",
        "sigma_D", "sigma_xi", "sigma_Dxi", "sigma_total", "lower_bound",
    )

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for key in self.JSON_KEYS:
            val = getattr(self, key)
            if isinstance(val, np.ndarray):
                val = val.tolist()
            elif val is not None:
                val = float(val)
            out[key] = val
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TheoreticalSummary":
        kw = {}
        for key in cls.JSON_KEYS:
            val = data.get(key)
            if key == "s":
                kw[key] = None if val is None else float(val)
            else:
                kw[key] = None if val is None else np.asarray(val, dtype=float)
        return cls(**kw)

    def efficiency(self) -> np.ndarray | None:
        """Diagonal of the covariance divided by the diagonal of the bound."""
        if self.sigma_total is None or self.lower_bound is None:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.diag(self.sigma_total) / np.diag(self.lower_bound)


# ---------------------------------------------------------------------------
# linear algebra helpers


def _row_sums(h: np.ndarray) -> np.ndarray:
    return h.sum(axis=1)


def _check_row_sums(h: np.ndarray) -> None:
    rs = _row_sums(h)
    bad = np.nonzero(rs >= 1.0 - ROW_SUM_MARGIN)[0]
    if bad.size:
        k = int(bad[0])
        raise AssumptionViolated(
            f"row sum of H for treatment {k + 1} is {rs[k]:.6g}; every row must sum to less than 1"
        )


def _inverse_i_minus_h(h: np.ndarray) -> np.ndarray:
    m = np.eye(h.shape[0]) - h
    try:
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > _COND_LIMIT:
            raise SingularSystem(f"I - H is singular to working precision (condition number {cond:.3g})")
        return np.linalg.solve(m, np.eye(h.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def _limit_from_rates(a: np.ndarray, h: np.ndarray):
    inv = _inverse_i_minus_h(h)
    u = a @ inv
    s = float(u.sum())
    return inv, u, s, u / s


def _mixing(inv: np.ndarray, v: np.ndarray) -> np.ndarray:
    k = v.shape[0]
    return inv @ (np.eye(k) - np.outer(np.ones(k), v))


def _sym(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + x.T)


def _checked_rates(m: MomentSpec, theta=None) -> np.ndarray:
    a = m.rates(theta)
    if a.shape != (m.k,):
        raise ValueError(f"immigration function returned shape {a.shape}, expected ({m.k},)")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise AssumptionViolated(f"immigration rates must be positive, got {a}")
    return a


# ---------------------------------------------------------------------------
# operations


def limit_proportions(m: MomentSpec) -> np.ndarray:
    _check_row_sums(m.h)
    a = _checked_rates(m)
    return _limit_from_rates(a, m.h)[3]


def mixing_matrix_A(m: MomentSpec) -> np.ndarray:
    _check_row_sums(m.h)
    inv, _, _, v = _limit_from_rates(_checked_rates(m), m.h)
    return _mixing(inv, v)


def _numeric_dv_dtheta(v_of_theta: Callable[[np.ndarray], np.ndarray], theta: np.ndarray) -> np.ndarray:
    k = theta.shape[0]
    out = np.empty((k, k))
    for j in range(k):
        step = max(1e-6, 1e-6 * abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += step
        dn[j] -= step
        try:
            row = (v_of_theta(up) - v_of_theta(dn)) / (2.0 * step)
        except (ArithmeticError, ValueError, AssumptionViolated) as exc:
            raise NonFiniteDerivative(f"perturbed evaluation failed along theta_{j + 1}: {exc}") from exc
        if not np.all(np.isfinite(row)):
            raise NonFiniteDerivative(f"non-finite derivative along theta_{j + 1}")
        out[j] = row
    return out


def jacobian_dv_dtheta(m: MomentSpec, mode: str = "auto") -> np.ndarray:
    """``d v / d theta`` through the immigration rates, ``H`` held fixed.

    ``mode`` is ``"analytic"`` (needs ``a_fn.jacobian``), ``"numeric"``
    (central differences) or ``"auto"`` (analytic when available).
    """
    if mode not in ("auto", "analytic", "numeric"):
        raise ValueError(f"unknown mode {mode!r}")
    has_jac = callable(getattr(m.a_fn, "jacobian", None))
    if mode == "analytic" and not has_jac:
        raise ValueError("analytic mode needs an immigration function with a jacobian")
    inv, _, s, v = _limit_from_rates(_checked_rates(m), m.h)
    if mode == "numeric" or (mode == "auto" and not has_jac):
        def v_of(theta):
            with np.errstate(all="raise", under="ignore"):
                a = np.asarray(m.a_fn(theta), dtype=float)
                u = a @ inv
                return u / u.sum()
        return _numeric_dv_dtheta(v_of, m.theta.copy())
    ja = np.asarray(m.a_fn.jacobian(m.theta), dtype=float)
    return ja @ _mixing(inv, v) / s


def _lambda_blocks(sigma11, sigma12, var_xi, v):
    return sigma11, sigma12 @ np.diag(v), np.diag(var_xi * v)


def asymptotic_covariance(m: MomentSpec, mode: str = "auto") -> TheoreticalSummary:
    """Full covariance of ``sqrt(n) (N_n / n - v)`` for a design with rows of ``H`` below one."""
    _check_row_sums(m.h)
    a = _checked_rates(m)
    inv, u, s, v = _limit_from_rates(a, m.h)
    A = _mixing(inv, v)
    J = jacobian_dv_dtheta(m, mode)
    sigma11 = np.einsum("k,kij->ij", v, m.sigma_k)
    l11, l12, l22 = _lambda_blocks(sigma11, m.sigma12, m.var_xi, v)
    sigma_D = _sym(A.T @ sigma11 @ A)
    sigma_xi = _sym(J.T @ np.diag(m.var_xi / v) @ J)
    sigma_Dxi = A.T @ m.sigma12 @ J
    total = sigma_D + 2.0 * sigma_xi + sigma_Dxi + sigma_Dxi.T
    return TheoreticalSummary(
        a=a, u=u, s=s, v=v, A=A, lambda11=l11, lambda12=l12, lambda22=l22, dv_dtheta=J,
        sigma_D=sigma_D, sigma_xi=sigma_xi, sigma_Dxi=sigma_Dxi, sigma_total=_sym(total),
        approximate=m.approximate,
    )


def _is_diagonal(x: np.ndarray, tol: float = 0.0) -> bool:
    return bool(np.all(np.abs(x - np.diag(np.diag(x))) <= tol))


def asymptotic_covariance_diagonal(m: MomentSpec, mode: str = "auto") -> TheoreticalSummary:
    """Covariance for adding rules that only ever touch the drawn type.

    Works from the scalar quantities ``h_k = 1 - E D_kk``, ``Var D_kk``,
    ``Var xi_k`` and ``Cov(D_kk, xi_k)`` and never inverts ``I - H``.
    """
    if not (_is_diagonal(m.h) and _is_diagonal(m.sigma12) and all(_is_diagonal(s) for s in m.sigma_k)):
        raise NotDiagonalDesign("adding rule has off-diagonal entries")
    k = m.k
    hvec = 1.0 - np.diag(m.h)
    if np.any(hvec <= 0):
        raise AssumptionViolated(f"need 1 - E D_kk > 0 for every treatment, got {hvec}")
    sig_d = np.array([m.sigma_k[i, i, i] for i in range(k)])
    sig_dxi = np.diag(m.sigma12).copy()

    def v_of(theta):
        r = np.asarray(m.a_fn(theta), dtype=float) / hvec
        return r / r.sum()

    a = _checked_rates(m)
    ratio = a / hvec
    total_rate = ratio.sum()
    v = ratio / total_rate
    eye = np.eye(k)
    # d v_k / d a_i = (delta_ik - v_k) / (h_i * S)
    dv_da = (eye - v[None, :]) / (hvec[:, None] * total_rate)
    has_jac = callable(getattr(m.a_fn, "jacobian", None))
    if mode == "numeric" or (mode == "auto" and not has_jac):
        dv_dtheta = _numeric_dv_dtheta(v_of, m.theta.copy())
    else:
        dv_dtheta = np.asarray(m.a_fn.jacobian(m.theta), dtype=float) @ dv_da
    # d v_k / d h_j = -(v_j / h_j) (delta_jk - v_k)
    dv_dh = -(v / hvec)[:, None] * (eye - v[None, :])

    sigma_D = _sym(dv_dh.T @ np.diag(sig_d / v) @ dv_dh)
    sigma_xi = _sym(dv_dtheta.T @ np.diag(m.var_xi / v) @ dv_dtheta)
    sigma_Dxi = -dv_dh.T @ np.diag(sig_dxi / v) @ dv_dtheta
    total = sigma_D + 2.0 * sigma_xi + sigma_Dxi + sigma_Dxi.T

    A = (eye - np.outer(np.ones(k), v)) / hvec[:, None]
    u = a / hvec
    l11, l12, l22 = _lambda_blocks(np.diag(sig_d * v), np.diag(sig_dxi), m.var_xi, v)
    return TheoreticalSummary(
        a=a, u=u, s=float(u.sum()), v=v, A=A, lambda11=l11, lambda12=l12, lambda22=l22,
        dv_dtheta=dv_dtheta, sigma_D=sigma_D, sigma_xi=sigma_xi, sigma_Dxi=sigma_Dxi,
        sigma_total=_sym(total), approximate=m.approximate,
    )


def eigenvector_limit(h) -> np.ndarray:
    """Normalised left eigenvector of ``H`` for eigenvalue 1 (rows of ``H`` sum to one)."""
    h = np.asarray(h, dtype=float)
    k = h.shape[0]
    rs = _row_sums(h)
    if np.max(np.abs(rs - 1.0)) > UNIT_ROW_SUM_TOL:
        raise AssumptionViolated(f"rows of H must sum to 1, got {rs}")
    m = np.eye(k) - h
    sv = np.linalg.svd(m, compute_uv=False)
    scale = max(1.0, float(sv[0]))
    if np.sum(sv <= 1e-10 * scale) > 1:
        raise DegenerateEigenvalue("eigenvalue 1 of H is not simple (rank of I - H below K - 1)")
    eig = np.linalg.eigvals(h)
    if np.sum(np.abs(eig - 1.0) < 1e-7) > 1:
        raise DegenerateEigenvalue("eigenvalue 1 of H has algebraic multiplicity above 1")
    # v (I - H) = 0 with v . 1 = 1, as one least-squares system
    lhs = np.vstack([m.T, np.ones((1, k))])
    rhs = np.concatenate([np.zeros(k), [1.0]])
    v = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    if np.any(v < -1e-10):
        raise AssumptionViolated(f"left eigenvector has negative entries: {v}")
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def linear_rule_jacobian(l: LinearRuleSpec, m: MomentSpec) -> np.ndarray:
    """``d v / d d`` for a linear rule: ``diag(v) K A`` plus the rate route if linked."""
    _check_row_sums(m.h)
    inv, _, _, v = _limit_from_rates(_checked_rates(m), m.h)
    A = _mixing(inv, v)
    jac = np.diag(v) @ l.beta @ A
    if l.dtheta_dd is not None and callable(getattr(m.a_fn, "jacobian", None)):
        jac = jac + l.dtheta_dd[:, None] * jacobian_dv_dtheta(m, "analytic")
    elif l.dtheta_dd is not None:
        jac = jac + l.dtheta_dd[:, None] * jacobian_dv_dtheta(m, "numeric")
    return jac


def linear_rule_covariances(l: LinearRuleSpec, m: MomentSpec) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma_D, Sigma_Dxi)`` written through ``d v / d d`` for a linear rule.

    Uses only the adding-matrix route ``diag(v) K A`` for ``d v / d d``.
    """
    _check_row_sums(m.h)
    inv, _, _, v = _limit_from_rates(_checked_rates(m), m.h)
    jd = np.diag(v) @ l.beta @ _mixing(inv, v)
    J = jacobian_dv_dtheta(m)
    sigma_D = _sym(jd.T @ np.diag(l.var_eta / v) @ jd)
    sigma_Dxi = jd.T @ np.diag(l.cov_eta_xi / v) @ J
    return sigma_D, sigma_Dxi


def lower_bound(l: LinearRuleSpec, m: MomentSpec) -> np.ndarray:
    """Smallest attainable covariance of ``N_n / sqrt(n)`` for targets ``v(d)``."""
    if np.any(l.fisher <= 0):
        raise NonPositiveFisher(f"Fisher information must be positive, got {l.fisher}")
    if not np.allclose(l.h_of_d(), m.h, atol=1e-9):
        raise ValueError("linear rule does not reproduce the mean adding matrix")
    v = limit_proportions(m)
    J = linear_rule_jacobian(l, m)
    return _sym(J.T @ np.diag(1.0 / (v * l.fisher)) @ J)


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class ValidationReport:
    regime: str
    violations: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    row_sums: list[float] = field(default_factory=list)
    margins: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok, "regime": self.regime, "violations": list(self.violations),
            "notes": list(self.notes), "row_sums": list(self.row_sums), "margins": list(self.margins),
        }

    def raise_if_failed(self) -> None:
        if self.violations:
            raise AssumptionViolated("; ".join(self.violations), report=self)


def regime_of(h) -> str:
    rs = _row_sums(np.asarray(h, dtype=float))
    if np.all(np.abs(rs - 1.0) <= UNIT_ROW_SUM_TOL):
        return UNIT_ROW_SUM
    if np.all(rs < 1.0 - ROW_SUM_MARGIN):
        return STANDARD
    return INVALID


def validate_assumptions(m: MomentSpec, rule=None, probe_samples: int = 10_000) -> ValidationReport:
    """Check rate positivity and smoothness, adding-rule bounds and the row-sum condition.

    ``rule`` is the design's adding rule; when given, its support (or samples
    from it) is used for the lower bound on ``D_kk`` and the sign condition on
    off-diagonal entries.
    """
    h = m.h
    rs = _row_sums(h)
    regime = regime_of(h)
    rep = ValidationReport(regime=regime, row_sums=rs.tolist(), margins=(1.0 - rs).tolist())

    # rates: positive and smooth at theta
    try:
        a = m.rates()
        if np.any(~np.isfinite(a)) or np.any(a <= 0):
            rep.violations.append(f"immigration rates a(theta) must be positive, got {np.round(a, 6).tolist()}")
        else:
            inv = np.eye(m.k)
            coarse = _numeric_dv_dtheta(lambda t: np.asarray(m.a_fn(t), dtype=float) @ inv, m.theta.copy())
            fine_theta = m.theta.copy()
            fine = np.empty_like(coarse)
            for j in range(m.k):
                step = max(1e-4, 1e-4 * abs(fine_theta[j]))
                up, dn = fine_theta.copy(), fine_theta.copy()
                up[j] += step
                dn[j] -= step
                fine[j] = (np.asarray(m.a_fn(up)) - np.asarray(m.a_fn(dn))) / (2 * step)
            if not np.allclose(coarse, fine, rtol=1e-3, atol=1e-6):
                rep.violations.append("immigration rates do not look differentiable at theta")
    except (NonFiniteDerivative, ArithmeticError, ValueError) as exc:
        rep.violations.append(f"immigration rates cannot be differentiated at theta: {exc}")

    # adding rule: D_kk bounded below, off-diagonal sign condition
    if rule is not None:
        if hasattr(rule, "min_diagonal"):
            dmin = np.asarray(rule.min_diagonal())
            offdiag_ok = np.asarray(rule.offdiagonal_nonnegative())
        else:
            dmin, offdiag_ok = _probe_rule(rule, m.k, probe_samples)
        rep.notes.append(f"smallest diagonal adding mass per treatment: {dmin.tolist()}")
        if not np.all(np.isfinite(dmin)):
            rep.violations.append("diagonal adding masses are not bounded below")
        for k in range(m.k):
            for j in range(m.k):
                if j != k and not offdiag_ok[k, j] and not h[k, j] > 0:
                    rep.violations.append(
                        f"D[{k + 1},{j + 1}] can be negative while its mean is not positive"
                    )
    else:
        rep.notes.append("adding-rule support not checked (no rule supplied)")

    if regime == UNIT_ROW_SUM:
        rep.notes.append("rows of H sum to exactly 1: limits come from the left eigenvector; no normality result")
        try:
            eigenvector_limit(h)
        except (DegenerateEigenvalue, AssumptionViolated) as exc:
            rep.violations.append(str(exc))
    elif regime == INVALID:
        for k in np.nonzero(rs >= 1.0 - ROW_SUM_MARGIN)[0]:
            rep.violations.append(
                f"row sum of H for treatment {k + 1} is {rs[k]:.6g} (must be below 1)"
            )
    return rep


def _probe_rule(rule, k: int, n: int):
    key = _rng.replication_key(0x5EED, 0)
    steps = np.arange(n)
    dmin = np.full(k, np.inf)
    ok = np.ones((k, k), dtype=bool)
    for t in range(k):
        u = np.column_stack([_rng.uniforms(key, steps, _rng.slot(_rng.OUTCOME, i)) for i in range(rule.n_uniforms)])
        _, d = rule.sample(t, u)
        d = np.asarray(d, dtype=float)
        dmin[t] = d[:, t].min()
        ok[t] = (d >= 0).all(axis=0)
    return dmin, ok


# ---------------------------------------------------------------------------
# dispatch + sampled moments


def summarize(m: MomentSpec, linear: LinearRuleSpec | None = None, mode: str = "auto") -> TheoreticalSummary:
    """Summary appropriate to the design's regime, with the bound when available."""
    regime = regime_of(m.h)
    if regime == UNIT_ROW_SUM:
        a = _checked_rates(m)
        return TheoreticalSummary(a=a, v=eigenvector_limit(m.h), regime=UNIT_ROW_SUM, approximate=m.approximate)
    if regime == INVALID:
        _check_row_sums(m.h)
    summary = asymptotic_covariance(m, mode)
    if linear is not None:
        summary.lower_bound = lower_bound(linear, m)
    return summary


def estimate_moments(rule, a_fn, n_samples: int = 10**6, seed: int = 0) -> MomentSpec:
    """Moments of an arbitrary adding rule by sampling it ``n_samples`` times per treatment.

    The result is flagged ``approximate`` and carries standard errors of the
    mean matrix and the outcome means.
    """
    k = rule.k
    steps = np.arange(n_samples)
    h = np.zeros((k, k))
    h_se = np.zeros((k, k))
    sig = np.zeros((k, k, k))
    s12 = np.zeros((k, k))
    var_xi = np.zeros(k)
    theta = np.zeros(k)
    theta_se = np.zeros(k)
    for t in range(k):
        key = _rng.replication_key(seed, t)
        u = np.column_stack([_rng.uniforms(key, steps, _rng.slot(_rng.OUTCOME, i)) for i in range(rule.n_uniforms)])
        xi, d = rule.sample(t, u)
        xi = np.asarray(xi, dtype=float)
        d = np.asarray(d, dtype=float)
        h[t] = d.mean(axis=0)
        h_se[t] = d.std(axis=0, ddof=1) / np.sqrt(n_samples)
        sig[t] = np.atleast_2d(np.cov(d, rowvar=False))
        theta[t] = xi.mean()
        theta_se[t] = xi.std(ddof=1) / np.sqrt(n_samples)
        var_xi[t] = xi.var(ddof=1)
        s12[:, t] = ((d - h[t]) * (xi - theta[t])[:, None]).sum(axis=0) / (n_samples - 1)
    sig = 0.5 * (sig + np.transpose(sig, (0, 2, 1)))
    return MomentSpec(
        h=h, sigma_k=sig, sigma12=s12, var_xi=var_xi, theta=theta, a_fn=a_fn,
        approximate=True, standard_errors={"h": h_se, "theta": theta_se},
    )
