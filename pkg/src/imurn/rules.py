"""Adding rules, immigration-rate functions and response-delay models.

All three are small immutable objects so that designs can be shipped to worker
processes.  Samplers work by inverse CDF on the counter-based uniforms from
:mod:`imurn.rng`; each one has an array path (used by the batched engine) and
a scalar path (used by the step-by-step engine) that make identical
comparisons, so both engines see the same draws.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np


def _cumulative(probs) -> tuple[float, ...]:
    cum = np.cumsum(np.asarray(probs, dtype=float))
    if not np.isclose(cum[-1], 1.0, atol=1e-9):
        raise ValueError(f"probabilities must sum to 1, got {cum[-1]}")
    cum[-1] = 1.0
    return tuple(float(c) for c in cum)


@dataclass(frozen=True)
class Outcome:
    """One atom of a treatment's joint (outcome, adding-row) distribution."""

    prob: float
    xi: float
    row: tuple[float, ...]


@dataclass(frozen=True)
class DiscreteAddingRule:
    """Adding rule given by a finite joint law of ``(xi, D row)`` per treatment.

    ``outcomes[k]`` lists the atoms for treatment ``k`` (0-based).  Drawing a
    type-``k`` ball yields outcome ``xi`` and adds ``row[j]`` mass to every
    treatment type ``j``.  Moments are exact.
    """

    outcomes: tuple[tuple[Outcome, ...], ...]
    n_uniforms: int = field(default=1, init=False)

    def __post_init__(self):
        k = len(self.outcomes)
        for atoms in self.outcomes:
            if not atoms:
                raise ValueError("each treatment needs at least one outcome")
            for atom in atoms:
                if len(atom.row) != k:
                    raise ValueError(f"adding rows must have length {k}")
                if atom.prob < 0:
                    raise ValueError("negative outcome probability")
        cum = tuple(_cumulative([a.prob for a in atoms]) for atoms in self.outcomes)
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_cum_arr", tuple(np.array(c) for c in cum))
        object.__setattr__(
            self, "_xi", tuple(np.array([a.xi for a in atoms], dtype=float) for atoms in self.outcomes)
        )
        object.__setattr__(
            self, "_rows", tuple(np.array([a.row for a in atoms], dtype=float) for atoms in self.outcomes)
        )

    @classmethod
    def bernoulli(cls, p, success_rows, failure_rows) -> "DiscreteAddingRule":
        """Binary outcomes: success (``xi = 1``) with probability ``p[k]``."""
        outcomes = []
        for pk, srow, frow in zip(p, success_rows, failure_rows):
            pk = float(pk)
            outcomes.append(
                (
                    Outcome(pk, 1.0, tuple(float(x) for x in srow)),
                    Outcome(1.0 - pk, 0.0, tuple(float(x) for x in frow)),
                )
            )
        return cls(tuple(outcomes))

    @classmethod
    def deterministic(cls, d_matrix, xi=None) -> "DiscreteAddingRule":
        d = np.asarray(d_matrix, dtype=float)
        xi = np.zeros(d.shape[0]) if xi is None else np.asarray(xi, dtype=float)
        return cls(tuple((Outcome(1.0, float(xi[k]), tuple(d[k].tolist())),) for k in range(d.shape[0])))

    @property
    def k(self) -> int:
        return len(self.outcomes)

    def sample(self, k: int, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Array path: ``u`` has shape ``(n, 1)``; returns ``xi (n,)`` and ``D (n, K)``."""
        idx = np.searchsorted(self._cum_arr[k], u[:, 0], side="right")
        return self._xi[k][idx], self._rows[k][idx]

    def sample_one(self, k: int, u: tuple[float, ...]) -> tuple[float, tuple[float, ...]]:
        atom = self.outcomes[k][bisect.bisect_right(self._cum[k], u[0])]
        return atom.xi, atom.row

    # moments -------------------------------------------------------------
    def mean_matrix(self) -> np.ndarray:
        return np.array([sum(a.prob * np.asarray(a.row) for a in atoms) for atoms in self.outcomes])

    def theta(self) -> np.ndarray:
        return np.array([sum(a.prob * a.xi for a in atoms) for atoms in self.outcomes])

    def var_xi(self) -> np.ndarray:
        th = self.theta()
        return np.array([sum(a.prob * (a.xi - th[k]) ** 2 for a in atoms) for k, atoms in enumerate(self.outcomes)])

    def row_covariances(self) -> np.ndarray:
        h = self.mean_matrix()
        out = np.zeros((self.k, self.k, self.k))
        for k, atoms in enumerate(self.outcomes):
            for a in atoms:
                dev = np.asarray(a.row) - h[k]
                out[k] += a.prob * np.outer(dev, dev)
        return out

    def row_outcome_covariance(self) -> np.ndarray:
        """Entry ``(j, k)`` is ``Cov(D_kj, xi_k)``."""
        h = self.mean_matrix()
        th = self.theta()
        out = np.zeros((self.k, self.k))
        for k, atoms in enumerate(self.outcomes):
            for a in atoms:
                out[:, k] += a.prob * (np.asarray(a.row) - h[k]) * (a.xi - th[k])
        return out

    def min_diagonal(self) -> np.ndarray:
        return np.array([min(a.row[k] for a in atoms) for k, atoms in enumerate(self.outcomes)])

    def offdiagonal_nonnegative(self) -> np.ndarray:
        ok = np.ones((self.k, self.k), dtype=bool)
        for k, atoms in enumerate(self.outcomes):
            for j in range(self.k):
                ok[k, j] = all(a.row[j] >= 0 for a in atoms)
        return ok


# immigration-rate functions ------------------------------------------------
# Each maps estimates of shape (..., K) to rates of shape (..., K) and exposes
# ``jacobian(theta)`` with entry (j, k) = d a_k / d theta_j.


@dataclass(frozen=True)
class ConstantImmigration:
    rates: tuple[float, ...]

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(np.asarray(self.rates, dtype=float), theta.shape).copy()

    def jacobian(self, theta):
        k = len(self.rates)
        return np.zeros((k, k))


@dataclass(frozen=True)
class LinearImmigration:
    """``a_k = c * theta_k``."""

    c: float = 1.0

    def __call__(self, theta):
        return self.c * np.asarray(theta, dtype=float)

    def jacobian(self, theta):
        return self.c * np.eye(len(theta))


@dataclass(frozen=True)
class SqrtImmigration:
    """``a_k = c * sqrt(theta_k)``."""

    c: float = 1.0

    def __call__(self, theta):
        return self.c * np.sqrt(np.asarray(theta, dtype=float))

    def jacobian(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.diag(self.c / (2.0 * np.sqrt(theta)))


# delays --------------------------------------------------------------------

_TAIL_CUTOFF = 2.0**-60


@dataclass(frozen=True)
class DelayModel:
    """Per-treatment law of the number of later arrivals before a response is seen.

    ``pmfs[k][l]`` is the probability that the response of a treatment-``k``
    subject becomes available ``l`` arrivals later (``l = 0``: immediately).
    Unbounded laws are truncated where the remaining tail drops below the
    resolution of a 53-bit uniform, so the truncation is invisible to the
    sampler.
    """

    pmfs: tuple[tuple[float, ...], ...]
    decay_exponent: float | None = None
    label: str = "custom"

    def __post_init__(self):
        cum = tuple(_cumulative(p) for p in self.pmfs)
        object.__setattr__(self, "_cum", cum)
        object.__setattr__(self, "_cum_arr", tuple(np.array(c) for c in cum))

    @classmethod
    def fixed(cls, lag: int, k: int) -> "DelayModel":
        if lag < 0:
            raise ValueError("lag must be >= 0")
        pmf = tuple([0.0] * lag + [1.0])
        return cls(tuple(pmf for _ in range(k)), decay_exponent=math.inf, label=f"fixed:{lag}")

    @classmethod
    def geometric(cls, q: float, k: int) -> "DelayModel":
        """``P(l) = q (1 - q)**l`` for ``l = 0, 1, ...``."""
        if not 0 < q <= 1:
            raise ValueError("geometric delay parameter must lie in (0, 1]")
        pmf = []
        tail = 1.0
        while tail > _TAIL_CUTOFF and len(pmf) < 100_000:
            pmf.append(q * tail)
            tail *= 1.0 - q
        pmf[-1] += tail
        return cls(tuple(tuple(pmf) for _ in range(k)), decay_exponent=math.inf, label=f"geometric:{q:g}")

    @classmethod
    def power_law(cls, gamma: float, k: int, max_lag: int = 10_000) -> "DelayModel":
        """Tail ``P(l' >= l)`` decaying like ``l**-gamma``, truncated at ``max_lag``."""
        lags = np.arange(max_lag + 1, dtype=float)
        w = (lags + 1.0) ** -gamma - (lags + 2.0) ** -gamma
        w[-1] += (max_lag + 2.0) ** -gamma
        pmf = tuple((w / w.sum()).tolist())
        return cls(tuple(pmf for _ in range(k)), decay_exponent=gamma, label=f"power:{gamma:g}")

    @property
    def max_delay(self) -> int:
        return max(len(p) for p in self.pmfs) - 1

    def is_zero(self) -> bool:
        return all(len(p) == 1 for p in self.pmfs)

    def sample(self, k: int, u: np.ndarray) -> np.ndarray:
        return np.searchsorted(self._cum_arr[k], u, side="right")

    def sample_one(self, k: int, u: float) -> int:
        return bisect.bisect_right(self._cum[k], u)
