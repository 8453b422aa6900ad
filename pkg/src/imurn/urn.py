"""Step-by-step simulation of the immigrated urn.

One subject is randomised per call to :func:`assign_next_subject`.  Ball
masses are real numbers and may go negative; sampling only ever sees their
positive parts.  Immigration balls are always returned, so their mass never
changes.

This engine keeps a full per-subject history when asked to, which is what the
bookkeeping check (:func:`ledger_check`) and the trajectory export need.  The
batched engine in :mod:`imurn.batch` runs many replications in lockstep and
reproduces this one draw for draw.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import rng as _rng
from .errors import ImmigrationLoopExceeded, LedgerMismatch
from .rules import DelayModel

DEFAULT_MAX_IMMIGRATION_DRAWS = 10**6


@dataclass(frozen=True)
class DesignSpec:
    """Everything the engine needs to run one urn design.

    Parameters
    ----------
    k_treatments : int
        Number of treatments ``K``.
    initial_masses : sequence of float
        ``K + 1`` positive masses; index 0 is the immigration type.
    adding_rule
        Object with ``sample``/``sample_one`` producing the outcome and the
        adding row after a treatment draw (see :mod:`imurn.rules`).
    immigration_fn
        Maps current estimates (shape ``(..., K)``) to immigration rates.
    estimator_alpha, estimator_beta : float
        Pseudo-sum and pseudo-count of the running mean estimator.
    delay : DelayModel, optional
        Response delay law.  ``None`` means responses are immediate.
    max_immigration_draws_per_step : int
        Safety cap on consecutive immigration draws for one subject.
    delayed_urn_update : bool
        Also withhold the adding row until the response is observed.
    """

    k_treatments: int
    initial_masses: tuple[float, ...]
    adding_rule: Any
    immigration_fn: Any
    estimator_alpha: float = 0.5
    estimator_beta: float = 1.0
    delay: DelayModel | None = None
    max_immigration_draws_per_step: int = DEFAULT_MAX_IMMIGRATION_DRAWS
    delayed_urn_update: bool = False

    def __post_init__(self):
        masses = tuple(float(x) for x in self.initial_masses)
        object.__setattr__(self, "initial_masses", masses)
        if self.k_treatments < 1:
            raise ValueError("need at least one treatment")
        if len(masses) != self.k_treatments + 1:
            raise ValueError(f"initial_masses needs {self.k_treatments + 1} entries, got {len(masses)}")
        if any(not x > 0 for x in masses):
            raise ValueError("initial masses must all be positive")
        if not (self.estimator_alpha > 0 and self.estimator_beta > 0):
            raise ValueError("estimator constants alpha and beta must be positive")
        if getattr(self.adding_rule, "k", self.k_treatments) != self.k_treatments:
            raise ValueError("adding rule and design disagree on the number of treatments")
        if self.max_immigration_draws_per_step < 1:
            raise ValueError("max_immigration_draws_per_step must be positive")
        if self.delay is not None and len(self.delay.pmfs) != self.k_treatments:
            raise ValueError("delay model needs one law per treatment")

    @property
    def has_delay(self) -> bool:
        return self.delay is not None and not self.delay.is_zero()


@dataclass
class AssignmentRecord:
    subject: int
    treatment: int  # 1-based
    immigration_draws: int
    xi: float
    d_row: tuple[float, ...]
    observed_at: int | None
    z_after: tuple[float, ...] = ()


@dataclass
class UrnState:
    z0: float
    z: list[float]
    n_assigned: list[int]
    n_immigration_draws: int
    s_observed: list[float]
    n_observed: list[int]
    step: int = 0
    z_initial: tuple[float, ...] = ()
    delayed_urn_update: bool = False
    # (due step, subject, treatment index, xi, row, record or None)
    pending: list = field(default_factory=list)

    @classmethod
    def initial(cls, spec: DesignSpec) -> "UrnState":
        k = spec.k_treatments
        z = list(spec.initial_masses[1:])
        return cls(
            z0=spec.initial_masses[0],
            z=z,
            n_assigned=[0] * k,
            n_immigration_draws=0,
            s_observed=[0.0] * k,
            n_observed=[0] * k,
            z_initial=tuple(z),
            delayed_urn_update=spec.delayed_urn_update,
        )

    @property
    def k(self) -> int:
        return len(self.z)


class Stream:
    """Counter-addressed uniforms for one replication."""

    __slots__ = ("key",)

    def __init__(self, key: int):
        self.key = int(key)

    @classmethod
    def for_replication(cls, master_seed: int, replication: int = 0) -> "Stream":
        return cls(_rng.replication_key(master_seed, replication))

    def uniform(self, step: int, slot_id: int) -> float:
        return _rng.uniform(self.key, step, slot_id)


def positive_part_masses(state: UrnState) -> np.ndarray:
    return np.array([state.z0] + [zk if zk > 0 else 0.0 for zk in state.z])


def select_ball(z0: float, z: Sequence[float], u: float) -> int:
    """Map a uniform to a ball type by inverse CDF over positive-part masses."""
    pos = [zk if zk > 0 else 0.0 for zk in z]
    total = z0
    for p in pos:
        total += p
    x = u * total
    c = z0
    if x < c:
        return 0
    for k, p in enumerate(pos):
        c += p
        if x < c:
            return k + 1
    # only reachable when u * total rounds up to total
    for k in range(len(pos) - 1, -1, -1):
        if pos[k] > 0:
            return k + 1
    return 0


def draw_ball(state: UrnState, stream: Stream, index: int = 0) -> int:
    """Draw a ball type in ``{0, ..., K}`` for the upcoming subject.

    ``index`` is the position of this draw within the subject's step; distinct
    indices address distinct uniforms.
    """
    return select_ball(state.z0, state.z, stream.uniform(state.step + 1, _rng.slot(_rng.DRAW, index)))


def current_estimates(state: UrnState, spec: DesignSpec) -> list[float]:
    a, b = spec.estimator_alpha, spec.estimator_beta
    return [(a + s) / (b + n) for s, n in zip(state.s_observed, state.n_observed)]


def _observe(state: UrnState, k: int, xi: float, row) -> None:
    state.s_observed[k] += xi
    state.n_observed[k] += 1
    if state.delayed_urn_update:
        z = state.z
        for j, d in enumerate(row):
            z[j] += d


def flush_due_responses(state: UrnState, spec: DesignSpec) -> int:
    """Apply every queued response that is due by the upcoming step.

    A response with delay ``l`` from subject ``m`` is due at step ``m + l``;
    this runs before that step's assignment, so the subject arriving at
    ``m + l`` already sees it.
    """
    due_by = state.step + 1
    applied = 0
    while state.pending and state.pending[0][0] <= due_by:
        _, _, k, xi, row, record = heapq.heappop(state.pending)
        _observe(state, k, xi, row)
        if record is not None:
            record.observed_at = due_by
        applied += 1
    return applied


def assign_next_subject(
    state: UrnState,
    spec: DesignSpec,
    stream: Stream,
    a_history: list | None = None,
    keep_snapshot: bool = False,
) -> AssignmentRecord:
    m = state.step + 1
    theta = current_estimates(state, spec)
    a = [float(x) for x in np.asarray(spec.immigration_fn(np.array(theta)), dtype=float)]
    if a_history is not None:
        a_history.append(tuple(a))

    z = state.z
    cap = spec.max_immigration_draws_per_step
    u_m = 0
    while True:
        ball = select_ball(state.z0, z, stream.uniform(m, _rng.slot(_rng.DRAW, u_m)))
        if ball != 0:
            break
        u_m += 1
        if u_m > cap:
            raise ImmigrationLoopExceeded(m, cap)
        for j in range(len(z)):
            z[j] += a[j]

    k = ball - 1
    z[k] -= 1.0
    rule = spec.adding_rule
    us = tuple(stream.uniform(m, _rng.slot(_rng.OUTCOME, i)) for i in range(rule.n_uniforms))
    xi, row = rule.sample_one(k, us)
    xi = float(xi)
    row = tuple(float(d) for d in row)
    if not spec.delayed_urn_update:
        for j, d in enumerate(row):
            z[j] += d

    state.n_assigned[k] += 1
    state.n_immigration_draws += u_m
    state.step = m

    lag = 0
    if spec.has_delay:
        lag = spec.delay.sample_one(k, stream.uniform(m, _rng.slot(_rng.DELAY)))
    record = AssignmentRecord(m, ball, u_m, xi, row, None)
    if lag == 0:
        _observe(state, k, xi, row)
        record.observed_at = m
    else:
        heapq.heappush(state.pending, (m + lag, m, k, xi, row, record))
    if keep_snapshot:
        record.z_after = tuple(z)
    return record


def ledger_check(
    state: UrnState,
    history: Sequence[AssignmentRecord],
    a_history: Sequence[Sequence[float]],
    tol_per_step: float = 1e-9,
) -> bool:
    """Recompute treatment masses from the history and compare with the engine.

    The change over step ``m`` must equal ``a_{m-1} * u_m + X_m (D_m - I)``,
    where the adding row enters at the step it was applied to the urn.  Every
    recorded snapshot and the final state are checked; the allowed error grows
    as ``tol_per_step * m``.
    """
    k = state.k
    n = len(history)
    z_init = np.asarray(state.z_initial, dtype=float)
    if n == 0:
        err = float(np.max(np.abs(np.asarray(state.z) - z_init), initial=0.0))
        if err > tol_per_step:
            raise LedgerMismatch(0, err)
        return True
    if len(a_history) != n:
        raise ValueError("a_history must hold one rate vector per subject")

    inc = np.asarray(a_history, dtype=float) * np.array([r.immigration_draws for r in history], dtype=float)[:, None]
    for i, rec in enumerate(history):
        inc[i, rec.treatment - 1] -= 1.0
        if state.delayed_urn_update:
            if rec.observed_at is None:
                continue
            at = rec.observed_at - 1
        else:
            at = i
        inc[at] += rec.d_row
    expected = z_init + np.cumsum(inc, axis=0)
    tol = tol_per_step * np.arange(1, n + 1, dtype=float)

    if all(len(rec.z_after) == k for rec in history):
        actual = np.array([rec.z_after for rec in history])
        bad = np.nonzero(np.max(np.abs(actual - expected), axis=1) > tol)[0]
        if bad.size:
            i = int(bad[0])
            raise LedgerMismatch(i + 1, float(np.max(np.abs(actual[i] - expected[i]))))
    err = float(np.max(np.abs(np.asarray(state.z) - expected[-1])))
    if err > tol[-1]:
        raise LedgerMismatch(n, err)
    return True


@dataclass
class Trajectory:
    spec: DesignSpec
    seed: int
    replication: int
    state: UrnState
    records: list[AssignmentRecord]
    a_history: list[tuple[float, ...]]


def run(
    spec: DesignSpec,
    n: int,
    seed: int,
    replication: int = 0,
    keep_history: bool = True,
) -> Trajectory:
    """Simulate ``n`` subjects of one replication."""
    state = UrnState.initial(spec)
    stream = Stream.for_replication(seed, replication)
    records: list[AssignmentRecord] = []
    a_hist: list[tuple[float, ...]] | None = [] if keep_history else None
    delayed = spec.has_delay
    for _ in range(n):
        if delayed:
            flush_due_responses(state, spec)
        rec = assign_next_subject(state, spec, stream, a_hist, keep_snapshot=keep_history)
        if keep_history:
            records.append(rec)
    return Trajectory(spec, seed, replication, state, records, a_hist or [])
