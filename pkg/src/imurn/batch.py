"""Lockstep simulation of many independent replications.

Replication ``r`` draws its uniforms from its own counter-based stream, and
every array operation here is elementwise across replications, so a
replication's path does not depend on which other replications share the
batch.  The floating-point operations per replication are the same, in the
same order, as in :func:`imurn.urn.assign_next_subject`; with integer-valued
outcomes the two engines agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as _rng
from .errors import ImmigrationLoopExceeded
from .urn import DesignSpec

_MAX_WINDOW = 4096


def select_balls(z0: float, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Array version of :func:`imurn.urn.select_ball`; ``z`` has shape ``(n, K)``."""
    n, k = z.shape
    pos = np.where(z > 0, z, 0.0)
    cum = np.empty((n, k + 1))
    cum[:, 0] = z0
    for j in range(k):
        cum[:, j + 1] = cum[:, j] + pos[:, j]
    x = u * cum[:, k]
    hit = x[:, None] < cum
    choice = np.argmax(hit, axis=1)
    miss = ~hit.any(axis=1)
    if miss.any():
        positive = pos[miss] > 0
        last = k - np.argmax(positive[:, ::-1], axis=1)
        choice[miss] = np.where(positive.any(axis=1), last, 0)
    return choice


@dataclass
class BatchResult:
    replications: np.ndarray
    n_assigned: np.ndarray
    n_immigration: np.ndarray
    z: np.ndarray
    s_observed: np.ndarray
    n_observed: np.ndarray
    theta_hat: np.ndarray
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)
    checkpoint_immigration: dict[int, np.ndarray] = field(default_factory=dict)


def run_batch(
    spec: DesignSpec,
    n: int,
    seed: int,
    replications: Sequence[int],
    checkpoints: Sequence[int] = (),
) -> BatchResult:
    """Run ``n`` subjects for every replication index in ``replications``.

    ``checkpoints`` lists horizons at which allocation counts are also kept.
    """
    reps = np.asarray(list(replications), dtype=np.int64)
    keys = _rng.replication_keys(seed, reps.tolist())
    r, k = len(reps), spec.k_treatments
    rows = np.arange(r)
    z0 = spec.initial_masses[0]
    z = np.tile(np.asarray(spec.initial_masses[1:], dtype=float), (r, 1))
    n_assigned = np.zeros((r, k), dtype=np.int64)
    n_imm = np.zeros(r, dtype=np.int64)
    s_obs = np.zeros((r, k))
    n_obs = np.zeros((r, k), dtype=np.int64)
    alpha, beta = spec.estimator_alpha, spec.estimator_beta
    rule = spec.adding_rule
    cap = spec.max_immigration_draws_per_step
    delayed_urn = spec.delayed_urn_update
    wanted = set(int(c) for c in checkpoints)
    cp: dict[int, np.ndarray] = {}
    cp_imm: dict[int, np.ndarray] = {}

    has_delay = spec.has_delay
    if has_delay:
        window = min(spec.delay.max_delay + 1, _MAX_WINDOW, n + 1)
        window = max(window, 2)
        b_s = np.zeros((r, window, k))
        b_n = np.zeros((r, window, k), dtype=np.int64)
        b_d = np.zeros((r, window, k)) if delayed_urn else None
        overflow: dict[int, list] = {}

    draw_slots = {}
    outcome_slots = [_rng.slot(_rng.OUTCOME, i) for i in range(rule.n_uniforms)]
    delay_slot = _rng.slot(_rng.DELAY)

    for m in range(1, n + 1):
        if has_delay:
            b = m % window
            s_obs += b_s[:, b]
            n_obs += b_n[:, b]
            b_s[:, b] = 0.0
            b_n[:, b] = 0
            if delayed_urn:
                z += b_d[:, b]
                b_d[:, b] = 0.0
            for idx, kk, xi, row in overflow.pop(m, ()):
                s_obs[idx, kk] += xi
                n_obs[idx, kk] += 1
                if delayed_urn:
                    z[idx] += row

        theta = (alpha + s_obs) / (beta + n_obs)
        a = np.asarray(spec.immigration_fn(theta), dtype=float)

        ball = np.empty(r, dtype=np.int64)
        active = rows
        draws = 0
        while active.size:
            sl = draw_slots.get(draws)
            if sl is None:
                sl = draw_slots[draws] = _rng.slot(_rng.DRAW, draws)
            u = _rng.uniforms(keys[active], m, sl)
            chosen = select_balls(z0, z[active], u)
            imm = chosen == 0
            ball[active[~imm]] = chosen[~imm]
            active = active[imm]
            draws += 1
            if active.size:
                if draws > cap:
                    raise ImmigrationLoopExceeded(m, cap, replication=int(reps[active[0]]))
                n_imm[active] += 1
                z[active] += a[active]

        trt = ball - 1
        z[rows, trt] -= 1.0
        for kk in range(k):
            idx = np.nonzero(trt == kk)[0]
            if idx.size == 0:
                continue
            kidx = keys[idx]
            u = np.column_stack([_rng.uniforms(kidx, m, s) for s in outcome_slots])
            xi, d = rule.sample(kk, u)
            xi = np.asarray(xi, dtype=float)
            d = np.asarray(d, dtype=float)
            if not delayed_urn:
                z[idx] += d
            n_assigned[idx, kk] += 1
            if has_delay:
                lag = spec.delay.sample(kk, _rng.uniforms(kidx, m, delay_slot))
            else:
                lag = np.zeros(idx.size, dtype=np.int64)
            now = lag == 0
            if now.any():
                i_now = idx[now]
                s_obs[i_now, kk] += xi[now]
                n_obs[i_now, kk] += 1
                if delayed_urn:
                    z[i_now] += d[now]
            if has_delay and not now.all():
                later = ~now
                near = later & (lag < window)
                if near.any():
                    slots = (m + lag[near]) % window
                    b_s[idx[near], slots, kk] += xi[near]
                    b_n[idx[near], slots, kk] += 1
                    if delayed_urn:
                        b_d[idx[near], slots] += d[near]
                for i in np.nonzero(later & ~near)[0]:
                    overflow.setdefault(m + int(lag[i]), []).append((int(idx[i]), kk, float(xi[i]), d[i].copy()))

        if m in wanted:
            cp[m] = n_assigned.copy()
            cp_imm[m] = n_imm.copy()

    theta = (alpha + s_obs) / (beta + n_obs)
    return BatchResult(reps, n_assigned, n_imm, z, s_obs, n_obs, theta, cp, cp_imm)
