"""CSV and JSON writers for trajectories and replication tables.

Floats are written with ``repr`` so repeated runs give byte-identical files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from typing import Any, TextIO

import numpy as np

from .errors import LedgerMismatch
from .urn import Trajectory, ledger_check


def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def trajectory_rows(traj: Trajectory):
    k = traj.spec.k_treatments
    z0 = traj.state.z0
    counts = [0] * k
    n_imm = 0
    for rec in traj.records:
        counts[rec.treatment - 1] += 1
        n_imm += rec.immigration_draws
        yield [rec.subject, rec.treatment, rec.immigration_draws, rec.xi, z0, *rec.z_after, *counts, n_imm]


def trajectory_header(k: int) -> list[str]:
    return (
        ["step", "treatment", "u_m", "xi", "z0"]
        + [f"z{j}" for j in range(1, k + 1)]
        + [f"n{j}" for j in range(1, k + 1)]
        + ["n_imm"]
    )


def write_trajectory_csv(traj: Trajectory, out: TextIO) -> None:
    """One row per subject: draws, outcome and the urn right after the step."""
    w = csv.writer(out, lineterminator="\n")
    w.writerow(trajectory_header(traj.spec.k_treatments))
    for row in trajectory_rows(traj):
        w.writerow([_num(x) for x in row])


def trajectory_csv(traj: Trajectory) -> str:
    buf = io.StringIO()
    write_trajectory_csv(traj, buf)
    return buf.getvalue()


def final_state(traj: Trajectory) -> dict[str, Any]:
    """Final counts and masses plus the outcome of the bookkeeping check."""
    st = traj.state
    try:
        ledger_check(st, traj.records, traj.a_history)
        ledger = {"passed": True, "first_bad_step": None, "max_abs_error": 0.0}
    except LedgerMismatch as exc:
        ledger = {"passed": False, "first_bad_step": exc.step, "max_abs_error": exc.max_abs_error}
    n = st.step
    return {
        "seed": traj.seed,
        "replication": traj.replication,
        "horizon": n,
        "n_assigned": list(st.n_assigned),
        "n_immigration": st.n_immigration_draws,
        "proportions": [c / n for c in st.n_assigned] if n else [0.0] * len(st.n_assigned),
        "z0": st.z0,
        "z": list(st.z),
        "s_observed": list(st.s_observed),
        "n_observed": list(st.n_observed),
        "ledger": ledger,
    }


def write_replications_csv(per_rep: dict[str, np.ndarray], out: TextIO) -> None:
    """Per-replication table: index, counts, immigration count and final estimates."""
    counts = per_rep["n_assigned"]
    k = counts.shape[1]
    w = csv.writer(out, lineterminator="\n")
    w.writerow(
        ["replication"] + [f"N{j}" for j in range(1, k + 1)] + ["N0"] + [f"theta_hat_{j}" for j in range(1, k + 1)]
    )
    for i, rep in enumerate(per_rep["replication"]):
        w.writerow(
            [str(int(rep))]
            + [str(int(c)) for c in counts[i]]
            + [str(int(per_rep["n_immigration"][i]))]
            + [_num(t) for t in per_rep["theta_hat"][i]]
        )


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def dumps(obj) -> str:
    """Stable JSON: sorted keys, non-finite floats mapped to null."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"
