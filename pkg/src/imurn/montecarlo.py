"""Replicated trials and their comparison with the theoretical summary."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .batch import BatchResult, run_batch
from .designs import NamedDesign
from .errors import (
    ImmigrationLoopExceeded,
    InsufficientReplications,
    NotUnitRowSumRegime,
    ReplicationError,
)
from .rules import DelayModel
from .theory import STANDARD, UNIT_ROW_SUM, TheoreticalSummary, eigenvector_limit, regime_of
from .urn import DesignSpec

MIN_REPLICATIONS_FOR_GAP = 200
_DEGENERATE_VARIANCE = 1e-12


@dataclass
class McConfig:
    replications: int = 1000
    horizon: int = 5000
    master_seed: int = 0
    design: NamedDesign | DesignSpec | None = None
    record_trajectories: bool = False
    delay: DelayModel | None = None
    theory: TheoreticalSummary | None = None

    def __post_init__(self):
        if self.replications < 1 or self.horizon < 1:
            raise ValueError("replications and horizon must both be at least 1")


@dataclass
class McReport:
    replications: int
    horizon: int
    master_seed: int
    regime: str
    mean_proportions: np.ndarray
    se_proportions: np.ndarray
    emp_cov: np.ndarray
    imm_rate: float
    imm_rate_se: float
    imm_rate_target: float | None
    theory: TheoreticalSummary | None
    z_scores: np.ndarray
    cov_rel_err: float | None
    normality: list[dict[str, float]]
    per_replication: dict[str, np.ndarray] | None = field(default=None, repr=False)
    degenerate: np.ndarray | None = None

    @property
    def sqrt_n_error(self) -> np.ndarray:
        """``sqrt(n) |mean - v|`` per treatment; the scale that matters when the limit variance is zero."""
        v = self.theory.v if self.theory is not None else self.mean_proportions
        return np.sqrt(self.horizon) * np.abs(self.mean_proportions - v)

    @property
    def imm_rate_z(self) -> float | None:
        if self.imm_rate_target is None or self.imm_rate_se == 0:
            return None
        return (self.imm_rate - self.imm_rate_target) / self.imm_rate_se

    def to_dict(self) -> dict[str, Any]:
        return {
            "replications": self.replications,
            "horizon": self.horizon,
            "master_seed": self.master_seed,
            "regime": self.regime,
            "mean_proportions": self.mean_proportions.tolist(),
            "se_proportions": self.se_proportions.tolist(),
            "emp_cov": self.emp_cov.tolist(),
            "imm_rate": self.imm_rate,
            "imm_rate_se": self.imm_rate_se,
            "imm_rate_target": self.imm_rate_target,
            "imm_rate_z": self.imm_rate_z,
            "theory": None if self.theory is None else self.theory.to_dict(),
            "z_scores": self.z_scores.tolist(),
            "cov_rel_err": self.cov_rel_err,
            "normality": self.normality,
            "degenerate": None if self.degenerate is None else self.degenerate.tolist(),
            "sqrt_n_error": self.sqrt_n_error.tolist(),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def relative_diag_gap(emp_cov, sigma) -> float:
    """Largest relative error on the diagonal; absolute where the target variance is zero."""
    e = np.diag(np.asarray(emp_cov, dtype=float))
    s = np.diag(np.asarray(sigma, dtype=float))
    gaps = np.where(s > _DEGENERATE_VARIANCE, np.abs(e - s) / np.where(s > _DEGENERATE_VARIANCE, s, 1.0), np.abs(e - s))
    return float(gaps.max())


def _split(n: int, parts: int) -> list[range]:
    parts = max(1, min(parts, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(parts)]


def _run_chunk(args):
    spec, n, seed, reps, checkpoints = args
    try:
        return run_batch(spec, n, seed, reps, checkpoints)
    except ImmigrationLoopExceeded as exc:
        raise ReplicationError(exc.replication if exc.replication is not None else reps[0], exc) from exc


def simulate_replications(
    spec: DesignSpec,
    horizon: int,
    seed: int,
    replications: int,
    jobs: int = 1,
    checkpoints: Sequence[int] = (),
) -> BatchResult:
    """Run replications ``0 .. replications-1``, possibly across processes.

    Each replication only depends on ``(seed, index)``, so the merged result is
    the same for any ``jobs``.
    """
    chunks = [(spec, horizon, seed, list(r), tuple(checkpoints)) for r in _split(replications, jobs)]
    if len(chunks) == 1:
        parts = [_run_chunk(chunks[0])]
    else:
        with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
            parts = list(pool.map(_run_chunk, chunks))
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    cps = {m: np.concatenate([p.checkpoints[m] for p in parts]) for m in parts[0].checkpoints}
    cps_imm = {m: np.concatenate([p.checkpoint_immigration[m] for p in parts]) for m in parts[0].checkpoint_immigration}
    return BatchResult(
        cat("replications"), cat("n_assigned"), cat("n_immigration"), cat("z"),
        cat("s_observed"), cat("n_observed"), cat("theta_hat"), cps, cps_imm,
    )


def _resolve(cfg: McConfig) -> tuple[DesignSpec, TheoreticalSummary | None, str]:
    design = cfg.design
    if design is None:
        raise ValueError("McConfig.design is required")
    theory = cfg.theory
    if isinstance(design, NamedDesign):
        spec = design.spec
        regime = design.regime
        if theory is None:
            report = design.validate()
            report.raise_if_failed()
            theory = design.summary()
    else:
        spec = design
        regime = theory.regime if theory is not None else STANDARD
    if cfg.delay is not None:
        spec = replace(spec, delay=cfg.delay)
    return spec, theory, regime


def run_replications(cfg: McConfig, jobs: int = 1) -> McReport:
    spec, theory, regime = _resolve(cfg)
    n, r = cfg.horizon, cfg.replications
    res = simulate_replications(spec, n, cfg.master_seed, r, jobs)
    return build_report(res, n, cfg.master_seed, theory, regime, cfg.record_trajectories)


def build_report(
    res: BatchResult,
    n: int,
    seed: int,
    theory: TheoreticalSummary | None,
    regime: str,
    keep: bool = False,
) -> McReport:
    r = res.n_assigned.shape[0]
    props = res.n_assigned / n
    mean = props.mean(axis=0)
    v = theory.v if theory is not None else mean
    dev = np.sqrt(n) * (props - v)
    emp_cov = np.atleast_2d(np.cov(dev, rowvar=False, ddof=1)) if r > 1 else np.zeros((props.shape[1],) * 2)
    emp_sd = np.sqrt(np.diag(emp_cov) / n)

    sigma = theory.sigma_total if theory is not None else None
    if sigma is not None:
        degenerate = np.diag(sigma) <= _DEGENERATE_VARIANCE
        theory_sd = np.sqrt(np.clip(np.diag(sigma), 0.0, None) / n)
        sd = np.where(degenerate, emp_sd, theory_sd)
    else:
        degenerate = np.zeros(props.shape[1], dtype=bool)
        sd = emp_sd
    se = sd / np.sqrt(r)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (mean - v) / np.where(se > 0, se, 1.0), 0.0)

    imm = res.n_immigration / n
    imm_rate = float(imm.mean())
    imm_se = float(imm.std(ddof=1) / np.sqrt(r)) if r > 1 else 0.0
    target = None
    if theory is not None and theory.s is not None:
        target = 1.0 / theory.s

    normality = []
    for k in range(props.shape[1]):
        scale = np.sqrt(sigma[k, k]) if sigma is not None and sigma[k, k] > _DEGENERATE_VARIANCE else np.sqrt(n) * emp_sd[k]
        if r > 1 and scale > 0:
            ks = stats.kstest(dev[:, k] / scale, "norm")
            normality.append({"treatment": k + 1, "ks_statistic": float(ks.statistic), "p_value": float(ks.pvalue)})
        else:
            normality.append({"treatment": k + 1, "ks_statistic": float("nan"), "p_value": float("nan")})

    gap = relative_diag_gap(emp_cov, sigma) if sigma is not None else None
    per_rep = None
    if keep:
        per_rep = {
            "replication": res.replications,
            "n_assigned": res.n_assigned,
            "n_immigration": res.n_immigration,
            "theta_hat": res.theta_hat,
        }
    return McReport(
        r, n, seed, regime, mean, se, emp_cov, imm_rate, imm_se, target, theory, z, gap, normality, per_rep,
        degenerate,
    )


def covariance_gap(report: McReport) -> float:
    """Largest relative error between the empirical and theoretical variances."""
    if report.replications < MIN_REPLICATIONS_FOR_GAP:
        raise InsufficientReplications(
            f"covariance comparison needs at least {MIN_REPLICATIONS_FOR_GAP} replications, got {report.replications}"
        )
    if report.theory is None or report.theory.sigma_total is None:
        raise ValueError("report carries no theoretical covariance")
    return relative_diag_gap(report.emp_cov, report.theory.sigma_total)


@dataclass
class ScalingReport:
    n_grid: list[int]
    rms: list[float]
    slope: float
    mean_proportions: list[list[float]]
    se_proportions: list[list[float]]
    v: np.ndarray
    threshold: float = 0.62

    @property
    def passed(self) -> bool:
        return bool(self.slope <= self.threshold)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_grid": self.n_grid, "rms": self.rms, "slope": self.slope, "threshold": self.threshold,
            "passed": self.passed, "v": self.v.tolist(),
            "mean_proportions": self.mean_proportions, "se_proportions": self.se_proportions,
        }


def scaling_consistency_check(
    design: NamedDesign,
    n_grid: Sequence[int] = (1000, 4000, 16000),
    replications: int = 500,
    seed: int = 0,
    jobs: int = 1,
    threshold: float = 0.62,
) -> ScalingReport:
    """Fit the growth rate of ``RMS |N_n - n v|`` for designs whose H rows sum to one."""
    if regime_of(design.moments.h) != UNIT_ROW_SUM:
        raise NotUnitRowSumRegime("scaling check needs a mean adding matrix with unit row sums")
    v = eigenvector_limit(design.moments.h)
    grid = sorted(int(x) for x in n_grid)
    res = simulate_replications(design.spec, grid[-1], seed, replications, jobs, checkpoints=grid)
    rms, means, ses = [], [], []
    for n in grid:
        counts = res.checkpoints[n]
        err = counts - n * v
        rms.append(float(np.sqrt(np.mean(np.sum(err**2, axis=1)))))
        props = counts / n
        means.append(props.mean(axis=0).tolist())
        ses.append((props.std(axis=0, ddof=1) / np.sqrt(replications)).tolist())
    slope = float(np.polyfit(np.log(grid), np.log(rms), 1)[0])
    return ScalingReport(grid, rms, slope, means, ses, v, threshold)


@dataclass
class Gate:
    name: str
    value: float
    threshold: float
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "value": self.value, "threshold": self.threshold, "passed": self.passed}


def evaluate_gates(report: McReport, z_max: float = 4.0, gap_max: float = 0.15) -> list[Gate]:
    """Mean and covariance gates for a report in the standard regime.

    Treatments whose limit variance is zero have no meaningful z-score; for
    them ``sqrt(n) |mean - v|`` is held to ``gap_max`` instead.
    """
    deg = report.degenerate if report.degenerate is not None else np.zeros(report.z_scores.shape, dtype=bool)
    gates = []
    if (~deg).any():
        zmax = float(np.max(np.abs(report.z_scores[~deg])))
        gates.append(Gate("max_abs_z", zmax, z_max, zmax <= z_max))
    if deg.any():
        err = float(np.max(report.sqrt_n_error[deg]))
        gates.append(Gate("sqrt_n_mean_error", err, gap_max, err <= gap_max))
    if report.regime == STANDARD and report.theory is not None and report.theory.sigma_total is not None:
        gap = covariance_gap(report) if report.replications >= MIN_REPLICATIONS_FOR_GAP else report.cov_rel_err
        gates.append(Gate("covariance_gap", float(gap), gap_max, gap <= gap_max))
    return gates


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
