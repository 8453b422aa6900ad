"""Command line: ``imurn {theory,simulate,verify,compare}``.

Settings come from an optional JSON config file (``--config``); flags given on
the command line override the file.  Exit codes: 0 ok, 1 bad configuration,
2 violated model assumptions, 3 engine failure, 4 failed verification gates.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import secrets
import sys
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import designs as _designs
from . import rng as _rng
from .errors import (
    AssumptionViolated,
    DegenerateEigenvalue,
    ImmigrationLoopExceeded,
    LedgerMismatch,
    NonPositiveFisher,
    ReplicationError,
    SingularSystem,
)
from .export import dumps, final_state, write_replications_csv, write_trajectory_csv
from .montecarlo import (
    Gate,
    McConfig,
    evaluate_gates,
    run_replications,
    scaling_consistency_check,
)
from .rules import DelayModel, DiscreteAddingRule
from .theory import STANDARD, UNIT_ROW_SUM
from .urn import run as run_single

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_ENGINE, EXIT_GATES = 0, 1, 2, 3, 4
MODES = ("theory", "simulate", "verify", "compare")


class ConfigError(ValueError):
    """Bad or incomplete configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DesignBlock:
    name: str = "mdl"
    p: list[float] | None = None
    c: float = 1.0
    alpha: float = 0.5
    beta: float = 1.0
    z0: list[float] | None = None
    a: list[float] | None = None
    d: list[list[float]] | None = None
    d_failure: list[list[float]] | None = None
    max_immigration_draws: int | None = None


@dataclass
class McBlock:
    reps: int = 1000
    horizon: int = 5000
    seed: int | None = None
    jobs: int | None = None
    n_grid: list[int] = field(default_factory=lambda: [1000, 4000, 16000])


@dataclass
class OutputBlock:
    json: str | None = None
    csv: str | None = None


@dataclass
class Tolerances:
    z_max: float = 4.0
    gap_max: float = 0.15
    slope_max: float = 0.62


@dataclass
class RunConfig:
    mode: str = "theory"
    design: DesignBlock = field(default_factory=DesignBlock)
    designs: list[DesignBlock] = field(default_factory=list)
    mc: McBlock = field(default_factory=McBlock)
    delay: str = "none"
    delayed_urn_update: bool = False
    output: OutputBlock = field(default_factory=OutputBlock)
    tolerances: Tolerances = field(default_factory=Tolerances)
    sigma_scale: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        if self.sigma_scale == 1.0:
            out.pop("sigma_scale")
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _load_block(cls, data, "config")

    @classmethod
    def from_json(cls, text: str, source: str = "config") -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        return cls.from_dict(data)


_NESTED = {"design": DesignBlock, "mc": McBlock, "output": OutputBlock, "tolerances": Tolerances}


def _load_block(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown field(s) {', '.join(unknown)}")
    kw = {}
    for key, val in data.items():
        where = f"{path}.{key}"
        if key in _NESTED:
            kw[key] = _load_block(_NESTED[key], val, where)
        elif key == "designs":
            if not isinstance(val, list):
                raise ConfigError(f"{where}: expected a list of design objects")
            kw[key] = [_load_block(DesignBlock, v, f"{where}[{i}]") for i, v in enumerate(val)]
        else:
            kw[key] = _check_scalar(key, val, where)
    return cls(**kw)


_INTS = {"reps", "horizon", "seed", "jobs", "max_immigration_draws"}
_FLOATS = {"c", "alpha", "beta", "z_max", "gap_max", "slope_max", "sigma_scale"}
_VECTORS = {"p", "z0", "a"}
_MATRICES = {"d", "d_failure"}


def _check_scalar(key: str, val, where: str):
    if val is None:
        return None
    try:
        if key in _INTS:
            if isinstance(val, bool) or not isinstance(val, int):
                raise TypeError
            return val
        if key in _FLOATS:
            if isinstance(val, bool):
                raise TypeError
            return float(val)
        if key in _VECTORS:
            return [float(x) for x in val]
        if key == "n_grid":
            return [int(x) for x in val]
        if key in _MATRICES:
            return [[float(x) for x in row] for row in val]
        if key == "delayed_urn_update":
            if not isinstance(val, bool):
                raise TypeError
            return val
        if key in ("mode", "name", "delay", "json", "csv"):
            if not isinstance(val, str):
                raise TypeError
            return val
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: invalid value {val!r}") from None
    return val


def parse_vector(text: str, what: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected a comma-separated list of numbers, got {text!r}") from None


def parse_matrix(text: str, what: str) -> list[list[float]]:
    """Rows separated by ``;``, entries by ``,``."""
    return [parse_vector(row, what) for row in text.split(";") if row.strip()]


def parse_delay(text: str, k: int) -> DelayModel | None:
    text = text.strip().lower()
    if text in ("", "none"):
        return None
    kind, _, arg = text.partition(":")
    try:
        if kind == "fixed":
            return DelayModel.fixed(int(arg), k)
        if kind == "geometric":
            return DelayModel.geometric(float(arg), k)
    except ValueError as exc:
        raise ConfigError(f"delay: {exc}") from None
    raise ConfigError(f"delay: expected none, fixed:L or geometric:Q, got {text!r}")


def parse_compare_item(text: str) -> DesignBlock:
    """``name:p1,p2[:c]`` as used by ``compare``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"compare design {text!r}: expected name:p1,p2[:c]")
    block = DesignBlock(name=parts[0], p=parse_vector(parts[1], f"compare design {text!r}"))
    if len(parts) == 3:
        try:
            block.c = float(parts[2])
        except ValueError:
            raise ConfigError(f"compare design {text!r}: bad c") from None
    return block


def build_design(block: DesignBlock, delay: DelayModel | None = None, delayed_urn_update: bool = False):
    name = block.name.lower()
    if name not in _designs.NAMES:
        raise ConfigError(f"design.name: unknown design {block.name!r}; choose from {', '.join(_designs.NAMES)}")
    engine = dict(estimator_alpha=block.alpha, estimator_beta=block.beta, delayed_urn_update=delayed_urn_update)
    if delay is not None:
        engine["delay"] = delay
    if block.max_immigration_draws is not None:
        engine["max_immigration_draws_per_step"] = block.max_immigration_draws
    try:
        if name == "const":
            if block.a is None:
                raise ConfigError("design.a: the const design needs a rate vector")
            k = len(block.a)
            d = block.d
            if block.d_failure is not None:
                p = block.p if block.p is not None else [0.5] * k
                d = DiscreteAddingRule.bernoulli(p, np.asarray(block.d, dtype=float), np.asarray(block.d_failure, dtype=float))
            return _designs.build_const(block.a, d, block.z0, block.p, **engine)
        if block.p is None:
            raise ConfigError(f"design.p: the {name} design needs success probabilities")
        return _designs.build(name, block.p, block.c, block.z0, **engine)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"design: {exc}") from None


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, help="worker processes (default: all CPUs)")
    p.add_argument("--out-json", help="write the JSON result here instead of stdout")
    p.add_argument("--out-csv", help="write the CSV result here")
    p.add_argument("--design", choices=_designs.NAMES)
    p.add_argument("--p", help="success probabilities, comma-separated")
    p.add_argument("--c", type=float, help="immigration scale for mdl/gdl")
    p.add_argument("--alpha", type=float, help="estimator pseudo-sum")
    p.add_argument("--beta", type=float, help="estimator pseudo-count")
    p.add_argument("--z0", help="initial masses, immigration type first")
    p.add_argument("--a", help="constant immigration rates (const design)")
    p.add_argument("--d", help="adding matrix for const, rows split by ';' (used on success when --d-failure is set)")
    p.add_argument("--d-failure", help="adding matrix after a failure (const design)")
    p.add_argument("--reps", type=int, help="replications")
    p.add_argument("--horizon", type=int, help="subjects per replication")
    p.add_argument("--n-grid", help="horizons for the scaling check, comma-separated")
    p.add_argument("--delay", help="none, fixed:L or geometric:Q")
    p.add_argument("--delayed-urn-update", action="store_true", default=None,
                   help="also hold back the urn update until the response arrives")
    p.add_argument("--sigma-scale", type=float, help=argparse.SUPPRESS)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="imurn", description="Immigrated urn designs: theory, simulation and checks.")
    sub = ap.add_subparsers(dest="mode", required=True)
    helps = {
        "theory": "limit proportions, covariance and lower bound as JSON",
        "simulate": "one trajectory as CSV plus the final state as JSON",
        "verify": "replicated runs checked against the theory",
        "compare": "table of several designs",
    }
    for mode in MODES:
        p = sub.add_parser(mode, help=helps[mode])
        _add_common(p)
        if mode == "compare":
            p.add_argument("items", nargs="*", metavar="NAME:P[:C]", help="designs to compare, e.g. bdu:0.3,0.4")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                cfg = RunConfig.from_json(fh.read(), source=args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
    else:
        cfg = RunConfig()
    cfg.mode = args.mode
    d = cfg.design
    if args.design is not None:
        d.name = args.design
    if args.p is not None:
        d.p = parse_vector(args.p, "--p")
    for attr in ("c", "alpha", "beta"):
        if getattr(args, attr) is not None:
            setattr(d, attr, getattr(args, attr))
    if args.z0 is not None:
        d.z0 = parse_vector(args.z0, "--z0")
    if args.a is not None:
        d.a = parse_vector(args.a, "--a")
    if args.d is not None:
        d.d = parse_matrix(args.d, "--d")
    if args.d_failure is not None:
        d.d_failure = parse_matrix(args.d_failure, "--d-failure")
    mc = cfg.mc
    for attr in ("reps", "horizon", "seed", "jobs"):
        if getattr(args, attr) is not None:
            setattr(mc, attr, getattr(args, attr))
    if args.n_grid is not None:
        mc.n_grid = [int(x) for x in parse_vector(args.n_grid, "--n-grid")]
    if args.delay is not None:
        cfg.delay = args.delay
    if args.delayed_urn_update:
        cfg.delayed_urn_update = True
    if args.out_json is not None:
        cfg.output.json = args.out_json
    if args.out_csv is not None:
        cfg.output.csv = args.out_csv
    if args.sigma_scale is not None:
        cfg.sigma_scale = args.sigma_scale
    if getattr(args, "items", None):
        cfg.designs = [parse_compare_item(x) for x in args.items]
    check_config(cfg)
    return cfg


def check_config(cfg: RunConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: expected one of {', '.join(MODES)}")
    if cfg.mc.reps < 1:
        raise ConfigError("mc.reps: must be at least 1")
    if cfg.mc.horizon < 0 or (cfg.mode == "verify" and cfg.mc.horizon < 1):
        raise ConfigError("mc.horizon: must be positive")
    if cfg.mc.jobs is not None and cfg.mc.jobs < 1:
        raise ConfigError("mc.jobs: must be at least 1")
    if cfg.mc.seed is not None:
        try:
            _rng.check_seed(cfg.mc.seed)
        except ValueError as exc:
            raise ConfigError(f"mc.seed: {exc}") from None
    if cfg.mode == "verify" and cfg.mc.seed is None:
        raise ConfigError("mc.seed: verify needs an explicit --seed")
    if cfg.mode == "compare" and len(cfg.designs) < 2:
        raise ConfigError("designs: compare needs at least two designs")
    if len(cfg.mc.n_grid) < 2 or min(cfg.mc.n_grid) < 1:
        raise ConfigError("mc.n_grid: needs at least two positive horizons")


# ---------------------------------------------------------------------------
# commands


def _emit_json(cfg: RunConfig, payload, stdout) -> None:
    text = dumps(payload)
    if cfg.output.json:
        with open(cfg.output.json, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        stdout.write(text)


def _reported_config(cfg: RunConfig) -> dict[str, Any]:
    # jobs and output paths do not affect results, so they are left out
    out = cfg.to_dict()
    out["mc"].pop("jobs", None)
    out.pop("output", None)
    return out


def _theory_payload(design) -> dict[str, Any]:
    summary = design.summary()
    payload = summary.to_dict()
    payload["design"] = design.name
    payload["regime"] = summary.regime
    payload["efficiency"] = summary.efficiency()
    payload["validation"] = design.validate().to_dict()
    return payload


def cmd_theory(cfg: RunConfig, stdout) -> int:
    design = build_design(cfg.design)
    _emit_json(cfg, _theory_payload(design), stdout)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, stdout) -> int:
    seed = cfg.mc.seed if cfg.mc.seed is not None else secrets.randbits(64)
    design = build_design(cfg.design, parse_delay(cfg.delay, _k_of(cfg.design)), cfg.delayed_urn_update)
    traj = run_single(design.spec, cfg.mc.horizon, seed)
    if cfg.output.csv:
        with open(cfg.output.csv, "w", encoding="utf-8", newline="") as fh:
            write_trajectory_csv(traj, fh)
    payload = final_state(traj)
    payload["design"] = design.name
    _emit_json(cfg, payload, stdout)
    return EXIT_OK if payload["ledger"]["passed"] else EXIT_ENGINE


def _k_of(block: DesignBlock) -> int:
    if block.name.lower() == "const":
        if block.a is None:
            raise ConfigError("design.a: the const design needs a rate vector")
        return len(block.a)
    if block.p is None:
        raise ConfigError(f"design.p: the {block.name} design needs success probabilities")
    return len(block.p)


def _scaled(summary, factor: float):
    if factor == 1.0 or summary.sigma_total is None:
        return summary
    return dataclasses.replace(summary, sigma_total=summary.sigma_total * factor)


def cmd_verify(cfg: RunConfig, stdout, stderr) -> int:
    delay = parse_delay(cfg.delay, _k_of(cfg.design))
    design = build_design(cfg.design, delay, cfg.delayed_urn_update)
    jobs = cfg.mc.jobs or os.cpu_count() or 1
    tol = cfg.tolerances
    if design.regime == UNIT_ROW_SUM:
        scaling = scaling_consistency_check(design, cfg.mc.n_grid, cfg.mc.reps, cfg.mc.seed, jobs, tol.slope_max)
        gates = [Gate("scaling_slope", scaling.slope, tol.slope_max, scaling.passed)]
        payload = {"regime": UNIT_ROW_SUM, "scaling": scaling.to_dict()}
    else:
        design.validate().raise_if_failed()
        theory = _scaled(design.summary(), cfg.sigma_scale)
        report = run_replications(
            McConfig(cfg.mc.reps, cfg.mc.horizon, cfg.mc.seed, design, cfg.output.csv is not None, theory=theory),
            jobs=jobs,
        )
        gates = evaluate_gates(report, tol.z_max, tol.gap_max)
        payload = {"regime": STANDARD, "report": report.to_dict()}
        if cfg.output.csv:
            with open(cfg.output.csv, "w", encoding="utf-8", newline="") as fh:
                write_replications_csv(report.per_replication, fh)
    passed = all(g.passed for g in gates)
    payload.update(
        design=design.name, config=_reported_config(cfg), gates=[g.to_dict() for g in gates], passed=passed
    )
    _emit_json(cfg, payload, stdout)
    for g in gates:
        status = "ok" if g.passed else "FAILED"
        stderr.write(f"gate {g.name}: {g.value:.4g} (limit {g.threshold:g}) {status}\n")
    return EXIT_OK if passed else EXIT_GATES


COMPARE_COLUMNS = ("design", "params", "treatment", "v", "sigma_diag", "lower_bound_diag", "efficiency")


def compare_rows(blocks: Sequence[DesignBlock]) -> list[list[Any]]:
    rows = []
    for block in blocks:
        design = build_design(block)
        s = design.summary()
        params = ";".join(f"{x:g}" for x in design.p)
        if design.name in ("mdl", "gdl"):
            params += f";c={design.c:g}"
        sig = np.diag(s.sigma_total) if s.sigma_total is not None else [None] * design.k
        lb = np.diag(s.lower_bound) if s.lower_bound is not None else [None] * design.k
        eff = s.efficiency() if s.lower_bound is not None else [None] * design.k
        for j in range(design.k):
            rows.append([design.name, params, j + 1, s.v[j], sig[j], lb[j], eff[j]])
        if design.name == "gdl":
            ref = _designs.gpu_reference_variance(design.p)
            for j in range(design.k):
                rows.append(["gpu_reference", params, j + 1, s.v[j], ref, lb[j], ref / lb[j] if lb[j] else None])
    return rows


def cmd_compare(cfg: RunConfig, stdout) -> int:
    rows = compare_rows(cfg.designs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for row in rows:
        w.writerow(["" if x is None else (repr(float(x)) if isinstance(x, (float, np.floating)) else x) for x in row])
    if cfg.output.csv:
        with open(cfg.output.csv, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        stdout.write(buf.getvalue())
    if cfg.output.json:
        with open(cfg.output.json, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(dumps([dict(zip(COMPARE_COLUMNS, r)) for r in rows]))
    return EXIT_OK


def main(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = config_from_args(args)
        if cfg.mode == "theory":
            return cmd_theory(cfg, stdout)
        if cfg.mode == "simulate":
            return cmd_simulate(cfg, stdout)
        if cfg.mode == "verify":
            return cmd_verify(cfg, stdout, stderr)
        return cmd_compare(cfg, stdout)
    except ConfigError as exc:
        stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except AssumptionViolated as exc:
        stderr.write(f"assumption violated: {exc}\n")
        if exc.report is not None:
            stderr.write(dumps(exc.report.to_dict()))
        return EXIT_ASSUMPTION
    except (DegenerateEigenvalue, SingularSystem, NonPositiveFisher) as exc:
        stderr.write(f"assumption violated: {exc}\n")
        return EXIT_ASSUMPTION
    except (ImmigrationLoopExceeded, ReplicationError, LedgerMismatch) as exc:
        stderr.write(f"engine error: {exc}\n")
        return EXIT_ENGINE


if __name__ == "__main__":
    sys.exit(main())
