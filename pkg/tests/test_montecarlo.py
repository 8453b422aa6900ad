import io
import json
from dataclasses import replace

import numpy as np
import pytest

from imurn import designs
from imurn.errors import InsufficientReplications, NotUnitRowSumRegime, ReplicationError
from imurn.export import write_replications_csv
from imurn.montecarlo import (
    McConfig,
    McReport,
    covariance_gap,
    evaluate_gates,
    relative_diag_gap,
    run_replications,
    scaling_consistency_check,
)
from imurn.rules import DiscreteAddingRule
from imurn.theory import TheoreticalSummary


def _report(emp, sigma, reps=500):
    k = len(emp)
    theory = TheoreticalSummary(a=np.ones(k), v=np.full(k, 1 / k), sigma_total=np.diag(sigma))
    return McReport(reps, 100, 0, "standard", np.full(k, 1 / k), np.ones(k), np.diag(emp), 0.1, 0.01, 0.1,
                    theory, np.zeros(k), None, [])


def test_gap_arithmetic():
    assert covariance_gap(_report([1.0, 2.0], [1.0, 2.0])) == 0.0
    assert covariance_gap(_report([1.1, 2.0], [1.0, 2.0])) == pytest.approx(0.1)
    # zero target variance falls back to the absolute difference
    assert relative_diag_gap(np.diag([0.03, 1.0]), np.diag([0.0, 1.0])) == pytest.approx(0.03)


def test_gap_needs_replications():
    with pytest.raises(InsufficientReplications):
        covariance_gap(_report([1.0], [1.0], reps=199))


def test_report_fields_and_json():
    rep = run_replications(McConfig(60, 400, 5, designs.build_mdl([0.6, 0.4]), record_trajectories=True))
    d = json.loads(rep.to_json())
    for key in ("mean_proportions", "emp_cov", "imm_rate", "theory", "z_scores", "cov_rel_err", "normality"):
        assert key in d
    assert np.allclose(rep.emp_cov, rep.emp_cov.T)
    assert np.linalg.eigvalsh(rep.emp_cov).min() > -1e-9
    assert rep.mean_proportions.sum() == pytest.approx(1.0)
    buf = io.StringIO()
    write_replications_csv(rep.per_replication, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "replication,N1,N2,N0,theta_hat_1,theta_hat_2"
    assert len(lines) == 61


def test_results_do_not_depend_on_jobs():
    cfg = McConfig(40, 300, 123, designs.build_gdl([0.6, 0.3]))
    one = run_replications(cfg, jobs=1)
    three = run_replications(cfg, jobs=3)
    assert one.to_json() == three.to_json()


def test_replication_errors_carry_index():
    # every draw removes four balls, so masses sink and the capped loop trips
    rule = DiscreteAddingRule.bernoulli([0.5, 0.5], -3 * np.eye(2), -3 * np.eye(2))
    bad = replace(designs.build_dl([0.5, 0.5]).spec, adding_rule=rule, max_immigration_draws_per_step=1)
    with pytest.raises(ReplicationError) as info:
        run_replications(McConfig(5, 50, 1, bad), jobs=1)
    assert info.value.replication in range(5)


def test_scaling_guard():
    with pytest.raises(NotUnitRowSumRegime):
        scaling_consistency_check(designs.build_dl([0.5, 0.5]), (100, 400), 10)


def test_scaling_small():
    d = designs.build_const([1.0, 1.0], [[0.2, 0.8], [0.6, 0.4]])
    rep = scaling_consistency_check(d, (250, 1000, 4000), 100, seed=4)
    assert rep.passed
    assert rep.slope <= 0.62
    np.testing.assert_allclose(rep.mean_proportions[-1], [3 / 7, 4 / 7], atol=0.01)


def test_degenerate_design_gates():
    rep = run_replications(McConfig(200, 1000, 3, designs.build_const([2.0, 1.0])))
    gates = {g.name: g for g in evaluate_gates(rep)}
    assert "max_abs_z" not in gates
    assert gates["sqrt_n_mean_error"].passed and gates["covariance_gap"].passed
    np.testing.assert_allclose(rep.mean_proportions, [2 / 3, 1 / 3], atol=2e-3)


def test_mdl_mean_within_three_se():
    rep = run_replications(McConfig(300, 2000, 31, designs.build_mdl([0.7, 0.5])))
    assert abs(rep.mean_proportions[0] - 0.7) <= 3 * np.sqrt(1.062 / 2000 / 300)


@pytest.mark.parametrize("seed", [101, 202, 303])
def test_mdl_covariance_gap_large_runs(seed):
    rep = run_replications(McConfig(2000, 10_000, seed, designs.build_mdl([0.5, 0.5])))
    assert rep.theory.sigma_total[0, 0] == pytest.approx(1.25)
    assert covariance_gap(rep) <= 0.15
