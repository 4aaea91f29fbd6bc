"""Tests for the convergence study, the rate fit and the report files."""

import json
import math

import numpy as np
import pandas as pd
import pytest

from bounds import ValidationRecord, compute_ledger
from config import FIXED, SCALE_WITH_BETA, RunManifest
from ensemble import GAUSSIAN, InitialLaw, SimConfig
from errors import DivergenceError, ParameterError
from experiments import (
    BetaResult, GridCheck, StudyConfig, check_grid_insensitivity, emit_report, fit_rate,
    n_steps_for, run_convergence_study, slope_in_band, study_frame
)
from kernels import DriftKernel, linear_kernel, zero_kernel


def make_base(kernel=None, n_steps=100, n_particles=300, init=None, seed=21):
    return SimConfig(beta=1.0, kernel=kernel or zero_kernel(), T=1.0, n_steps=n_steps,
                     n_particles=n_particles, init=init or InitialLaw(), seed=seed)


def synthetic(betas, c=0.5, p=1.0, rel_se=0.02):
    return [BetaResult(b, 100, c * b ** -p, rel_se * c * b ** -p, 1.96 * rel_se * c * b ** -p, 1.0, 1.0)
            for b in betas]


def test_study_config_validation():
    base = make_base()
    with pytest.raises(ParameterError):
        StudyConfig((10.0, 100.0), base).validate()
    with pytest.raises(ParameterError):
        StudyConfig((10.0, 100.0, 50.0), base).validate()
    with pytest.raises(ParameterError):
        StudyConfig((-1.0, 10.0, 100.0), base).validate()
    with pytest.raises(ParameterError):
        StudyConfig((1.0, 10.0, 100.0), base, n_steps_policy="adaptive").validate()
    StudyConfig((1.0, 10.0, 100.0), base).validate()


def test_n_steps_policies():
    base = make_base(n_steps=100)
    fixed = StudyConfig((16.0, 64.0, 256.0), base, FIXED)
    scaled = StudyConfig((16.0, 64.0, 256.0), base, SCALE_WITH_BETA)
    assert [n_steps_for(fixed, b) for b in fixed.beta_grid] == [100, 100, 100]
    assert [n_steps_for(scaled, b) for b in scaled.beta_grid] == [100, 200, 400]


def test_fit_recovers_a_synthetic_rate():
    fit = fit_rate(synthetic([10.0, 100.0, 1000.0, 10_000.0], c=0.5, p=1.0))
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(0.5), abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.weighted_slope == pytest.approx(-1.0, abs=1e-10)
    assert fit.slope_passes


def test_fit_of_a_flat_error_fails_the_band():
    fit = fit_rate(synthetic([10.0, 100.0, 1000.0], p=0.0))
    assert fit.slope == pytest.approx(0.0, abs=1e-12)
    assert not fit.slope_passes


def test_fit_skips_zero_errors():
    rows = synthetic([10.0, 100.0, 1000.0])
    rows.append(BetaResult(1e4, 100, 0.0, 0.0, 0.0, 1.0, 1.0))
    fit = fit_rate(rows)
    assert fit.slope == pytest.approx(-1.0, abs=1e-12)
    assert len(fit.per_beta) == 4

    empty = fit_rate([BetaResult(b, 100, 0.0, 0.0, 0.0, 1.0, 1.0) for b in (1.0, 2.0, 3.0)])
    assert math.isnan(empty.slope)


def test_slope_band():
    assert slope_in_band(-0.97)
    assert slope_in_band(-1.2) and slope_in_band(-0.75)
    assert not slope_in_band(-0.5)
    assert not slope_in_band(-1.5)


def test_bound_dominance():
    fit = fit_rate(synthetic([10.0, 100.0, 1000.0]))
    assert fit.bound_dominance
    rows = synthetic([10.0, 100.0, 1000.0])
    rows[0] = rows[0]._replace(theorem_bound_as_printed=1e-6)
    assert not fit_rate(rows).bound_dominance


def test_zero_kernel_study():
    study = StudyConfig((10.0, 100.0, 1000.0), make_base(n_steps=200, n_particles=500))
    seen = []
    fit = run_convergence_study(study, on_run=seen.append)
    assert [run.config.beta for run in seen] == [10.0, 100.0, 1000.0]
    assert fit.bound_dominance
    assert fit.slope < -0.5
    ledger = compute_ledger(1.0, 0.0, 1.0)
    for r in fit.per_beta:
        assert r.theorem_bound_as_printed == pytest.approx(7.5 / r.beta)
        assert r.theorem_bound_sharp == pytest.approx(7.5 / r.beta)
        assert r.error_mean <= ledger.theorem_bound(r.beta)


def test_divergence_reports_the_beta():
    nan_kernel = DriftKernel(eval=lambda z: np.where(z == z, np.nan, 0.0), kappa=1.0, name="nan")
    study = StudyConfig((2.0, 4.0, 8.0), make_base(kernel=nan_kernel, n_steps=20, n_particles=3))
    with pytest.raises(DivergenceError) as info:
        run_convergence_study(study)
    assert info.value.beta == 2.0
    assert "beta=2" in str(info.value)


def test_grid_check_structure():
    study = StudyConfig((10.0, 20.0, 40.0), make_base(n_steps=50, n_particles=400))
    check = check_grid_insensitivity(study)
    assert isinstance(check, GridCheck)
    assert check.beta == 40.0
    assert check.n_steps == 50
    assert check.error_coarse > 0 and check.error_fine > 0
    assert check.halfwidth > 0
    assert check.passes == (abs(check.error_fine - check.error_coarse) < check.halfwidth)


def test_grid_check_passes_when_the_sup_is_resolved():
    """At small beta and large v0 the gap x - y ~ v0 t - B_t peaks at T on both grids."""
    init = InitialLaw(mean_v=30.0, M=900.0)
    study = StudyConfig((0.01, 0.02, 0.05), make_base(n_steps=100, n_particles=200, init=init))
    check = check_grid_insensitivity(study)
    assert check.passes
    assert abs(check.error_fine - check.error_coarse) < 1e-3 * check.error_fine


def test_grid_check_reports_an_unresolved_sup():
    """beta * h = 10: the coarse grid misses most velocity excursions of x - y."""
    study = StudyConfig((10.0, 100.0, 1000.0), make_base(n_steps=100, n_particles=500))
    check = check_grid_insensitivity(study)
    assert check.error_fine > check.error_coarse
    assert not check.passes


def test_emit_report_files(tmp_path):
    fit = fit_rate(synthetic([10.0, 100.0, 1000.0]))
    ledger = compute_ledger(1.0, 1.0, 1.0)
    records = [ValidationRecord("x_first_moment", 0.5, 1.0, 0.5, True, "E|x| <= c")]
    manifest = RunManifest(subcommand="converge", config={"sim": {}}, seed=1)
    written = emit_report(fit, ledger, records, tmp_path / "out", manifest=manifest)
    assert [p.name for p in written] == ["study.csv", "summary.json", "manifest.json"]

    frame = pd.read_csv(tmp_path / "out" / "study.csv")
    assert list(frame.columns) == ["beta", "error_mean", "ci_halfwidth", "bound_printed", "bound_sharp"]
    pd.testing.assert_frame_equal(frame, study_frame(fit), check_exact=True, check_dtype=False)

    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["rate"]["slope"] == pytest.approx(-1.0)
    assert summary["rate"]["passes"] is True
    assert summary["ledger"]["kappa"] == 1.0
    assert summary["validations"][0]["name"] == "x_first_moment"

    recorded = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert recorded["subcommand"] == "converge"
    assert recorded["finished"] is not None
    assert len(recorded["outputs"]) == 3


def test_summary_is_strict_json(tmp_path):
    rows = [BetaResult(b, 100, 0.0, 0.0, 0.0, math.inf, math.inf) for b in (1.0, 2.0, 3.0)]
    fit = fit_rate(rows)
    assert math.isnan(fit.slope)
    ledger = compute_ledger(1.0, 5.0, 3.0)
    emit_report(fit, ledger, [], tmp_path)

    def reject(token):
        raise ValueError(f"non-standard JSON constant {token}")

    summary = json.loads((tmp_path / "summary.json").read_text(), parse_constant=reject)
    assert summary["rate"]["slope"] is None
    assert summary["rate"]["passes"] is False
    assert summary["ledger"]["overflow"] is True
    assert summary["ledger"]["Lambda"] == "inf"


def test_reports_are_reproducible(tmp_path):
    study = StudyConfig((10.0, 100.0, 1000.0), make_base(n_steps=50, n_particles=100))
    ledger = compute_ledger(1.0, 0.0, 1.0)
    for name in ("a", "b"):
        emit_report(run_convergence_study(study, ledger), ledger, [], tmp_path / name)
    for fname in ("study.csv", "summary.json"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


@pytest.mark.slow
def test_linear_kernel_rate_lies_in_band():
    init = InitialLaw()
    base = make_base(kernel=linear_kernel(1.0), n_steps=512, n_particles=2000, init=init, seed=1)
    fit = run_convergence_study(StudyConfig((16.0, 64.0, 256.0, 1024.0), base))
    assert fit.slope_passes
    assert fit.bound_dominance


@pytest.mark.slow
def test_rate_is_stable_under_refinement():
    init = InitialLaw(GAUSSIAN, var_x=0.25, var_v=0.25)
    base = make_base(kernel=linear_kernel(1.0), n_steps=256, n_particles=2000, init=init, seed=3)
    study = StudyConfig((16.0, 64.0, 256.0), base, SCALE_WITH_BETA)
    assert check_grid_insensitivity(study).error_fine > 0
    assert slope_in_band(run_convergence_study(study).slope)


@pytest.mark.slow
def test_zero_kernel_rate_lies_in_band():
    base = make_base(n_steps=512, n_particles=2000, seed=4)
    fit = run_convergence_study(StudyConfig((16.0, 64.0, 256.0, 1024.0), base))
    assert fit.slope_passes, fit.slope
    assert fit.bound_dominance
