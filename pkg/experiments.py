"""
Convergence-rate study of E[sup_t |x^beta_t - y_t|^2] over a grid of beta.

One coupled run per beta, a least-squares fit of log error against log beta,
comparison of every error with the proof's bound, and the result files:

    study.csv      beta, error_mean, ci_halfwidth, bound_printed, bound_sharp
    summary.json   rate section, ledger, grid check and validation records
    manifest.json  config echo, seed, versions and timestamps
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats

from bounds import BoundLedger, ValidationRecord, compute_ledger
from config import FIXED, N_STEPS_POLICIES, SCALE_WITH_BETA, LabConfig, RunManifest, write_manifest
from coupling import CoupledRun, coupled_simulate, estimate_error
from ensemble import CSV_FLOAT_FORMAT, SimConfig
from errors import DivergenceError, ParameterError

logger = logging.getLogger(__name__)

SLOPE_BAND = (-1.2, -0.75)
MIN_GRID_POINTS = 3


@dataclass(frozen=True)
class StudyConfig:
    """
    Attributes:
        beta_grid: Strictly increasing positive betas, at least three
        base: Simulation settings; its beta is replaced per run
        n_steps_policy: 'fixed' or 'scale-with-beta'
        output_dir: Directory receiving the result files
    """
    beta_grid: Tuple[float, ...]
    base: SimConfig
    n_steps_policy: str = FIXED
    output_dir: str = "results"

    def validate(self):
        grid = np.asarray(self.beta_grid, dtype=float)
        if grid.size < MIN_GRID_POINTS:
            raise ParameterError(f"beta_grid needs at least {MIN_GRID_POINTS} points for a rate fit, got {grid.size}")
        if not np.all(grid > 0):
            raise ParameterError("beta_grid entries must be positive")
        if not np.all(np.diff(grid) > 0):
            raise ParameterError("beta_grid must be strictly increasing")
        if self.n_steps_policy not in N_STEPS_POLICIES:
            raise ParameterError(f"n_steps_policy must be one of {N_STEPS_POLICIES}, got '{self.n_steps_policy}'")


class BetaResult(NamedTuple):
    beta: float
    n_steps: int
    error_mean: float
    std_error: float
    ci_halfwidth: float
    theorem_bound_as_printed: float
    theorem_bound_sharp: float


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    weighted_slope: float
    per_beta: List[BetaResult] = field(default_factory=list)

    @property
    def bound_dominance(self) -> bool:
        return all(r.error_mean <= r.theorem_bound_as_printed for r in self.per_beta)

    @property
    def slope_passes(self) -> bool:
        return slope_in_band(self.slope)


class GridCheck(NamedTuple):
    beta: float
    n_steps: int
    error_coarse: float
    error_fine: float
    halfwidth: float
    passes: bool


def slope_in_band(slope: float, band: Tuple[float, float] = SLOPE_BAND) -> bool:
    return bool(band[0] <= slope <= band[1])


def n_steps_for(study: StudyConfig, beta: float) -> int:
    """Grid size for one beta: fixed, or grown like sqrt(beta / beta_min)."""
    if study.n_steps_policy == SCALE_WITH_BETA:
        return int(math.ceil(study.base.n_steps * math.sqrt(beta / min(study.beta_grid))))
    return study.base.n_steps


def study_from_config(cfg: LabConfig, workers: int = 1) -> StudyConfig:
    return StudyConfig(
        beta_grid=tuple(cfg.sim.betas),
        base=cfg.sim_config(workers=workers),
        n_steps_policy=cfg.sim.n_steps_policy,
        output_dir=cfg.output_dir,
    )


def _run_beta(config: SimConfig, substeps: int = 1) -> CoupledRun:
    try:
        return coupled_simulate(config, substeps)
    except DivergenceError as exc:
        raise DivergenceError(exc.system, exc.particle, exc.step, beta=config.beta) from exc


def fit_rate(per_beta: Sequence[BetaResult]) -> RateFit:
    """
    Unweighted least squares of log error_mean on log beta, plus a CI-weighted slope.

    Only positive error means enter the fit; fewer than two leave it NaN.
    """
    per_beta = sorted(per_beta, key=lambda r: r.beta)
    used = [r for r in per_beta if r.error_mean > 0]
    if len(used) < 2:
        logger.warning("rate fit needs two positive error means, got %d", len(used))
        return RateFit(math.nan, math.nan, math.nan, math.nan, list(per_beta))

    log_beta = np.log([r.beta for r in used])
    log_err = np.log([r.error_mean for r in used])
    reg = stats.linregress(log_beta, log_err)

    # sd(log error) ~ se / mean
    sd_log = np.array([r.std_error / r.error_mean for r in used])
    if np.all(sd_log > 0):
        weighted_slope = float(np.polyfit(log_beta, log_err, 1, w=1.0 / sd_log)[0])
    else:
        weighted_slope = math.nan

    return RateFit(
        slope=float(reg.slope),
        intercept=float(reg.intercept),
        r_squared=float(reg.rvalue ** 2),
        weighted_slope=weighted_slope,
        per_beta=list(per_beta),
    )


def run_convergence_study(
    study: StudyConfig,
    ledger: Optional[BoundLedger] = None,
    on_run: Optional[Callable[[CoupledRun], None]] = None
) -> RateFit:
    """
    One coupled run per beta and the log-log rate fit.

    Args:
        study: Study settings
        ledger: Proof constants; computed from (M, kappa, T) of the base config if omitted
        on_run: Called with every finished CoupledRun

    Raises:
        ParameterError: invalid study config
        DivergenceError: a run blew up; carries the offending beta
    """
    study.validate()
    base = study.base
    if ledger is None:
        ledger = compute_ledger(base.init.M, base.kernel.kappa, base.T)

    results = []
    for beta in study.beta_grid:
        n_steps = n_steps_for(study, beta)
        run = _run_beta(base.with_beta(beta, n_steps))
        est = estimate_error(run.sup_sq_errors)
        logger.info(
            "beta=%g: error %.4e +/- %.1e (n_steps=%d)",
            beta, est.mean, est.confidence_halfwidth_95, n_steps
        )
        results.append(BetaResult(
            beta=float(beta),
            n_steps=n_steps,
            error_mean=est.mean,
            std_error=est.std_error,
            ci_halfwidth=est.confidence_halfwidth_95,
            theorem_bound_as_printed=ledger.theorem_bound(beta),
            theorem_bound_sharp=ledger.theorem_bound_sharp(beta),
        ))
        if on_run is not None:
            on_run(run)

    fit = fit_rate(results)
    logger.info("fitted slope %.3f (weighted %.3f), r^2 = %.3f", fit.slope, fit.weighted_slope, fit.r_squared)
    return fit


def check_grid_insensitivity(study: StudyConfig) -> GridCheck:
    """
    Rerun the largest beta on a doubled grid and compare error means.

    Both runs read one Brownian path: the coarse run merges pairs of the
    fine run's step noise. The difference is then the discretization and
    sup-sampling effect alone. Passes iff it is below one 95% halfwidth.
    When beta * h is not small the coarse grid under-samples the fast
    velocity fluctuation of x - y and the check fails.
    """
    study.validate()
    beta = max(study.beta_grid)
    n_steps = n_steps_for(study, beta)
    coarse = estimate_error(_run_beta(study.base.with_beta(beta, n_steps), substeps=2).sup_sq_errors)
    fine = estimate_error(_run_beta(study.base.with_beta(beta, 2 * n_steps)).sup_sq_errors)
    halfwidth = max(coarse.confidence_halfwidth_95, fine.confidence_halfwidth_95)
    diff = abs(fine.mean - coarse.mean)
    passes = bool(diff < halfwidth)
    if not passes:
        logger.warning(
            "grid check failed at beta=%g: n_steps %d gives %.4e, %d gives %.4e (halfwidth %.1e, beta*h = %.3g)",
            beta, n_steps, coarse.mean, 2 * n_steps, fine.mean, halfwidth, beta * study.base.T / n_steps
        )
    return GridCheck(beta, n_steps, coarse.mean, fine.mean, halfwidth, passes)


def study_frame(fit: RateFit) -> pd.DataFrame:
    return pd.DataFrame({
        "beta": [r.beta for r in fit.per_beta],
        "error_mean": [r.error_mean for r in fit.per_beta],
        "ci_halfwidth": [r.ci_halfwidth for r in fit.per_beta],
        "bound_printed": [r.theorem_bound_as_printed for r in fit.per_beta],
        "bound_sharp": [r.theorem_bound_sharp for r in fit.per_beta],
    })


def summary_dict(
    fit: RateFit,
    ledger: Optional[BoundLedger],
    validations: Sequence[ValidationRecord],
    grid_check: Optional[GridCheck] = None
) -> dict:
    summary = {
        "rate": {
            "slope": fit.slope,
            "intercept": fit.intercept,
            "r_squared": fit.r_squared,
            "weighted_slope": fit.weighted_slope,
            "slope_band": list(SLOPE_BAND),
            "passes": fit.slope_passes,
            "bound_dominance": fit.bound_dominance,
        },
        "validations": [
            {"name": r.name, "lhs": r.lhs, "rhs": r.rhs, "margin": r.margin,
             "passes": bool(r.passes), "equation": r.equation}
            for r in validations
        ],
    }
    if ledger is not None:
        summary["ledger"] = ledger.as_dict()
    if grid_check is not None:
        summary["grid_check"] = grid_check._asdict()
    return summary


def json_safe(value):
    """NaN becomes null and +/-inf the strings 'inf' / '-inf', recursively."""
    if isinstance(value, dict):
        return {k: json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
    elif isinstance(value, np.integer):
        return int(value)
    elif isinstance(value, np.bool_):
        return bool(value)
    return value


def emit_report(
    fit: RateFit,
    ledger: Optional[BoundLedger],
    validations: Sequence[ValidationRecord],
    output_dir,
    manifest: Optional[RunManifest] = None,
    grid_check: Optional[GridCheck] = None
) -> List[Path]:
    """
    Write study.csv, summary.json and (given a manifest) manifest.json.

    Raises:
        OSError: the output directory cannot be created or written
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    study_path = out / "study.csv"
    study_frame(fit).to_csv(study_path, index=False, float_format=CSV_FLOAT_FORMAT)

    summary_path = out / "summary.json"
    summary = summary_dict(fit, ledger, validations, grid_check)
    summary_path.write_text(json.dumps(json_safe(summary), indent=2, allow_nan=False) + "\n", encoding="utf-8")

    written = [study_path, summary_path]
    if manifest is not None:
        for path in written:
            manifest.add_output(path)
        written.append(write_manifest(manifest, out / "manifest.json"))
    logger.info("report written to %s", out)
    return written
