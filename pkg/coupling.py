"""
Common-noise coupling of x^beta and the limit process y.

Per particle and step one triple (dB, dxi_x, dxi_v) is drawn; the
second-order system consumes all three components, the limit equation only
dB. Both start from the same x0. Each system keeps its own ensemble mean, so
mu^beta and mu = E[y] are estimated separately over the same particle count.
The pathwise difference then estimates the strong error
E[sup_{0<=t<=T} |x_t^beta - y_t|^2].
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd

from ensemble import (
    CSV_FLOAT_FORMAT, LIMIT, NOISE_CHUNK, SECOND_ORDER, Ensemble, PathBundle, SimConfig,
    allocate_paths, record_state, exact_ou_step, initial_state, limit_step
)
from errors import ContractError, ParameterError
from noise import NoiseSource, coarsen_step_noise, step_covariance

logger = logging.getLogger(__name__)

Z_95 = 1.96


@dataclass
class CoupledRun:
    config: SimConfig
    x_bundle: PathBundle
    y_bundle: PathBundle
    sup_sq_errors: np.ndarray


class ErrorEstimate(NamedTuple):
    mean: float
    std_error: float
    n: int
    confidence_halfwidth_95: float


def coupled_simulate(config: SimConfig, substeps: int = 1) -> CoupledRun:
    """
    Integrate x^beta and y on one grid with shared Brownian increments.

    Args:
        config: Simulation settings
        substeps: Noise is drawn on a grid `substeps` times finer and merged
            into coarse-step triples, so a run on n_steps reads the same
            Brownian path as a run on substeps * n_steps

    Raises:
        DivergenceError: labelled with the system that blew up
    """
    config.validate()
    if substeps < 1:
        raise ParameterError(f"substeps must be >= 1, got {substeps}")
    n, h = config.n_steps, config.h
    particles = np.arange(config.n_particles)
    source = NoiseSource(config.seed, config.workers)
    h_fine = h / substeps

    x_state = initial_state(config, source)
    y_state = Ensemble.at(0.0, x_state.x.copy())

    x_paths, v_paths, mu_x = allocate_paths(config, True)
    y_paths, _, mu_y = allocate_paths(config, False)
    record_state(0, x_state, x_paths, v_paths, mu_x)
    record_state(0, y_state, y_paths, None, mu_y)

    logger.info(
        "coupled run: beta=%g kernel=%s N=%d n_steps=%d",
        config.beta, config.kernel.name, config.n_particles, n
    )
    model = step_covariance(config.beta, h_fine) if n else None

    for start in range(0, n, NOISE_CHUNK):
        count = min(NOISE_CHUNK, n - start)
        triples = source.step_triples(model, particles, start * substeps, count * substeps)
        if substeps > 1:
            triples = coarsen_step_noise(triples, config.beta, h_fine, substeps)
        for j in range(count):
            k = start + j
            x_state = exact_ou_step(x_state, config, triples[:, j, :], k)
            y_state = limit_step(y_state, config.kernel, h, triples[:, j, 0], k)
            record_state(k + 1, x_state, x_paths, v_paths, mu_x)
            record_state(k + 1, y_state, y_paths, None, mu_y)

    grid = np.arange(n + 1) * h
    run = CoupledRun(
        config=config,
        x_bundle=PathBundle(grid, x_paths, v_paths, mu_x, SECOND_ORDER, config),
        y_bundle=PathBundle(grid.copy(), y_paths, None, mu_y, LIMIT, config),
        sup_sq_errors=np.empty(0),
    )
    run.sup_sq_errors = sup_sq_error(run)
    return run


def sup_sq_error(run: CoupledRun) -> np.ndarray:
    """
    Per particle, max over grid points of (x - y)^2.

    Raises:
        ContractError: bundles on different grids or particle counts
    """
    xb, yb = run.x_bundle, run.y_bundle
    if xb.grid.shape != yb.grid.shape or not np.array_equal(xb.grid, yb.grid):
        raise ContractError("x and y bundles are not on a common grid")
    if xb.x_paths.shape != yb.x_paths.shape:
        raise ContractError(
            f"path shapes differ: {xb.x_paths.shape} vs {yb.x_paths.shape}"
        )
    return np.max((xb.x_paths - yb.x_paths) ** 2, axis=1)


def estimate_error(errors: np.ndarray) -> ErrorEstimate:
    """
    Monte-Carlo mean with standard error and 95% halfwidth.

    Raises:
        ParameterError: fewer than 2 samples
    """
    errors = np.asarray(errors, dtype=np.float64)
    n = errors.size
    if n < 2:
        raise ParameterError(f"need at least 2 samples, got {n}")
    mean = math.fsum(errors) / n
    sd = math.sqrt(math.fsum((errors - mean) ** 2) / (n - 1))
    se = sd / math.sqrt(n)
    return ErrorEstimate(mean=mean, std_error=se, n=n, confidence_halfwidth_95=Z_95 * se)


def write_errors_csv(run: CoupledRun, path) -> None:
    pd.DataFrame({
        "particle_id": np.arange(run.sup_sq_errors.size),
        "sup_sq_error": run.sup_sq_errors,
    }).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
