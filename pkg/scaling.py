"""
Time change from the unscaled Langevin system to the beta-system.

The unscaled system

    dx = v dt
    dv = -gamma v dt + K(x - E[x]) dt + sqrt(gamma) dB

is mapped by x'(t') = x(gamma t'), v'(t') = gamma v(gamma t') onto the
scaled system with beta = gamma^2, driven by the Brownian motion
B'(t') = B(gamma t') / sqrt(gamma). Since B' is a different Brownian motion
the two systems agree in law only, so the check compares single-time
marginals of two independent simulations with a two-sample KS test and the
first four raw moments.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, NamedTuple, Sequence

import numpy as np
from scipy import stats

from bounds import ValidationRecord
from ensemble import (
    NOISE_CHUNK, SECOND_ORDER, InitialLaw, PathBundle, SimConfig,
    allocate_paths, initial_state, langevin_step, record_state
)
from errors import ContractError, ParameterError
from kernels import DriftKernel
from noise import NoiseSource, step_covariance

logger = logging.getLogger(__name__)

KS_ALPHA = 0.01
MOMENT_ORDERS = (1, 2, 3, 4)
MOMENT_SES = 4.0
_GRID_RTOL = 1e-9


@dataclass(frozen=True)
class ScalingMap:
    gamma: float

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise ParameterError(f"gamma must be positive and finite, got {self.gamma}")

    @property
    def beta(self) -> float:
        return self.gamma * self.gamma


def unscaled_simulate(
    gamma: float,
    kernel: DriftKernel,
    T_prime: float,
    n_steps: int,
    N: int,
    init: InitialLaw,
    seed: int,
    workers: int = 1
) -> PathBundle:
    """
    Paths of the unscaled system on the original-time grid k * gamma T' / n_steps.

    The returned bundle's config echoes rate gamma as `beta` and the
    original horizon gamma T' as `T`.
    """
    ScalingMap(gamma)
    if not T_prime > 0:
        raise ParameterError(f"T_prime must be positive, got {T_prime}")
    config = SimConfig(
        beta=gamma, kernel=kernel, T=gamma * T_prime, n_steps=n_steps,
        n_particles=N, init=init, seed=seed, workers=workers,
    )
    config.validate()

    n, h = config.n_steps, config.h
    particles = np.arange(N)
    source = NoiseSource(seed, workers)
    state = initial_state(config, source)
    x_paths, v_paths, mu_paths = allocate_paths(config, True)
    record_state(0, state, x_paths, v_paths, mu_paths)

    logger.debug("unscaled run: gamma=%g horizon=%g N=%d n_steps=%d", gamma, config.T, N, n)
    model = step_covariance(gamma, h) if n else None
    noise_gain = math.sqrt(gamma)

    for start in range(0, n, NOISE_CHUNK):
        count = min(NOISE_CHUNK, n - start)
        triples = source.step_triples(model, particles, start, count)
        for j in range(count):
            k = start + j
            state = langevin_step(state, kernel, gamma, 1.0, noise_gain, h, triples[:, j, :], k)
            record_state(k + 1, state, x_paths, v_paths, mu_paths)

    return PathBundle(np.arange(n + 1) * h, x_paths, v_paths, mu_paths, SECOND_ORDER, config)


def time_change(bundle: PathBundle, gamma: float) -> PathBundle:
    """
    Compress the grid by gamma and multiply velocities by gamma.

    Raises:
        ContractError: the grid does not start at 0 or is not uniform
    """
    smap = ScalingMap(gamma)
    grid = bundle.grid
    if grid.size == 0 or grid[0] != 0.0:
        raise ContractError("time change needs a grid starting at t = 0")
    if grid.size > 1:
        h = grid[1] - grid[0]
        if not np.allclose(np.diff(grid), h, rtol=_GRID_RTOL, atol=0.0):
            raise ContractError("time change needs a uniform grid")

    v_paths = None if bundle.v_paths is None else gamma * bundle.v_paths
    config = replace(bundle.config, beta=bundle.config.beta * smap.gamma, T=bundle.config.T / gamma)
    return PathBundle(
        grid=grid / gamma,
        x_paths=bundle.x_paths.copy(),
        v_paths=v_paths,
        mu_paths=bundle.mu_paths.copy(),
        system=bundle.system,
        config=config,
    )


def ks_critical(n: int, m: int, alpha: float = KS_ALPHA) -> float:
    """Asymptotic two-sample KS critical distance at level alpha."""
    if n < 1 or m < 1:
        raise ParameterError(f"sample sizes must be positive, got {n}, {m}")
    if not 0 < alpha < 1:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")
    return math.sqrt(-math.log(alpha / 2.0) / 2.0) * math.sqrt((n + m) / (n * m))


class CheckpointMatch(NamedTuple):
    t: float
    ks_statistic: float
    ks_critical: float
    ks_pvalue: float
    moment_z: np.ndarray
    v_ks_statistic: float
    passes: bool


class MatchReport(NamedTuple):
    checkpoints: List[CheckpointMatch]
    passes: bool


def _checkpoint_index(bundle: PathBundle, t: float) -> int:
    k = int(np.argmin(np.abs(bundle.grid - t)))
    if abs(bundle.grid[k] - t) > _GRID_RTOL * max(1.0, abs(t)):
        raise ContractError(f"checkpoint t={t:g} is not a grid point")
    return k


def _moment_z(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = np.empty(len(MOMENT_ORDERS))
    for i, order in enumerate(MOMENT_ORDERS):
        pa, pb = a ** order, b ** order
        se = math.sqrt(pa.var(ddof=1) / pa.size + pb.var(ddof=1) / pb.size)
        diff = abs(pa.mean() - pb.mean())
        z[i] = diff / se if se > 0 else (0.0 if diff == 0 else math.inf)
    return z


def distribution_match(
    bundle_a: PathBundle,
    bundle_b: PathBundle,
    checkpoints: Sequence[float],
    alpha: float = KS_ALPHA
) -> MatchReport:
    """
    Compare the x-marginals of two bundles at each checkpoint.

    A checkpoint passes iff the KS distance is below ks_critical and every
    raw moment of order 1..4 differs by at most 4 combined standard errors.
    The velocity KS distance is reported but never gates the result.

    Raises:
        ContractError: a checkpoint is not a grid point of both bundles
    """
    results = []
    for t in checkpoints:
        xa = bundle_a.x_paths[:, _checkpoint_index(bundle_a, t)]
        xb = bundle_b.x_paths[:, _checkpoint_index(bundle_b, t)]
        ks = stats.ks_2samp(xa, xb)
        critical = ks_critical(xa.size, xb.size, alpha)
        z = _moment_z(xa, xb)

        v_stat = math.nan
        if bundle_a.v_paths is not None and bundle_b.v_paths is not None:
            va = bundle_a.v_paths[:, _checkpoint_index(bundle_a, t)]
            vb = bundle_b.v_paths[:, _checkpoint_index(bundle_b, t)]
            v_stat = float(stats.ks_2samp(va, vb).statistic)

        passes = bool(ks.statistic < critical or ks.statistic == 0.0) and bool(np.all(z <= MOMENT_SES))
        logger.debug("checkpoint t=%g: D=%.4f (crit %.4f) max z=%.2f", t, ks.statistic, critical, z.max())
        results.append(CheckpointMatch(
            t=float(t), ks_statistic=float(ks.statistic), ks_critical=critical,
            ks_pvalue=float(ks.pvalue), moment_z=z, v_ks_statistic=v_stat, passes=passes,
        ))
    return MatchReport(checkpoints=results, passes=all(c.passes for c in results))


def match_records(report: MatchReport, label: str) -> List[ValidationRecord]:
    """One record per checkpoint for the validations table."""
    records = []
    for c in report.checkpoints:
        records.append(ValidationRecord(
            f"{label}[t={c.t:g}]", c.ks_statistic, c.ks_critical,
            c.ks_critical - c.ks_statistic, c.passes,
            f"KS(x) < crit and |moment diff| <= {MOMENT_SES:g} se, orders 1-4 (max z={c.moment_z.max():.2f})",
        ))
    return records
