"""
Interacting-particle integration of the scaled stochastic Newton equation

    dx = v dt
    dv = -beta v dt + beta K(x - mu) dt + beta dB,    mu = E[x]

and of its first-order limit

    dy = K(y - E[y]) dt + dB.

The law-dependent mean is replaced by the ensemble average of N particles.
Each step freezes the mean (and K) at the step start, advances every particle
with the same frozen value, then reduces once to get the next mean. The
reduction is math.fsum, which is correctly rounded and so independent of
particle order and of how the work was partitioned.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd

from errors import DivergenceError, ParameterError
from kernels import DriftKernel
from noise import INITIAL_DOMAIN, NoiseSource, ou_weights, step_covariance

logger = logging.getLogger(__name__)

SECOND_ORDER = "second-order"
LIMIT = "limit"
SYSTEMS = (SECOND_ORDER, LIMIT)

POINT = "deterministic-point"
GAUSSIAN = "gaussian"

# Drift accuracy guard h * kappa and explicit-scheme stability guard h * beta.
MAX_H_KAPPA = 0.1
MAX_EULER_H_BETA = 0.5

# Steps of noise drawn per block; fixed so block boundaries never depend on
# the number of workers.
NOISE_CHUNK = 128

CSV_FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True)
class InitialLaw:
    """
    Law of (x0, v0), independent of the driving noise.

    Attributes:
        kind: 'deterministic-point' or 'gaussian'
        mean_x, mean_v: Means
        var_x, var_v: Variances (ignored for a deterministic point)
        M: Declared bound on E[x0^2 + v0^2]
    """
    kind: str = POINT
    mean_x: float = 0.0
    mean_v: float = 0.0
    var_x: float = 0.0
    var_v: float = 0.0
    M: float = 1.0

    @property
    def second_moment(self) -> float:
        moment = self.mean_x ** 2 + self.mean_v ** 2
        if self.kind == GAUSSIAN:
            moment += self.var_x + self.var_v
        return moment

    def validate(self):
        if self.kind not in (POINT, GAUSSIAN):
            raise ParameterError(f"initial law kind must be '{POINT}' or '{GAUSSIAN}', got '{self.kind}'")
        if self.var_x < 0 or self.var_v < 0:
            raise ParameterError("initial variances must be non-negative")
        if not self.M > 0:
            raise ParameterError(f"M must be positive, got {self.M}")
        if self.second_moment > self.M:
            raise ParameterError(
                f"E[x0^2 + v0^2] = {self.second_moment:g} exceeds declared M = {self.M:g}"
            )


@dataclass(frozen=True)
class SimConfig:
    """
    One ensemble simulation.

    h * kappa <= 0.1 is required for drift accuracy; h * beta is unrestricted
    for the exponential integrator.
    """
    beta: float
    kernel: DriftKernel
    T: float
    n_steps: int
    n_particles: int
    init: InitialLaw
    seed: int
    workers: int = 1

    @property
    def h(self) -> float:
        return self.T / self.n_steps if self.n_steps else 0.0

    def with_beta(self, beta: float, n_steps: Optional[int] = None) -> "SimConfig":
        return replace(self, beta=beta, n_steps=self.n_steps if n_steps is None else n_steps)

    def validate(self):
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        if not self.T > 0:
            raise ParameterError(f"T must be positive, got {self.T}")
        if self.n_steps < 0:
            raise ParameterError(f"n_steps must be non-negative, got {self.n_steps}")
        if self.n_particles < 1:
            raise ParameterError(f"n_particles must be >= 1, got {self.n_particles}")
        if self.h * self.kernel.kappa > MAX_H_KAPPA:
            raise ParameterError(
                f"h * kappa = {self.h * self.kernel.kappa:.3g} exceeds {MAX_H_KAPPA}; "
                "increase n_steps"
            )
        self.init.validate()


def empirical_mean(x: np.ndarray) -> float:
    return math.fsum(x) / len(x)


@dataclass
class Ensemble:
    """N particles at time t; v is None for the limit system."""
    t: float
    x: np.ndarray
    v: Optional[np.ndarray]
    mu_hat: float

    @classmethod
    def at(cls, t: float, x: np.ndarray, v: Optional[np.ndarray] = None) -> "Ensemble":
        return cls(t=t, x=x, v=v, mu_hat=empirical_mean(x))


@dataclass
class PathBundle:
    """
    Paths of one system on the uniform grid t_k = k h.

    x_paths holds x (or y for the limit system); v_paths is None for the
    limit system; mu_paths is the ensemble mean at every grid point.
    """
    grid: np.ndarray
    x_paths: np.ndarray
    v_paths: Optional[np.ndarray]
    mu_paths: np.ndarray
    system: str
    config: SimConfig

    @property
    def n_particles(self) -> int:
        return self.x_paths.shape[0]


def _check_finite(system: str, step: int, *arrays):
    for arr in arrays:
        if arr is None:
            continue
        bad = ~np.isfinite(arr)
        if bad.any():
            raise DivergenceError(system, int(np.argmax(bad)), step)


def initial_state(config: SimConfig, source: Optional[NoiseSource] = None) -> Ensemble:
    """Draw (x0, v0) for every particle from the initial-condition domain."""
    law = config.init
    n = config.n_particles
    if law.kind == GAUSSIAN:
        source = source or NoiseSource(config.seed, config.workers)
        z = source.normals(np.arange(n), 0, 1, domain=INITIAL_DOMAIN)[:, 0, :]
        x = law.mean_x + math.sqrt(law.var_x) * z[:, 0]
        v = law.mean_v + math.sqrt(law.var_v) * z[:, 1]
    else:
        x = np.full(n, float(law.mean_x))
        v = np.full(n, float(law.mean_v))
    return Ensemble.at(0.0, x, v)


def langevin_step(
    state: Ensemble,
    kernel: DriftKernel,
    rate: float,
    force_gain: float,
    noise_gain: float,
    h: float,
    noise: np.ndarray,
    step: int = 0,
    system: str = SECOND_ORDER
) -> Ensemble:
    """
    Exponential-Euler step of dv = -rate v dt + force_gain K dt + noise_gain dB.

    The linear part is integrated exactly; K(x - mu) is frozen at the step
    start. `noise` holds rows (dB, dxi_x, dxi_v) drawn from
    step_covariance(rate, h); they are rescaled by noise_gain / rate.
    """
    w = ou_weights(rate, h)
    g = force_gain / rate
    s = noise_gain / rate
    F = kernel(state.x - state.mu_hat)

    v_new = w.decay * state.v + (w.one_minus * g) * F + s * noise[:, 2]
    x_new = state.x + w.position * state.v + (w.drift * g) * F + s * noise[:, 1]
    _check_finite(system, step, x_new, v_new)
    return Ensemble.at(state.t + h, x_new, v_new)


def exact_ou_step(
    state: Ensemble,
    config: SimConfig,
    noise: np.ndarray,
    step: int = 0
) -> Ensemble:
    """
    One step of the scaled second-order system, exact in the linear part:

        v <- e^{-beta h} v + (1 - e^{-beta h}) F + dxi_v
        x <- x + (1 - e^{-beta h}) / beta v + (h - (1 - e^{-beta h}) / beta) F + dxi_x

    with F = K(x - mu_hat) frozen at the step start.
    """
    b = config.beta
    return langevin_step(state, config.kernel, b, b, b, config.h, noise, step)


def euler_maruyama_step(
    state: Ensemble,
    config: SimConfig,
    dB: np.ndarray,
    step: int = 0
) -> Ensemble:
    """
    Explicit Euler-Maruyama step of the second-order system (reference scheme).

    Raises:
        ParameterError: beta h >= 0.5
    """
    b, h = config.beta, config.h
    if b * h >= MAX_EULER_H_BETA:
        raise ParameterError(
            f"Euler-Maruyama needs beta * h < {MAX_EULER_H_BETA}, got {b * h:g}"
        )
    F = config.kernel(state.x - state.mu_hat)
    x_new = state.x + state.v * h
    v_new = state.v + (-b * state.v + b * F) * h + b * dB
    _check_finite(SECOND_ORDER, step, x_new, v_new)
    return Ensemble.at(state.t + h, x_new, v_new)


def limit_step(
    state: Ensemble,
    kernel: DriftKernel,
    h: float,
    dB: np.ndarray,
    step: int = 0
) -> Ensemble:
    """
    Euler step of the limit equation, y <- y + K(y - mu_hat) h + dB.

    Raises:
        ParameterError: h * kappa > 0.1
    """
    if h * kernel.kappa > MAX_H_KAPPA:
        raise ParameterError(f"limit step needs h * kappa <= {MAX_H_KAPPA}, got {h * kernel.kappa:g}")
    y_new = state.x + kernel(state.x - state.mu_hat) * h + dB
    _check_finite(LIMIT, step, y_new)
    return Ensemble.at(state.t + h, y_new, None)


def allocate_paths(config: SimConfig, with_velocity: bool):
    shape = (config.n_particles, config.n_steps + 1)
    x_paths = np.empty(shape)
    v_paths = np.empty(shape) if with_velocity else None
    mu_paths = np.empty(config.n_steps + 1)
    return x_paths, v_paths, mu_paths


def record_state(k: int, state: Ensemble, x_paths, v_paths, mu_paths):
    x_paths[:, k] = state.x
    if v_paths is not None:
        v_paths[:, k] = state.v
    mu_paths[k] = state.mu_hat


def simulate(config: SimConfig, system: str = SECOND_ORDER, scheme: str = "exact") -> PathBundle:
    """
    Integrate one system over [0, T] and return its path bundle.

    Args:
        config: Simulation settings
        system: 'second-order' or 'limit'
        scheme: 'exact' (exponential integrator) or 'euler' for the
            second-order system; both read the same dB

    Returns:
        PathBundle on the grid k * h, k = 0..n_steps
    """
    if system not in SYSTEMS:
        raise ParameterError(f"system must be one of {SYSTEMS}, got '{system}'")
    if scheme not in ("exact", "euler"):
        raise ParameterError(f"scheme must be 'exact' or 'euler', got '{scheme}'")
    config.validate()

    n, h = config.n_steps, config.h
    particles = np.arange(config.n_particles)
    source = NoiseSource(config.seed, config.workers)
    second_order = system == SECOND_ORDER

    state = initial_state(config, source)
    if not second_order:
        state = Ensemble.at(0.0, state.x)
    x_paths, v_paths, mu_paths = allocate_paths(config, second_order)
    record_state(0, state, x_paths, v_paths, mu_paths)

    logger.debug("simulate %s: beta=%g N=%d n_steps=%d", system, config.beta, len(particles), n)
    model = step_covariance(config.beta, h) if second_order and n else None

    for start in range(0, n, NOISE_CHUNK):
        count = min(NOISE_CHUNK, n - start)
        if second_order and scheme == "exact":
            noise = source.step_triples(model, particles, start, count)
        else:
            noise = source.brownian(particles, h, start, count)

        for j in range(count):
            k = start + j
            if not second_order:
                state = limit_step(state, config.kernel, h, noise[:, j], k)
            elif scheme == "exact":
                state = exact_ou_step(state, config, noise[:, j, :], k)
            else:
                state = euler_maruyama_step(state, config, noise[:, j], k)
            record_state(k + 1, state, x_paths, v_paths, mu_paths)

    return PathBundle(
        grid=np.arange(n + 1) * h,
        x_paths=x_paths,
        v_paths=v_paths,
        mu_paths=mu_paths,
        system=system,
        config=config,
    )


def bundle_frame(bundle: PathBundle) -> pd.DataFrame:
    """Long-format table (t, particle_id, x, v)."""
    n_particles, n_points = bundle.x_paths.shape
    v = bundle.v_paths.ravel() if bundle.v_paths is not None else np.full(n_particles * n_points, np.nan)
    return pd.DataFrame({
        "t": np.tile(bundle.grid, n_particles),
        "particle_id": np.repeat(np.arange(n_particles), n_points),
        "x": bundle.x_paths.ravel(),
        "v": v,
    })


def write_paths_csv(bundle: PathBundle, path) -> None:
    bundle_frame(bundle).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
