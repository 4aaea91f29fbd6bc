"""
Counter-based Gaussian noise and the exact joint law of one integrator step.

Every standard normal used anywhere in the laboratory is a pure function of
(master seed, counter domain, particle index, step index): particle i, step n
reads one Philox4x64 block keyed by (seed, domain * 2**48 + i) at block
counter n and turns its four 64-bit words into four normals by Box-Muller.
Parallel ensembles are therefore reproducible bit for bit, whatever the
number of workers, and the coupled systems read the same Brownian increment
by construction.

Over one step of length h the scaled Langevin system needs three Gaussian
functionals of the driving Brownian motion:

    dB     = B_{t+h} - B_t
    dxi_x  = int_t^{t+h} (1 - e^{-beta (t+h-u)}) dB_u
    dxi_v  = beta int_t^{t+h} e^{-beta (t+h-u)} dB_u

Their covariance follows from the Ito isometry. The law is degenerate:
dxi_x = dB - dxi_v / beta holds pathwise, so the covariance has rank two and
its lower-triangular root has a zero third pivot.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Tuple

import numpy as np

from errors import ConditioningError, ParameterError

logger = logging.getLogger(__name__)

# Counter domains; initial conditions never share a key with Brownian draws.
BROWNIAN_DOMAIN = 0
INITIAL_DOMAIN = 1

_UINT64_MASK = (1 << 64) - 1
_PARTICLE_BITS = 48
_TWO_PI = 2.0 * math.pi

# Relative diagonal perturbation tolerated when the conditional variance of
# the (dB, dxi_x) block rounds below zero.
JITTER = 1e-14

# Below this argument the exponential remainders are summed as series.
_SERIES_CUTOFF = 1.0
_SERIES_TERMS = 30


def exp_remainder(a: float, order: int) -> float:
    """
    Taylor remainder of e^{-a} after `order` terms.

        R_m(a) = e^{-a} - sum_{k<m} (-a)^k / k!

    Summed as a series for small a, where the direct difference cancels.
    """
    if a < _SERIES_CUTOFF:
        total = 0.0
        term = (-a) ** order / math.factorial(order)
        for k in range(order, order + _SERIES_TERMS):
            total += term
            term *= -a / (k + 1)
        return total
    poly = 0.0
    term = 1.0
    for k in range(order):
        poly += term
        term *= -a / (k + 1)
    return math.exp(-a) - poly


class OUWeights(NamedTuple):
    decay: float        # e^{-rate h}
    one_minus: float    # 1 - e^{-rate h}
    position: float     # (1 - e^{-rate h}) / rate
    drift: float        # h - (1 - e^{-rate h}) / rate


def ou_weights(rate: float, h: float) -> OUWeights:
    """
    Variation-of-constants weights of one exponential-Euler step.

    For dv = -rate v dt + f dt with f frozen over the step:
        v(t+h) = decay v + one_minus f / rate
        x(t+h) = x + position v + drift f / rate
    """
    if rate <= 0:
        raise ParameterError(f"rate must be positive, got {rate}")
    if h < 0:
        raise ParameterError(f"step must be non-negative, got {h}")
    a = rate * h
    one_minus = -math.expm1(-a)
    return OUWeights(
        decay=math.exp(-a),
        one_minus=one_minus,
        position=one_minus / rate,
        drift=exp_remainder(a, 2) / rate,
    )


@dataclass(frozen=True)
class RngStream:
    """Address of one step draw: (master seed, particle, step)."""
    master_seed: int
    particle_index: int
    step_index: int = 0


@dataclass(frozen=True)
class StepNoiseModel:
    """
    Joint law of (dB, dxi_x, dxi_v) for one step.

    Attributes:
        beta: Scaling parameter
        h: Step size
        cov: 3x3 covariance in the order (dB, dxi_x, dxi_v)
        factor: Lower-triangular L with L L^T = cov
    """
    beta: float
    h: float
    cov: np.ndarray
    factor: np.ndarray


def step_covariance(beta: float, h: float) -> StepNoiseModel:
    """
    Closed-form covariance of the three step functionals and its root.

    With a = beta h:
        Var(dB)         = h
        Var(dxi_v)      = beta (1 - e^{-2a}) / 2
        Var(dxi_x)      = h - 2 (1 - e^{-a}) / beta + (1 - e^{-2a}) / (2 beta)
        Cov(dB, dxi_v)  = 1 - e^{-a}
        Cov(dB, dxi_x)  = h - (1 - e^{-a}) / beta
        Cov(dxi_x, dxi_v) = (1 - e^{-a}) - (1 - e^{-2a}) / 2 = (1 - e^{-a})^2 / 2

    Raises:
        ParameterError: beta <= 0 or h < 0
        ConditioningError: the root cannot be built
    """
    if not beta > 0:
        raise ParameterError(f"beta must be positive, got {beta}")
    if not h >= 0:
        raise ParameterError(f"step h must be non-negative, got {h}")
    if h == 0:
        zeros = np.zeros((3, 3))
        return StepNoiseModel(beta=beta, h=h, cov=zeros, factor=zeros.copy())

    a = beta * h
    e1 = -math.expm1(-a)
    e2 = -math.expm1(-2.0 * a)
    r2 = exp_remainder(a, 2)

    var_b = h
    var_x = (2.0 * exp_remainder(a, 3) - 0.5 * exp_remainder(2.0 * a, 3)) / beta
    var_v = 0.5 * beta * e2
    cov_bx = r2 / beta
    cov_bv = e1
    cov_xv = 0.5 * e1 * e1

    cov = np.array([
        [var_b, cov_bx, cov_bv],
        [cov_bx, var_x, cov_xv],
        [cov_bv, cov_xv, var_v],
    ])

    # Var(dxi_x | dB) = (a (1 - e^{-2a}) / 2 - (1 - e^{-a})^2) / (beta^2 h)
    cond = a * (2.0 * r2 - 0.5 * exp_remainder(2.0 * a, 2)) - r2 * r2
    cond /= beta * beta * h
    if not math.isfinite(cond):
        raise ConditioningError(f"non-finite conditional variance at beta={beta}, h={h}")
    if cond < 0:
        tol = JITTER * float(np.trace(cov))
        if -cond > tol:
            raise ConditioningError(
                f"conditional variance {cond:.3e} below -{tol:.3e} at beta={beta}, h={h}"
            )
        logger.warning("clamping conditional variance %.3e to 0 (beta=%g, h=%g)", cond, beta, h)
        cond = 0.0

    l00 = math.sqrt(h)
    l10 = cov_bx / l00
    l11 = math.sqrt(cond)
    factor = np.array([
        [l00, 0.0, 0.0],
        [l10, l11, 0.0],
        [cov_bv / l00, -beta * l11, 0.0],
    ])
    return StepNoiseModel(beta=beta, h=h, cov=cov, factor=factor)


# --- counter-based generation ----------------------------------------------

def _uniforms_to_normals(raw: np.ndarray) -> np.ndarray:
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    out = np.empty_like(u)
    r = np.sqrt(-2.0 * np.log(u[:, 0]))
    out[:, 0] = r * np.cos(_TWO_PI * u[:, 1])
    out[:, 1] = r * np.sin(_TWO_PI * u[:, 1])
    r = np.sqrt(-2.0 * np.log(u[:, 2]))
    out[:, 2] = r * np.cos(_TWO_PI * u[:, 3])
    out[:, 3] = r * np.sin(_TWO_PI * u[:, 3])
    return out


def _particle_normals(
    seed: int,
    domain: int,
    particle: int,
    step_start: int,
    n_steps: int
) -> np.ndarray:
    key = np.array(
        [seed & _UINT64_MASK, (domain << _PARTICLE_BITS) | particle], dtype=np.uint64
    )
    counter = np.array([step_start, 0, 0, 0], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=counter)
    raw = bitgen.random_raw(4 * n_steps).reshape(n_steps, 4)
    return _uniforms_to_normals(raw)


class NoiseSource:
    """
    Vectorised access to the counter-based normals.

    Args:
        seed: Master seed (reduced mod 2**64)
        workers: Threads used to fill particle blocks; never changes values
    """

    def __init__(self, seed: int, workers: int = 1):
        if workers < 1:
            raise ParameterError(f"workers must be >= 1, got {workers}")
        self.seed = int(seed) & _UINT64_MASK
        self.workers = int(workers)

    def _fill(self, particles, domain, step_start, n_steps):
        return np.stack([
            _particle_normals(self.seed, domain, int(i), step_start, n_steps)
            for i in particles
        ]) if len(particles) else np.empty((0, n_steps, 4))

    def normals(
        self,
        particles: Sequence[int],
        step_start: int,
        n_steps: int,
        domain: int = BROWNIAN_DOMAIN
    ) -> np.ndarray:
        """
        Standard normals for a block of steps.

        Returns:
            Array of shape (len(particles), n_steps, 4)
        """
        particles = np.asarray(particles, dtype=np.int64)
        if n_steps == 0:
            return np.empty((len(particles), 0, 4))
        if self.workers == 1 or len(particles) < 2 * self.workers:
            return self._fill(particles, domain, step_start, n_steps)

        blocks = np.array_split(particles, self.workers)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            parts = list(pool.map(
                lambda block: self._fill(block, domain, step_start, n_steps), blocks
            ))
        return np.concatenate(parts, axis=0)

    def step_triples(
        self,
        model: StepNoiseModel,
        particles: Sequence[int],
        step_start: int,
        n_steps: int
    ) -> np.ndarray:
        """
        (dB, dxi_x, dxi_v) for a block of steps, shape (N, n_steps, 3).

        Row j of the result is sum_{k<=j} factor[j, k] z_k, evaluated
        elementwise so every particle sees identical arithmetic.
        """
        z = self.normals(particles, step_start, n_steps)
        L = model.factor
        out = np.empty(z.shape[:2] + (3,))
        out[..., 0] = L[0, 0] * z[..., 0]
        out[..., 1] = L[1, 0] * z[..., 0] + L[1, 1] * z[..., 1]
        out[..., 2] = L[2, 0] * z[..., 0] + L[2, 1] * z[..., 1] + L[2, 2] * z[..., 2]
        return out

    def brownian(
        self,
        particles: Sequence[int],
        h: float,
        step_start: int,
        n_steps: int
    ) -> np.ndarray:
        """N(0, h) increments, shape (N, n_steps); equal to the dB column of step_triples."""
        z = self.normals(particles, step_start, n_steps)
        return math.sqrt(h) * z[..., 0]


def coarsen_step_noise(fine: np.ndarray, beta: float, h_fine: float, factor: int) -> np.ndarray:
    """
    Merge `factor` consecutive fine-step triples into one coarse-step triple.

        dB     = sum_i dB_i
        dxi_v  = sum_i e^{-beta h_fine (factor - 1 - i)} dxi_v_i
        dxi_x  = dB - dxi_v / beta

    The result has the law of step_covariance(beta, factor * h_fine) and is
    built from the same Brownian path as the fine triples.

    Args:
        fine: Triples of shape (N, n_fine, 3), n_fine a multiple of factor
    """
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    n, n_fine, _ = fine.shape
    if n_fine % factor:
        raise ParameterError(f"{n_fine} fine steps do not split into blocks of {factor}")
    if factor == 1:
        return fine.copy()
    blocks = fine.reshape(n, n_fine // factor, factor, 3)
    weights = np.exp(-beta * h_fine * np.arange(factor - 1, -1, -1, dtype=float))
    out = np.empty((n, n_fine // factor, 3))
    out[..., 0] = blocks[..., 0].sum(axis=2)
    out[..., 2] = blocks[..., 2] @ weights
    out[..., 1] = out[..., 0] - out[..., 2] / beta
    return out


def sample_step_noise(model: StepNoiseModel, stream: RngStream) -> Tuple[float, float, float]:
    """One draw of (dB, dxi_x, dxi_v) at the stream's (particle, step)."""
    triple = NoiseSource(stream.master_seed).step_triples(
        model, [stream.particle_index], stream.step_index, 1
    )[0, 0]
    return float(triple[0]), float(triple[1]), float(triple[2])


def brownian_increments(stream: RngStream, h: float, n: int) -> np.ndarray:
    """
    n i.i.d. N(0, h) draws for steps stream.step_index .. stream.step_index + n - 1.
    """
    if n < 0:
        raise ParameterError(f"n must be non-negative, got {n}")
    if h < 0:
        raise ParameterError(f"h must be non-negative, got {h}")
    if n == 0:
        return np.empty(0)
    return NoiseSource(stream.master_seed).brownian(
        [stream.particle_index], h, stream.step_index, n
    )[0]
