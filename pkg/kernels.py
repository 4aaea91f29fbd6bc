"""
Mean-field drift kernels K with their declared Lipschitz constants.

The drift of both the second-order system and the limit equation is
K(x - E[x]), where K is globally Lipschitz with constant kappa and K(0) = 0.
kappa is declared with the kernel, never inferred: every proof constant in
`bounds` is a function of the declared value, and `check_lipschitz` only
guards it.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, NamedTuple, Optional

import numpy as np

from errors import DomainError, ParameterError

logger = logging.getLogger(__name__)

# Slack allowed on the observed difference quotient before a declared kappa
# is rejected; linear kernels hit kappa up to rounding.
LIPSCHITZ_RTOL = 1e-9


@dataclass(frozen=True)
class DriftKernel:
    """
    A one-dimensional drift kernel.

    Attributes:
        eval: Vectorised map z -> K(z)
        kappa: Declared Lipschitz constant
        name: Identifier used in config files
        params: Parameters the kernel was built from (echoed in manifests)
    """
    eval: Callable[[np.ndarray], np.ndarray]
    kappa: float
    name: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.kappa >= 0.0 and math.isfinite(self.kappa)):
            raise ParameterError(f"kappa must be finite and non-negative, got {self.kappa}")

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.eval(np.asarray(z, dtype=np.float64))


class LipschitzReport(NamedTuple):
    max_observed_ratio: float
    passes: bool


def eval_kernel(kernel: DriftKernel, z: float) -> float:
    """
    Evaluate K at a single centred position.

    Raises:
        DomainError: if z is not finite
    """
    if not math.isfinite(z):
        raise DomainError(f"kernel '{kernel.name}' evaluated at non-finite z={z}")
    return float(kernel(np.float64(z)))


def check_lipschitz(
    kernel: DriftKernel,
    lo: float,
    hi: float,
    n_samples: int
) -> LipschitzReport:
    """
    Largest difference quotient of K on a uniform grid over [lo, hi].

    On a sorted grid the secant slope between any two nodes is a weighted
    average of the adjacent ones, so adjacent pairs give the maximum over
    all pairs.
    """
    if not lo < hi:
        raise ParameterError(f"need lo < hi, got [{lo}, {hi}]")
    if n_samples < 2:
        raise ParameterError(f"need at least 2 samples, got {n_samples}")

    z = np.linspace(lo, hi, n_samples)
    k = kernel(z)
    ratio = float(np.max(np.abs(np.diff(k)) / np.diff(z)))
    passes = ratio <= kernel.kappa * (1.0 + LIPSCHITZ_RTOL)

    if not passes:
        logger.warning(
            "kernel %s: observed slope %.6g exceeds declared kappa %.6g",
            kernel.name, ratio, kernel.kappa
        )
    return LipschitzReport(max_observed_ratio=ratio, passes=passes)


# --- built-in kernels -------------------------------------------------------

def zero_kernel() -> DriftKernel:
    """K = 0, kappa = 0."""
    return DriftKernel(eval=lambda z: np.zeros_like(z), kappa=0.0, name="zero")


def linear_kernel(lam: float = 1.0) -> DriftKernel:
    """K(z) = -lam z, kappa = lam."""
    if lam < 0:
        raise ParameterError(f"linear kernel needs lam >= 0, got {lam}")
    return DriftKernel(
        eval=lambda z: -lam * z, kappa=float(lam), name="linear", params={"lam": lam}
    )


def tanh_kernel(a: float = 1.0, b: float = 1.0) -> DriftKernel:
    """K(z) = a tanh(b z), kappa = |a b|."""
    return DriftKernel(
        eval=lambda z: a * np.tanh(b * z),
        kappa=abs(a * b),
        name="tanh",
        params={"a": a, "b": b}
    )


def clamp_kernel(lam: float = 1.0, c: float = 1.0) -> DriftKernel:
    """Piecewise-linear restoring force K(z) = clip(-lam z, -c, c), kappa = lam."""
    if lam < 0 or c < 0:
        raise ParameterError(f"clamp kernel needs lam, c >= 0, got lam={lam}, c={c}")
    return DriftKernel(
        eval=lambda z: np.clip(-lam * z, -c, c),
        kappa=float(lam),
        name="clamp",
        params={"lam": lam, "c": c}
    )


BUILTIN_KERNELS = {
    "zero": zero_kernel,
    "linear": linear_kernel,
    "tanh": tanh_kernel,
    "clamp": clamp_kernel,
}


def make_kernel(
    name: str,
    params: Optional[Dict[str, float]] = None,
    kappa: Optional[float] = None
) -> DriftKernel:
    """
    Build a built-in kernel by name.

    Args:
        name: One of BUILTIN_KERNELS
        params: Keyword parameters of the kernel factory
        kappa: Declared Lipschitz constant overriding the factory's value

    Returns:
        DriftKernel
    """
    if name not in BUILTIN_KERNELS:
        raise ParameterError(
            f"unknown kernel '{name}', expected one of {sorted(BUILTIN_KERNELS)}"
        )
    try:
        kernel = BUILTIN_KERNELS[name](**(params or {}))
    except TypeError as exc:
        raise ParameterError(f"bad parameters for kernel '{name}': {exc}") from exc

    if kappa is not None:
        kernel = DriftKernel(
            eval=kernel.eval, kappa=float(kappa), name=kernel.name, params=kernel.params
        )
    return kernel
