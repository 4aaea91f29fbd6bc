"""
Constants of the convergence proof and Monte-Carlo checks of each
intermediate moment bound.

The constants are implemented as printed:

    theta  = 20 kappa^2
    D      = 10 kappa^2 T
    H0(T)  = 5M + 5 + 45T + 40T^2
    H(T)   = H0(T) e^{theta T^2}
    Lambda = 5 (kappa^2 T H(T) e^{theta T^2} + 3/2)
    bound(beta) = Lambda e^{D T^2} / beta

H already contains e^{theta T^2}, yet the I2 estimate multiplies by it
again, and the final Gronwall factor is printed as e^{D T^2} although D
already carries T. A sharp variant (single e^{theta T^2} inside Lambda,
final factor e^{D T}) is carried alongside. Everything is evaluated in log
space; a bound too large for a float is reported as inf with `overflow` set.

The pathwise decomposition used by the checks, for x on the grid:

    I0(t) = v0 (1 - e^{-beta t}) / beta
    I1(t) = -e^{-beta t} int_0^t e^{beta s} dB_s
    I2(t) = -int_0^t e^{-beta (t-s)} K(x_s - mu_s) ds
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Union

import numpy as np
import pandas as pd

from coupling import CoupledRun, estimate_error
from ensemble import CSV_FLOAT_FORMAT, GAUSSIAN, SECOND_ORDER, PathBundle
from errors import ContractError, ParameterError
from kernels import DriftKernel, check_lipschitz
from noise import exp_remainder

logger = logging.getLogger(__name__)

_LOG_FLOAT_MAX = math.log(np.finfo(np.float64).max)

# Halfwidths allowed above a bound, standard errors allowed around a closed form.
BOUND_HALFWIDTHS = 3.0
CLOSED_FORM_SES = 4.0

# Relative round-off allowed when a term is recovered by subtracting path terms.
ROUNDOFF_REL = 1e-9


def _log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _exp(log_value: float) -> float:
    if log_value > _LOG_FLOAT_MAX:
        return math.inf
    return math.exp(log_value)


@dataclass(frozen=True)
class BoundLedger:
    """All proof constants for (M, kappa, T), with log-space companions."""
    M: float
    kappa: float
    T: float
    theta: float
    D: float
    H0: float
    log_H: float
    log_Lambda: float
    log_Lambda_sharp: float

    @property
    def H(self) -> float:
        return _exp(self.log_H)

    @property
    def Lambda(self) -> float:
        return _exp(self.log_Lambda)

    @property
    def Lambda_sharp(self) -> float:
        return _exp(self.log_Lambda_sharp)

    @property
    def overflow(self) -> bool:
        return self.log_theorem_bound(1.0) > _LOG_FLOAT_MAX

    def log_theorem_bound(self, beta: float) -> float:
        return self.log_Lambda + self.D * self.T ** 2 - math.log(beta)

    def log_theorem_bound_sharp(self, beta: float) -> float:
        return self.log_Lambda_sharp + self.D * self.T - math.log(beta)

    def theorem_bound(self, beta: float) -> float:
        """(1/beta) Lambda e^{D T^2}, as printed."""
        return _exp(self.log_theorem_bound(beta))

    def theorem_bound_sharp(self, beta: float) -> float:
        """(1/beta) Lambda_sharp e^{D T}."""
        return _exp(self.log_theorem_bound_sharp(beta))

    def i2_bound(self, beta: float, sharp: bool = False) -> float:
        """(kappa^2 / beta) T H e^{theta T^2}; the sharp variant drops the extra exponential."""
        log_value = 2.0 * _log(self.kappa) - math.log(beta) + math.log(self.T) + self.log_H
        if not sharp:
            log_value += self.theta * self.T ** 2
        return _exp(log_value)

    def as_dict(self) -> dict:
        return {
            "M": self.M, "kappa": self.kappa, "T": self.T,
            "theta": self.theta, "D": self.D, "H0": self.H0,
            "H": self.H, "Lambda": self.Lambda, "Lambda_sharp": self.Lambda_sharp,
            "log_H": self.log_H, "log_Lambda": self.log_Lambda,
            "overflow": self.overflow,
        }


def compute_ledger(M: float, kappa: float, T: float) -> BoundLedger:
    """
    Evaluate every constant of the proof chain.

    Raises:
        ParameterError: M < 0, kappa < 0 or T <= 0
    """
    if M < 0 or kappa < 0 or not T > 0:
        raise ParameterError(f"need M >= 0, kappa >= 0, T > 0; got M={M}, kappa={kappa}, T={T}")

    theta = 20.0 * kappa ** 2
    D = 10.0 * kappa ** 2 * T
    H0 = 5.0 * M + 5.0 + 45.0 * T + 40.0 * T ** 2
    log_H = math.log(H0) + theta * T ** 2

    log_drift = 2.0 * _log(kappa) + math.log(T) + log_H
    log_Lambda = math.log(5.0) + float(np.logaddexp(log_drift + theta * T ** 2, math.log(1.5)))
    log_Lambda_sharp = math.log(5.0) + float(np.logaddexp(log_drift, math.log(1.5)))

    ledger = BoundLedger(
        M=M, kappa=kappa, T=T, theta=theta, D=D, H0=H0,
        log_H=log_H, log_Lambda=log_Lambda, log_Lambda_sharp=log_Lambda_sharp,
    )
    if ledger.overflow:
        logger.warning("theorem bound overflows a float for kappa=%g, T=%g; reported as inf", kappa, T)
    return ledger


class MomentBound(NamedTuple):
    value: float
    bound: float
    normalized: bool = True


def i0_moment(beta: float, t: float, k: int, v0_abs_moment_k: float) -> MomentBound:
    """
    E|I0(t)|^k = E|v0|^k (1 - e^{-beta t})^k / beta^k, with the printed bound 1/beta^k.

    The printed bound omits E|v0|^k; `normalized` is False when that factor
    exceeds 1 and the printed bound does not apply.
    """
    if not beta > 0 or t < 0 or k < 1:
        raise ParameterError(f"need beta > 0, t >= 0, k >= 1; got beta={beta}, t={t}, k={k}")
    one_minus = -math.expm1(-beta * t)
    value = v0_abs_moment_k * (one_minus / beta) ** k
    return MomentBound(value=value, bound=beta ** -k, normalized=v0_abs_moment_k <= 1.0)


def i1_second_moment(beta: float, t: float) -> MomentBound:
    """E|I1(t)|^2 = (1 - e^{-2 beta t}) / (2 beta), bounded by 1/(2 beta)."""
    if not beta > 0 or t < 0:
        raise ParameterError(f"need beta > 0, t >= 0; got beta={beta}, t={t}")
    return MomentBound(value=-math.expm1(-2.0 * beta * t) / (2.0 * beta), bound=0.5 / beta)


# --- pathwise decomposition -------------------------------------------------

class ITerms(NamedTuple):
    I0: np.ndarray
    I1: np.ndarray
    I2: np.ndarray


def _x_bundle(source: Union[CoupledRun, PathBundle]) -> PathBundle:
    bundle = source.x_bundle if isinstance(source, CoupledRun) else source
    if bundle.system != SECOND_ORDER or bundle.v_paths is None:
        raise ContractError("I-terms need a second-order bundle with velocity paths")
    return bundle


def _convolve(g: np.ndarray, decay: float, w0: float, w1: float) -> np.ndarray:
    """J_{k+1} = decay J_k + w0 g_k + w1 g_{k+1}, J_0 = 0, along axis 1."""
    J = np.zeros_like(g)
    for k in range(g.shape[1] - 1):
        J[:, k + 1] = decay * J[:, k] + w0 * g[:, k] + w1 * g[:, k + 1]
    return J


def i_terms(source: Union[CoupledRun, PathBundle], rule: str = "trapezoid") -> ITerms:
    """
    I0, I1, I2 on the grid of a second-order bundle.

    I2 is a product quadrature of int e^{-beta(t-s)} K ds: 'trapezoid'
    integrates the exponential weight exactly against piecewise-linear K,
    'left' freezes K at the left node as the integrator does. The weight is
    always evaluated as e^{-beta(t-s)}, never e^{beta s}. I1 is recovered
    from the velocity with the left rule, which makes it the exact
    stochastic convolution at the grid points.
    """
    if rule not in ("trapezoid", "left"):
        raise ParameterError(f"rule must be 'trapezoid' or 'left', got '{rule}'")
    bundle = _x_bundle(source)
    beta = bundle.config.beta
    kernel: DriftKernel = bundle.config.kernel
    grid = bundle.grid
    v0 = bundle.v_paths[:, :1]

    I0 = v0 * (-np.expm1(-beta * grid) / beta)[None, :]
    g = kernel(bundle.x_paths - bundle.mu_paths[None, :])

    if grid.size < 2:
        zeros = np.zeros_like(bundle.x_paths)
        return ITerms(I0=I0, I1=zeros, I2=zeros.copy())

    h = grid[1] - grid[0]
    a = beta * h
    decay = math.exp(-a)
    one_minus = -math.expm1(-a)

    J_left = _convolve(g, decay, one_minus / beta, 0.0)
    if rule == "left":
        J = J_left
    else:
        r2 = exp_remainder(a, 2)
        w0 = (a - (1.0 + a) * r2 / a) / beta
        J = _convolve(g, decay, w0, one_minus / beta - w0)

    I1 = -(bundle.v_paths - np.exp(-beta * grid)[None, :] * v0) / beta + J_left
    return ITerms(I0=I0, I1=I1, I2=-J)


# --- validation records -----------------------------------------------------

class ValidationRecord(NamedTuple):
    name: str
    lhs: float
    rhs: float
    margin: float
    passes: bool
    equation: str
    halfwidth: float = 0.0


def _upper_bound_record(name, values, rhs, equation) -> ValidationRecord:
    est = estimate_error(values)
    lhs = est.mean
    hw = est.confidence_halfwidth_95
    passes = bool(lhs <= rhs + BOUND_HALFWIDTHS * hw)
    return ValidationRecord(name, lhs, rhs, rhs - lhs, passes, equation, hw)


def _closed_form_record(name, values, closed_form, equation, atol: float = 0.0) -> ValidationRecord:
    est = estimate_error(values)
    tol = CLOSED_FORM_SES * est.std_error + 1e-12 * abs(closed_form) + atol
    diff = abs(est.mean - closed_form)
    return ValidationRecord(name, est.mean, closed_form, tol - diff, bool(diff <= tol), equation,
                            est.confidence_halfwidth_95)


def validate_kernel(kernel: DriftKernel, lo: float = -10.0, hi: float = 10.0,
                    n_samples: int = 10_000) -> ValidationRecord:
    report = check_lipschitz(kernel, lo, hi, n_samples)
    return ValidationRecord(
        f"lipschitz_{kernel.name}", report.max_observed_ratio, kernel.kappa,
        kernel.kappa - report.max_observed_ratio, report.passes,
        "max |K(a)-K(b)|/|a-b| <= kappa",
    )


def recovered_i0(run: CoupledRun) -> np.ndarray:
    """
    I0 on the grid from the simulated path: x_t - x_0 - I1 - I2 - int_0^t K ds - B_t.

    I2 and the drift integral use the left rule, the integrator's own
    quadrature, and B comes from the limit system of the same run. A
    consistent integrator returns v0 (1 - e^{-beta t}) / beta up to round-off.
    """
    bundle = _x_bundle(run)
    terms = i_terms(bundle, rule="left")
    x = bundle.x_paths
    drift = np.zeros_like(x)
    if bundle.grid.size > 1:
        h = bundle.grid[1] - bundle.grid[0]
        K = bundle.config.kernel(x[:, :-1] - bundle.mu_paths[None, :-1])
        drift[:, 1:] = np.cumsum(K, axis=1) * h
    return x - x[:, :1] - terms.I1 - terms.I2 - drift - brownian_paths(run)


def validate_i0(run: CoupledRun, k: int = 2) -> List[ValidationRecord]:
    """E|I0(T)|^k recovered from the paths against its closed form and the printed 1/beta^k."""
    bundle = _x_bundle(run)
    beta, T = bundle.config.beta, bundle.grid[-1]
    v0 = bundle.v_paths[:, 0]
    I0 = recovered_i0(run)[:, -1]
    samples = np.abs(I0) ** k
    closed = i0_moment(beta, T, k, float(np.mean(np.abs(v0) ** k)))

    # round-off floor of the recovery, scaled by the terms it subtracts
    scale = 1.0 + float(np.max(np.abs(bundle.x_paths))) + float(np.max(np.abs(bundle.v_paths))) / beta
    delta = ROUNDOFF_REL * scale
    atol = k * (float(np.max(np.abs(I0))) + delta) ** (k - 1) * delta

    records = [_closed_form_record(
        "i0_moment", samples, closed.value, f"E|I0(T)|^{k} = E|v0|^{k}(1-e^(-bT))^{k}/b^{k}", atol
    )]
    printed = _upper_bound_record("i0_printed_bound", samples, closed.bound, f"E|I0|^{k} <= 1/b^{k}")
    if not closed.normalized:
        printed = printed._replace(equation=printed.equation + " (needs E|v0|^k <= 1)")
    records.append(printed)
    return records


def validate_i1(source) -> List[ValidationRecord]:
    """E|I1(T)|^2 from the paths against (1 - e^{-2 beta T}) / (2 beta) and 1/(2 beta)."""
    bundle = _x_bundle(source)
    beta, T = bundle.config.beta, bundle.grid[-1]
    samples = i_terms(bundle, rule="left").I1[:, -1] ** 2
    closed = i1_second_moment(beta, T)
    return [
        _closed_form_record("i1_moment", samples, closed.value, "E|I1(T)|^2 = (1-e^(-2bT))/(2b)"),
        _upper_bound_record("i1_printed_bound", samples, closed.bound, "E|I1(T)|^2 <= 1/(2b)"),
    ]


def validate_lemma1(source, ledger: BoundLedger) -> ValidationRecord:
    """
    E[sup_t |x_t|^2] against H(T), uniform in beta > 1.

    Raises:
        ParameterError: beta <= 1
    """
    bundle = _x_bundle(source)
    beta = bundle.config.beta
    if not beta > 1:
        raise ParameterError(f"the uniform sup-moment bound needs beta > 1, got {beta}")
    est = estimate_error(np.max(bundle.x_paths ** 2, axis=1))
    H = ledger.H
    return ValidationRecord(
        "x_sup_moment_uniform", est.mean, H, H - est.mean, bool(est.mean <= H),
        "E sup|x|^2 <= H(T) = H0 e^(theta T^2)", est.confidence_halfwidth_95,
    )


def validate_first_moment(source, ledger: BoundLedger) -> ValidationRecord:
    """
    E|x_t| <= (sqrt(M) + E|v0|/beta + 1/sqrt(2 beta) + sqrt(t)) e^{2 kappa t} at every grid point.

    E|v0| is bounded by sqrt(E v0^2) of the configured initial law.
    """
    bundle = _x_bundle(source)
    beta = bundle.config.beta
    law = bundle.config.init
    v0_scale = math.sqrt(law.mean_v ** 2 + (law.var_v if law.kind == GAUSSIAN else 0.0))
    t = bundle.grid
    abs_x = np.abs(bundle.x_paths)
    n = abs_x.shape[0]
    lhs = abs_x.mean(axis=0)
    hw = 1.96 * abs_x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(lhs)
    rhs = (math.sqrt(ledger.M) + v0_scale / beta + 1.0 / math.sqrt(2.0 * beta) + np.sqrt(t)) \
        * np.exp(2.0 * ledger.kappa * t)
    slack = rhs + BOUND_HALFWIDTHS * hw - lhs
    worst = int(np.argmin(slack))
    return ValidationRecord(
        "x_first_moment", float(lhs[worst]), float(rhs[worst]), float(rhs[worst] - lhs[worst]),
        bool(np.all(slack >= 0)),
        "E|x_t| <= (sqrt(M) + E|v0|/b + 1/sqrt(2b) + sqrt(t)) e^(2 kappa t)", float(hw[worst]),
    )


def validate_i2(source, ledger: BoundLedger, sharp: bool = False,
                rule: str = "trapezoid") -> ValidationRecord:
    """E[sup_t |I2|^2] against (kappa^2/beta) T H e^{theta T^2} (or the sharp variant)."""
    bundle = _x_bundle(source)
    beta = bundle.config.beta
    samples = np.max(i_terms(bundle, rule=rule).I2 ** 2, axis=1)
    rhs = ledger.i2_bound(beta, sharp=sharp)
    if sharp:
        return _upper_bound_record("i2_sup_moment_sharp", samples, rhs, "E sup|I2|^2 <= (k^2/b) T H")
    return _upper_bound_record("i2_sup_moment", samples, rhs, "E sup|I2|^2 <= (k^2/b) T H e^(theta T^2)")


def i2_sup_moment(source, rule: str = "trapezoid"):
    """Monte-Carlo estimate of E[sup_t |I2|^2]."""
    return estimate_error(np.max(i_terms(source, rule=rule).I2 ** 2, axis=1))


def validate_i_sum(source, ledger: BoundLedger) -> ValidationRecord:
    """sum_i E sup|I_i|^2 against Lambda(T) / beta."""
    bundle = _x_bundle(source)
    beta = bundle.config.beta
    terms = i_terms(bundle)
    estimates = [estimate_error(np.max(I ** 2, axis=1)) for I in terms]
    lhs = sum(e.mean for e in estimates)
    hw = math.sqrt(sum(e.confidence_halfwidth_95 ** 2 for e in estimates))
    rhs = _exp(ledger.log_Lambda - math.log(beta))
    return ValidationRecord(
        "i_terms_sup_sum", lhs, rhs, rhs - lhs, bool(lhs <= rhs + BOUND_HALFWIDTHS * hw),
        "sum_i E sup|I_i|^2 <= Lambda(T)/b", hw,
    )


def brownian_paths(run: CoupledRun) -> np.ndarray:
    """Driving Brownian paths recovered from the limit system's Euler recursion."""
    yb = run.y_bundle
    kernel = run.config.kernel
    if yb.grid.size < 2:
        return np.zeros_like(yb.x_paths)
    h = yb.grid[1] - yb.grid[0]
    drift = kernel(yb.x_paths[:, :-1] - yb.mu_paths[None, :-1]) * h
    B = np.zeros_like(yb.x_paths)
    B[:, 1:] = yb.x_paths[:, 1:] - yb.x_paths[:, :1] - np.cumsum(drift, axis=1)
    return B


def validate_doob(run: CoupledRun) -> ValidationRecord:
    """E sup_t |B_t|^2 <= 4T for the shared driving noise."""
    T = run.y_bundle.grid[-1]
    samples = np.max(brownian_paths(run) ** 2, axis=1)
    return _upper_bound_record("brownian_sup_moment", samples, 4.0 * T, "E sup|B|^2 <= 4 E|B_T|^2 = 4T")


def validate_limit_moment(run: CoupledRun) -> ValidationRecord:
    """E sup_t |y_t|^2 is finite."""
    est = estimate_error(np.max(run.y_bundle.x_paths ** 2, axis=1))
    return ValidationRecord(
        "y_sup_moment_finite", est.mean, math.inf, math.inf, bool(math.isfinite(est.mean)),
        "E sup|y|^2 < inf", est.confidence_halfwidth_95,
    )


def validate_run(run: CoupledRun, ledger: BoundLedger) -> List[ValidationRecord]:
    """Every pathwise check that applies to one coupled run."""
    records = []
    records += validate_i0(run)
    records += validate_i1(run)
    if run.config.beta > 1:
        records.append(validate_lemma1(run, ledger))
    records.append(validate_first_moment(run, ledger))
    records.append(validate_i2(run, ledger))
    records.append(validate_i2(run, ledger, sharp=True))
    records.append(validate_i_sum(run, ledger))
    records.append(validate_doob(run))
    records.append(validate_limit_moment(run))
    beta = run.config.beta
    return [r._replace(name=f"{r.name}[beta={beta:g}]") for r in records]


VALIDATION_COLUMNS = ["name", "lhs", "rhs", "margin", "passes", "equation"]


def validations_frame(records: Iterable[ValidationRecord]) -> pd.DataFrame:
    rows = [{c: getattr(r, c) for c in VALIDATION_COLUMNS} for r in records]
    return pd.DataFrame(rows, columns=VALIDATION_COLUMNS)


def write_validations_csv(records: Iterable[ValidationRecord], path) -> None:
    validations_frame(records).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
