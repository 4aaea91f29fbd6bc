"""
Run configuration: JSON config files, the worker-count variable and the run manifest.

A config file has the sections

    kernel  {name, params, kappa}
    sim     {beta | beta_grid, T, n_steps, n_particles, seed, n_steps_policy}
    init    {kind, mean_x, mean_v, var_x, var_v, M}
    output  {dir}
    scaling {gamma, beta, mismatch_gamma, checkpoints, n_particles}   (optional)

Every field is checked on load; a bad entry raises ConfigError naming it as
"<section>.<field>".
"""

import json
import logging
import os
import platform
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import scipy

from ensemble import GAUSSIAN, POINT, InitialLaw, SimConfig
from errors import ConfigError, ParameterError
from kernels import BUILTIN_KERNELS, DriftKernel, make_kernel

logger = logging.getLogger(__name__)

__version__ = "0.1.0"

WORKERS_ENV = "SKLAB_WORKERS"
FIXED = "fixed"
SCALE_WITH_BETA = "scale-with-beta"
N_STEPS_POLICIES = (FIXED, SCALE_WITH_BETA)


@dataclass(frozen=True)
class KernelSection:
    name: str
    params: Dict[str, float] = field(default_factory=dict)
    kappa: Optional[float] = None


@dataclass(frozen=True)
class SimSection:
    T: float
    n_steps: int
    n_particles: int
    seed: int
    beta: Optional[float] = None
    beta_grid: Optional[Tuple[float, ...]] = None
    n_steps_policy: str = FIXED

    @property
    def betas(self) -> Tuple[float, ...]:
        return (self.beta,) if self.beta is not None else self.beta_grid


@dataclass(frozen=True)
class ScalingSection:
    gamma: float
    beta: float
    checkpoints: Tuple[float, ...]
    mismatch_gamma: Optional[float] = None
    n_particles: Optional[int] = None


@dataclass(frozen=True)
class LabConfig:
    kernel: KernelSection
    sim: SimSection
    init: InitialLaw
    output_dir: str = "results"
    scaling: Optional[ScalingSection] = None

    def build_kernel(self) -> DriftKernel:
        return make_kernel(self.kernel.name, self.kernel.params, self.kernel.kappa)

    def sim_config(self, beta: Optional[float] = None, workers: int = 1) -> SimConfig:
        """SimConfig at `beta` (default: the single or first configured beta)."""
        if beta is None:
            beta = self.sim.betas[0]
        return SimConfig(
            beta=beta,
            kernel=self.build_kernel(),
            T=self.sim.T,
            n_steps=self.sim.n_steps,
            n_particles=self.sim.n_particles,
            init=self.init,
            seed=self.sim.seed,
            workers=workers,
        )


# --- field readers ----------------------------------------------------------

def _section(doc: dict, name: str, required: bool = True) -> Optional[dict]:
    if name not in doc:
        if required:
            raise ConfigError("missing section", field=name)
        return None
    value = doc[name]
    if not isinstance(value, dict):
        raise ConfigError("section must be an object", field=name)
    return value


def _number(sec: dict, section: str, key: str, default=None, required: bool = True,
            positive: bool = False, non_negative: bool = False) -> Optional[float]:
    where = f"{section}.{key}"
    if key not in sec or sec[key] is None:
        if required and default is None:
            raise ConfigError("missing value", field=where)
        return default
    value = sec[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", field=where)
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError("must be finite", field=where)
    if positive and not value > 0:
        raise ConfigError(f"must be positive, got {value:g}", field=where)
    if non_negative and value < 0:
        raise ConfigError(f"must be non-negative, got {value:g}", field=where)
    return value


def _integer(sec: dict, section: str, key: str, minimum: int, default=None) -> int:
    where = f"{section}.{key}"
    if key not in sec:
        if default is None:
            raise ConfigError("missing value", field=where)
        return default
    value = sec[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", field=where)
    if value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", field=where)
    return value


def _number_list(sec: dict, section: str, key: str) -> Tuple[float, ...]:
    where = f"{section}.{key}"
    values = sec.get(key)
    if not isinstance(values, list) or not values:
        raise ConfigError("expected a non-empty list of numbers", field=where)
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not np.isfinite(v):
            raise ConfigError(f"expected finite numbers, got {v!r}", field=where)
    return tuple(float(v) for v in values)


def _parse_kernel(doc: dict) -> KernelSection:
    sec = _section(doc, "kernel")
    name = sec.get("name")
    if name not in BUILTIN_KERNELS:
        raise ConfigError(f"unknown kernel {name!r}, expected one of {sorted(BUILTIN_KERNELS)}",
                          field="kernel.name")
    params = sec.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("must be an object", field="kernel.params")
    params = {k: _number(params, "kernel.params", k) for k in params}
    kappa = _number(sec, "kernel", "kappa", required=False, non_negative=True)
    section = KernelSection(name=name, params=params, kappa=kappa)
    try:
        make_kernel(section.name, section.params, section.kappa)
    except ParameterError as exc:
        raise ConfigError(str(exc), field="kernel.params") from exc
    return section


def _parse_sim(doc: dict) -> SimSection:
    sec = _section(doc, "sim")
    beta = _number(sec, "sim", "beta", required=False, positive=True)
    beta_grid = None
    if "beta_grid" in sec:
        beta_grid = _number_list(sec, "sim", "beta_grid")
        for b in beta_grid:
            if not b > 0:
                raise ConfigError(f"entries must be positive, got {b:g}", field="sim.beta_grid")
    if beta is None and beta_grid is None:
        raise ConfigError("one of beta or beta_grid is required", field="sim.beta")
    if beta is not None and beta_grid is not None:
        raise ConfigError("give either beta or beta_grid, not both", field="sim.beta_grid")

    policy = sec.get("n_steps_policy", FIXED)
    if policy not in N_STEPS_POLICIES:
        raise ConfigError(f"expected one of {N_STEPS_POLICIES}, got {policy!r}", field="sim.n_steps_policy")

    return SimSection(
        T=_number(sec, "sim", "T", positive=True),
        n_steps=_integer(sec, "sim", "n_steps", 0),
        n_particles=_integer(sec, "sim", "n_particles", 1),
        seed=_integer(sec, "sim", "seed", 0),
        beta=beta,
        beta_grid=beta_grid,
        n_steps_policy=policy,
    )


def _parse_init(doc: dict) -> InitialLaw:
    sec = _section(doc, "init")
    kind = sec.get("kind", POINT)
    if kind not in (POINT, GAUSSIAN):
        raise ConfigError(f"expected '{POINT}' or '{GAUSSIAN}', got {kind!r}", field="init.kind")
    law = InitialLaw(
        kind=kind,
        mean_x=_number(sec, "init", "mean_x", default=0.0),
        mean_v=_number(sec, "init", "mean_v", default=0.0),
        var_x=_number(sec, "init", "var_x", default=0.0, non_negative=True),
        var_v=_number(sec, "init", "var_v", default=0.0, non_negative=True),
        M=_number(sec, "init", "M", positive=True),
    )
    try:
        law.validate()
    except ParameterError as exc:
        raise ConfigError(str(exc), field="init.M") from exc
    return law


def _parse_scaling(doc: dict) -> Optional[ScalingSection]:
    sec = _section(doc, "scaling", required=False)
    if sec is None:
        return None
    gamma = _number(sec, "scaling", "gamma", positive=True)
    beta = _number(sec, "scaling", "beta", default=gamma * gamma, positive=True)
    n_particles = None
    if "n_particles" in sec:
        n_particles = _integer(sec, "scaling", "n_particles", 2)
    return ScalingSection(
        gamma=gamma,
        beta=beta,
        checkpoints=_number_list(sec, "scaling", "checkpoints"),
        mismatch_gamma=_number(sec, "scaling", "mismatch_gamma", required=False, positive=True),
        n_particles=n_particles,
    )


def parse_config(doc: dict) -> LabConfig:
    """
    Build a LabConfig from a decoded JSON document.

    Raises:
        ConfigError: any missing or invalid field
    """
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    output = _section(doc, "output", required=False) or {}
    output_dir = output.get("dir", "results")
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError("must be a non-empty string", field="output.dir")

    cfg = LabConfig(
        kernel=_parse_kernel(doc),
        sim=_parse_sim(doc),
        init=_parse_init(doc),
        output_dir=output_dir,
        scaling=_parse_scaling(doc),
    )
    for beta in cfg.sim.betas:
        try:
            cfg.sim_config(beta).validate()
        except ParameterError as exc:
            raise ConfigError(str(exc), field="sim.n_steps") from exc
    return cfg


def load_config(path) -> LabConfig:
    """
    Read and parse a UTF-8 JSON config file.

    Raises:
        ConfigError: malformed JSON (with line number) or invalid field
        OSError: the file cannot be read
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from exc
    cfg = parse_config(doc)
    logger.debug("loaded config %s", path)
    return cfg


def config_to_dict(cfg: LabConfig) -> dict:
    """Echo a parsed config as a document that parse_config accepts."""
    kernel = {"name": cfg.kernel.name, "params": dict(cfg.kernel.params)}
    if cfg.kernel.kappa is not None:
        kernel["kappa"] = cfg.kernel.kappa

    sim = {
        "T": cfg.sim.T,
        "n_steps": cfg.sim.n_steps,
        "n_particles": cfg.sim.n_particles,
        "seed": cfg.sim.seed,
        "n_steps_policy": cfg.sim.n_steps_policy,
    }
    if cfg.sim.beta is not None:
        sim["beta"] = cfg.sim.beta
    else:
        sim["beta_grid"] = list(cfg.sim.beta_grid)

    law = cfg.init
    doc = {
        "kernel": kernel,
        "sim": sim,
        "init": {
            "kind": law.kind, "mean_x": law.mean_x, "mean_v": law.mean_v,
            "var_x": law.var_x, "var_v": law.var_v, "M": law.M,
        },
        "output": {"dir": cfg.output_dir},
    }
    if cfg.scaling is not None:
        sc = cfg.scaling
        scaling = {"gamma": sc.gamma, "beta": sc.beta, "checkpoints": list(sc.checkpoints)}
        if sc.mismatch_gamma is not None:
            scaling["mismatch_gamma"] = sc.mismatch_gamma
        if sc.n_particles is not None:
            scaling["n_particles"] = sc.n_particles
        doc["scaling"] = scaling
    return doc


def worker_count() -> int:
    """Threads for noise generation from SKLAB_WORKERS (default 1)."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw.strip() == "":
        return 1
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", field=WORKERS_ENV) from None
    if workers < 1:
        raise ConfigError(f"must be >= 1, got {workers}", field=WORKERS_ENV)
    return workers


# --- run manifest -----------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Everything needed to reproduce one subcommand invocation."""
    subcommand: str
    config: dict
    seed: int
    tool_version: str = __version__
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    outputs: List[str] = field(default_factory=list)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def as_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "tool_version": self.tool_version,
            "seed": self.seed,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
            },
            "started": self.started,
            "finished": self.finished,
            "outputs": self.outputs,
            "config": self.config,
        }


def write_manifest(manifest: RunManifest, path) -> Path:
    """Stamp the finish time, list the manifest itself and write it as JSON."""
    path = Path(path)
    manifest.finished = _now()
    if str(path) not in manifest.outputs:
        manifest.add_output(path)
    path.write_text(json.dumps(manifest.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
