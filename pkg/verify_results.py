"""
Command-line front end of the Smoluchowski-Kramers laboratory.

Subcommands:
    simulate         integrate the second-order system, write paths.csv
    converge         convergence-rate study over a beta grid
    validate-bounds  Monte-Carlo checks of every intermediate moment bound
    scaling-check    equality in law of the time-changed unscaled system

Exit status: 0 all checks passed, 1 a check failed, 2 config or usage
error, 3 runtime error (divergence, conditioning, I/O).
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from bounds import (
    ValidationRecord, compute_ledger, validate_kernel, validate_lemma1, validate_run,
    write_validations_csv
)
from config import (
    LabConfig, RunManifest, ScalingSection, config_to_dict, load_config, worker_count, write_manifest
)
from coupling import coupled_simulate, write_errors_csv
from ensemble import PathBundle, simulate, write_paths_csv
from errors import ConfigError, LabError, ParameterError
from experiments import (
    SLOPE_BAND, check_grid_insensitivity, emit_report, n_steps_for, run_convergence_study,
    study_from_config
)
from scaling import distribution_match, match_records, time_change, unscaled_simulate

logger = logging.getLogger("verify_results")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _beta_tag(beta: float) -> str:
    return f"beta{beta:g}"


class ResultVerifier:
    """Runs one subcommand and keeps the pass/fail tally."""

    def __init__(self, cfg: LabConfig, output_dir: Path, workers: int = 1, verbose: bool = True):
        self.cfg = cfg
        self.output_dir = Path(output_dir)
        self.workers = workers
        self.verbose = verbose
        self.passed = 0
        self.failed = 0
        self.records: List[ValidationRecord] = []

    def print_header(self, text: str):
        """Print section header."""
        if self.verbose:
            print("\n" + "=" * 70)
            print(f"  {text}")
            print("=" * 70)

    def print_result(self, test_name: str, passed: bool, details: str = ""):
        """Print test result."""
        if self.verbose:
            status = "✓ PASS" if passed else "✗ FAIL"
            print(f"\n[{status}] {test_name}")
            if details:
                print(f"  {details}")

        if passed:
            self.passed += 1
        else:
            self.failed += 1

    def print_record(self, record: ValidationRecord):
        self.records.append(record)
        self.print_result(
            record.name,
            record.passes,
            f"{record.lhs:.6g} vs {record.rhs:.6g}  ({record.equation})"
        )

    def print_summary(self):
        self.print_header("VERIFICATION SUMMARY")
        if not self.verbose:
            return
        total = self.passed + self.failed
        print(f"\nTotal checks: {total}")
        print(f"Passed: {self.passed}")
        print(f"Failed: {self.failed}")
        if total:
            print(f"Success rate: {100 * self.passed / total:.1f}%")
        if self.failed == 0:
            print("\n✓ All verifications passed!")
        else:
            print(f"\n✗ {self.failed} verification(s) failed")
        print("=" * 70 + "\n")

    def _manifest(self, subcommand: str) -> RunManifest:
        return RunManifest(subcommand=subcommand, config=config_to_dict(self.cfg), seed=self.cfg.sim.seed)

    def prepare(self, command: str):
        """
        Checks that need the whole config before any run starts.

        Raises:
            ConfigError: a section the subcommand needs is missing
            ParameterError: the study settings are inconsistent
        """
        if command == 'converge':
            study = study_from_config(self.cfg, self.workers)
            study.validate()
            for beta in study.beta_grid:
                study.base.with_beta(beta, n_steps_for(study, beta)).validate()
        elif command == 'scaling-check':
            self._scaling_section()

    def _scaling_section(self) -> ScalingSection:
        if self.cfg.scaling is None:
            raise ConfigError("missing section (needed by scaling-check)", field="scaling")
        return self.cfg.scaling

    # --- subcommands --------------------------------------------------------

    def cmd_simulate(self) -> bool:
        """Second-order paths for every configured beta, with the uniform sup-moment check where it applies."""
        self.print_header("SIMULATE: scaled second-order system")
        manifest = self._manifest("simulate")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        betas = self.cfg.sim.betas
        ledger = compute_ledger(self.cfg.init.M, self.cfg.build_kernel().kappa, self.cfg.sim.T)

        for beta in betas:
            bundle = simulate(self.cfg.sim_config(beta, self.workers))
            name = "paths.csv" if len(betas) == 1 else f"paths_{_beta_tag(beta)}.csv"
            path = self.output_dir / name
            write_paths_csv(bundle, path)
            manifest.add_output(path)
            if self.verbose:
                print(f"\nbeta = {beta:g}: {bundle.n_particles} particles, "
                      f"{bundle.grid.size} grid points -> {path}")
            if beta > 1 and bundle.n_particles >= 2:
                self.print_record(validate_lemma1(bundle, ledger)._replace(
                    name=f"x_sup_moment_uniform[beta={beta:g}]"))

        if self.records:
            path = self.output_dir / "validations.csv"
            write_validations_csv(self.records, path)
            manifest.add_output(path)
        write_manifest(manifest, self.output_dir / "manifest.json")
        return self.failed == 0

    def cmd_converge(self, grid_check: bool = False) -> bool:
        """Rate study over the beta grid."""
        self.print_header("CONVERGE: E sup|x^beta - y|^2 against beta")
        study = study_from_config(self.cfg, self.workers)
        base = study.base
        ledger = compute_ledger(base.init.M, base.kernel.kappa, base.T)
        manifest = self._manifest("converge")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        def keep_errors(run):
            path = self.output_dir / f"errors_{_beta_tag(run.config.beta)}.csv"
            write_errors_csv(run, path)
            manifest.add_output(path)

        fit = run_convergence_study(study, ledger, on_run=keep_errors)

        if self.verbose:
            print(f"\n{'beta':>10} {'error':>12} {'ci':>10} {'bound (printed)':>16} {'bound (sharp)':>14}")
            for r in fit.per_beta:
                print(f"{r.beta:>10g} {r.error_mean:>12.4e} {r.ci_halfwidth:>10.2e} "
                      f"{r.theorem_bound_as_printed:>16.4e} {r.theorem_bound_sharp:>14.4e}")

        self.print_result(
            "Log-log slope",
            fit.slope_passes,
            f"slope = {fit.slope:.3f} (weighted {fit.weighted_slope:.3f}), "
            f"band [{SLOPE_BAND[0]}, {SLOPE_BAND[1]}], r^2 = {fit.r_squared:.3f}"
        )
        self.print_result(
            "Error below the printed bound",
            fit.bound_dominance,
            f"largest ratio error/bound = "
            f"{max(r.error_mean / r.theorem_bound_as_printed for r in fit.per_beta):.3e}"
        )

        check = None
        if grid_check:
            check = check_grid_insensitivity(study)
            self.print_result(
                f"Grid insensitivity at beta={check.beta:g}",
                check.passes,
                f"n_steps {check.n_steps}: {check.error_coarse:.4e}, "
                f"{2 * check.n_steps}: {check.error_fine:.4e}, halfwidth {check.halfwidth:.2e}"
            )

        emit_report(fit, ledger, [], self.output_dir, manifest, check)
        return self.failed == 0

    def cmd_validate_bounds(self) -> bool:
        """Lipschitz guard and every moment bound, per configured beta."""
        self.print_header("VALIDATE BOUNDS")
        kernel = self.cfg.build_kernel()
        ledger = compute_ledger(self.cfg.init.M, kernel.kappa, self.cfg.sim.T)
        manifest = self._manifest("validate-bounds")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        if self.verbose:
            print(f"\nM = {ledger.M:g}, kappa = {ledger.kappa:g}, T = {ledger.T:g}")
            print(f"theta = {ledger.theta:g}, D = {ledger.D:g}, H0 = {ledger.H0:g}")
            print(f"H = {ledger.H:.6g}, Lambda = {ledger.Lambda:.6g}"
                  + ("  (overflow)" if ledger.overflow else ""))

        self.print_record(validate_kernel(kernel))

        for beta in self.cfg.sim.betas:
            self.print_header(f"beta = {beta:g}")
            run = coupled_simulate(self.cfg.sim_config(beta, self.workers))
            for record in validate_run(run, ledger):
                self.print_record(record)

        path = self.output_dir / "validations.csv"
        write_validations_csv(self.records, path)
        manifest.add_output(path)
        write_manifest(manifest, self.output_dir / "manifest.json")
        return self.failed == 0

    def _transformed(self, gamma: float, seed: int) -> PathBundle:
        cfg = self.cfg
        n = cfg.scaling.n_particles or cfg.sim.n_particles
        bundle = unscaled_simulate(
            gamma, cfg.build_kernel(), cfg.sim.T, cfg.sim.n_steps, n, cfg.init, seed, self.workers
        )
        return time_change(bundle, gamma)

    def _direct(self) -> PathBundle:
        """beta-system started from (x0, sqrt(beta) v0), on an independent seed."""
        cfg = self.cfg
        sc = cfg.scaling
        scale = sc.beta ** 0.5
        law = cfg.init
        matched = replace(law, mean_v=scale * law.mean_v, var_v=scale * scale * law.var_v)
        matched = replace(matched, M=max(law.M, matched.second_moment))
        config = replace(
            cfg.sim_config(sc.beta, self.workers),
            init=matched,
            n_particles=sc.n_particles or cfg.sim.n_particles,
            seed=cfg.sim.seed + 1,
        )
        return simulate(config)

    def cmd_scaling_check(self) -> bool:
        """Transformed unscaled run against the direct beta run, plus the optional negative control."""
        sc = self._scaling_section()
        self.print_header(f"SCALING CHECK: gamma = {sc.gamma:g} against beta = {sc.beta:g}")
        manifest = self._manifest("scaling-check")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        direct = self._direct()
        report = distribution_match(self._transformed(sc.gamma, self.cfg.sim.seed), direct, sc.checkpoints)
        for record in match_records(report, f"scaling_gamma{sc.gamma:g}"):
            self.print_record(record)
        if self.verbose:
            for c in report.checkpoints:
                print(f"  t'={c.t:g}: velocity KS {c.v_ks_statistic:.4f} (information only)")

        if sc.mismatch_gamma is not None:
            control = distribution_match(
                self._transformed(sc.mismatch_gamma, self.cfg.sim.seed + 2), direct, sc.checkpoints
            )
            rejected = not control.passes
            worst = max(control.checkpoints, key=lambda c: c.ks_statistic)
            self.records.append(ValidationRecord(
                f"scaling_negative_control_gamma{sc.mismatch_gamma:g}",
                worst.ks_statistic, worst.ks_critical, worst.ks_statistic - worst.ks_critical,
                rejected, "mismatched transform must be rejected",
            ))
            self.print_result(
                f"Negative control gamma = {sc.mismatch_gamma:g} rejected",
                rejected,
                f"largest KS distance {worst.ks_statistic:.4f} (crit {worst.ks_critical:.4f})"
            )

        path = self.output_dir / "scaling.csv"
        write_validations_csv(self.records, path)
        manifest.add_output(path)
        write_manifest(manifest, self.output_dir / "manifest.json")
        return self.failed == 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Simulate the scaled Langevin system and verify its overdamped limit"
    )
    parser.add_argument(
        '--quiet',
        action='store_true',
        help='Suppress the detailed report'
    )
    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Debug logging'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    for name, help_text in [
        ('simulate', 'Integrate the second-order system and write its paths'),
        ('converge', 'Convergence-rate study over the beta grid'),
        ('validate-bounds', 'Check every moment bound against Monte-Carlo estimates'),
        ('scaling-check', 'Compare the time-changed unscaled system with the beta-system'),
    ]:
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument('config_file', help='JSON config file')
        cmd.add_argument('--output', default=None, help='Output directory (overrides output.dir)')
        if name == 'converge':
            cmd.add_argument(
                '--grid-check',
                action='store_true',
                help='Rerun the largest beta with twice the steps'
            )
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point with command-line interface."""
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    # ParameterError means a bad config only while the run is being prepared
    try:
        cfg = load_config(args.config_file)
        workers = worker_count()
        output_dir = Path(args.output or cfg.output_dir)
        verifier = ResultVerifier(cfg, output_dir, workers, verbose=not args.quiet)
        verifier.prepare(args.command)
    except (ConfigError, ParameterError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_CONFIG
    except (LabError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME

    try:
        if args.command == 'simulate':
            ok = verifier.cmd_simulate()
        elif args.command == 'converge':
            ok = verifier.cmd_converge(grid_check=args.grid_check)
        elif args.command == 'validate-bounds':
            ok = verifier.cmd_validate_bounds()
        else:
            ok = verifier.cmd_scaling_check()
    except (LabError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME

    verifier.print_summary()
    return EXIT_OK if ok else EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
