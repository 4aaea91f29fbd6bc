#!/usr/bin/env python
"""
Quick installation and sanity check for the Smoluchowski-Kramers lab.

Run this after installation to verify everything works.
"""

import sys


def check_imports():
    """Test that all required modules can be imported."""
    print("Testing imports...")
    for name in ("numpy", "scipy", "pandas"):
        try:
            __import__(name)
            print(f"  ✓ {name}")
        except ImportError as e:
            print(f"  ✗ {name}: {e}")
            return False

    try:
        import bounds, coupling, ensemble, experiments, kernels, noise, scaling  # noqa: F401
        print("  ✓ lab modules")
    except ImportError as e:
        print(f"  ✗ lab modules: {e}")
        return False

    return True


def check_basic_functionality():
    """Test basic functionality of the code."""
    print("\nTesting basic functionality...")

    try:
        import numpy as np
        from bounds import compute_ledger
        from coupling import coupled_simulate, estimate_error
        from ensemble import InitialLaw, SimConfig
        from kernels import linear_kernel, zero_kernel
        from noise import step_covariance

        # Test 1: step covariance
        model = step_covariance(10.0, 0.1)
        if np.allclose(model.factor @ model.factor.T, model.cov, atol=1e-12):
            print("  ✓ Step covariance factor reproduces the covariance")
        else:
            print("  ✗ Step covariance factor incorrect")
            return False

        # Test 2: drift-free ledger
        ledger = compute_ledger(1.0, 0.0, 1.0)
        if abs(ledger.theorem_bound(10.0) - 0.75) < 1e-12:
            print("  ✓ Theorem bound 7.5 / beta for kappa = 0")
        else:
            print(f"  ✗ Theorem bound incorrect: {ledger.theorem_bound(10.0)}")
            return False

        # Test 3: a small coupled run
        config = SimConfig(beta=100.0, kernel=linear_kernel(1.0), T=1.0, n_steps=50,
                           n_particles=200, init=InitialLaw(), seed=1)
        est = estimate_error(coupled_simulate(config).sup_sq_errors)
        if 0.0 < est.mean < compute_ledger(1.0, 1.0, 1.0).theorem_bound(100.0):
            print(f"  ✓ Coupled run: E sup|x - y|^2 = {est.mean:.3e}")
        else:
            print(f"  ✗ Coupled run gave {est.mean}")
            return False

        # Test 4: kernel guard
        from bounds import validate_kernel
        if validate_kernel(zero_kernel()).passes:
            print("  ✓ Lipschitz guard")
        else:
            print("  ✗ Lipschitz guard failed on the zero kernel")
            return False

        return True

    except Exception as e:
        print(f"  ✗ Error during testing: {e}")
        import traceback
        traceback.print_exc()
        return False


def check_verification_script():
    """Test that the verification script can be imported."""
    print("\nTesting verification script...")
    try:
        from verify_results import build_parser
        print("  ✓ verify_results module imports successfully")

        args = build_parser().parse_args(["simulate", "configs/minimal.json"])
        print(f"  ✓ Parser accepts '{args.command}'")

        return True
    except Exception as e:
        print(f"  ✗ Error: {e}")
        return False


def test_imports():
    assert check_imports()


def test_basic_functionality():
    assert check_basic_functionality()


def test_verification_script():
    assert check_verification_script()


def main():
    """Run all tests."""
    print("=" * 70)
    print("  Smoluchowski-Kramers Lab - Installation Test")
    print("=" * 70)

    all_passed = True

    if not check_imports():
        all_passed = False
        print("\n✗ Import test FAILED")
        print("\nPlease install missing dependencies:")
        print("  pip install -r requirements.txt")
    else:
        print("\n✓ Import test PASSED")

    if all_passed:
        if not check_basic_functionality():
            all_passed = False
            print("\n✗ Functionality test FAILED")
        else:
            print("\n✓ Functionality test PASSED")

    if all_passed:
        if not check_verification_script():
            all_passed = False
            print("\n✗ Verification script test FAILED")
        else:
            print("\n✓ Verification script test PASSED")

    print("\n" + "=" * 70)
    if all_passed:
        print("  ✓ ALL TESTS PASSED")
        print("\nInstallation successful! You can now:")
        print("  1. Run the minimal simulation: python verify_results.py simulate configs/minimal.json")
        print("  2. Run the bound checks: python verify_results.py validate-bounds configs/bounds.json")
        print("  3. Run the test suite: pytest")
    else:
        print("  ✗ SOME TESTS FAILED")
        print("\nPlease check the errors above and:")
        print("  1. Install missing dependencies: pip install -r requirements.txt")
        print("  2. Verify Python version >= 3.8: python --version")
        print("  3. Check for error messages above")
    print("=" * 70)

    return 0 if all_passed else 1


if __name__ == "__main__":
    sys.exit(main())
