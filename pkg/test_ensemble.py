"""Tests for the particle integrators of the second-order and limit systems."""

import math
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.linalg import expm

from ensemble import (
    GAUSSIAN, LIMIT, SECOND_ORDER, Ensemble, InitialLaw, SimConfig, empirical_mean,
    euler_maruyama_step, exact_ou_step, initial_state, limit_step, simulate, write_paths_csv
)
from errors import DivergenceError, ParameterError
from kernels import BUILTIN_KERNELS, DriftKernel, linear_kernel, make_kernel, zero_kernel
from noise import NoiseSource


def make_config(beta=1.0, kernel=None, T=1.0, n_steps=10, n_particles=4,
                init=None, seed=42, workers=1):
    return SimConfig(
        beta=beta,
        kernel=kernel or zero_kernel(),
        T=T,
        n_steps=n_steps,
        n_particles=n_particles,
        init=init or InitialLaw(),
        seed=seed,
        workers=workers,
    )


def no_noise(n):
    return np.zeros((n, 3))


def test_single_step_reproduces_free_flight():
    t = 0.7
    cfg = make_config(beta=2.0, T=t, n_steps=1, n_particles=1)
    state = Ensemble.at(0.0, np.array([0.0]), np.array([1.0]))
    out = exact_ou_step(state, cfg, no_noise(1))
    assert out.x[0] == pytest.approx(0.5 * (1 - math.exp(-2 * t)), rel=1e-15)
    assert out.v[0] == pytest.approx(math.exp(-2 * t), rel=1e-15)
    assert out.t == t


def test_small_step_agrees_with_explicit_euler():
    h = 1e-8
    cfg = make_config(beta=2.0, kernel=linear_kernel(1.0), T=h, n_steps=1, n_particles=2)
    state = Ensemble.at(0.0, np.array([0.3, -0.1]), np.array([1.0, -0.5]))
    exact = exact_ou_step(state, cfg, no_noise(2))
    euler = euler_maruyama_step(state, cfg, np.zeros(2))
    np.testing.assert_allclose(exact.x - state.x, euler.x - state.x, rtol=1e-6)
    np.testing.assert_allclose(exact.v - state.v, euler.v - state.v, rtol=1e-6)


def test_deterministic_trajectory_matches_matrix_exponential():
    """Two mirrored particles keep mu = 0, so each solves x'' + beta x' + beta x = 0."""
    beta, T, n = 50.0, 1.0, 50_000
    cfg = make_config(beta=beta, kernel=linear_kernel(1.0), T=T, n_steps=n, n_particles=2)
    state = Ensemble.at(0.0, np.array([1.0, -1.0]), np.array([0.0, 0.0]))
    A = np.array([[0.0, 1.0], [-beta, -beta]])
    propagator = expm(A * cfg.h)
    ref = np.array([1.0, 0.0])
    worst = 0.0
    for k in range(n):
        state = exact_ou_step(state, cfg, no_noise(2), k)
        ref = propagator @ ref
        worst = max(worst, abs(state.x[0] - ref[0]))
    assert worst < 1e-4
    assert state.mu_hat == pytest.approx(0.0, abs=1e-15)


def test_euler_guard_and_zero_beta():
    cfg = make_config(beta=10.0, T=0.1, n_steps=1)
    state = Ensemble.at(0.0, np.zeros(4), np.ones(4))
    with pytest.raises(ParameterError):
        euler_maruyama_step(state, cfg, np.zeros(4))

    cfg = make_config(beta=0.0, T=0.5, n_steps=5)
    out = euler_maruyama_step(state, cfg, np.zeros(4))
    np.testing.assert_array_equal(out.v, state.v)
    np.testing.assert_allclose(out.x, 0.1 * np.ones(4))


def test_euler_and_exact_agree_at_small_step():
    cfg = make_config(beta=1.0, kernel=linear_kernel(1.0), n_steps=10_000, n_particles=20,
                      init=InitialLaw(GAUSSIAN, var_x=0.25, var_v=0.25))
    exact = simulate(cfg, scheme="exact")
    euler = simulate(cfg, scheme="euler")
    np.testing.assert_array_equal(exact.x_paths[:, 0], euler.x_paths[:, 0])
    assert np.max(np.abs(exact.x_paths - euler.x_paths)) < 1e-3


@pytest.mark.parametrize("name", sorted(BUILTIN_KERNELS))
def test_scheme_agreement_for_every_kernel(name):
    h = 0.01
    cfg = make_config(beta=1.0, kernel=make_kernel(name), n_steps=100, n_particles=20,
                      init=InitialLaw(GAUSSIAN, mean_x=0.5, var_x=0.25, var_v=0.25))
    exact = simulate(cfg, scheme="exact")
    euler = simulate(cfg, scheme="euler")
    assert np.max(np.abs(exact.x_paths - euler.x_paths)) <= 10 * h


def test_limit_without_drift_is_brownian_motion():
    n, h = 50, 0.02
    cfg = make_config(n_steps=n, n_particles=6, init=InitialLaw(GAUSSIAN, mean_x=1.0, var_x=0.5, M=2.0))
    bundle = simulate(cfg, LIMIT)
    dB = NoiseSource(cfg.seed).brownian(np.arange(6), h, 0, n)
    y0 = bundle.x_paths[:, :1]
    expected = np.concatenate([y0, y0 + np.cumsum(dB, axis=1)], axis=1)
    np.testing.assert_allclose(bundle.x_paths, expected, rtol=1e-13, atol=1e-13)
    assert bundle.v_paths is None


def test_limit_mean_is_conserved_by_linear_kernel():
    """With K(z) = -lam z the drift averages to zero, so mu moves only by the mean of dB."""
    N, n, T = 2000, 100, 1.0
    cfg = make_config(kernel=linear_kernel(1.0), T=T, n_steps=n, n_particles=N,
                      init=InitialLaw(GAUSSIAN, mean_x=0.3, var_x=0.25))
    bundle = simulate(cfg, LIMIT)
    B_T = NoiseSource(cfg.seed).brownian(np.arange(N), cfg.h, 0, n).sum(axis=1)
    drift = bundle.mu_paths[-1] - bundle.mu_paths[0]
    assert drift == pytest.approx(B_T.mean(), abs=1e-12)
    assert abs(drift) <= 5 * math.sqrt(T / N)


@pytest.mark.slow
def test_limit_stationary_variance():
    N, lam, T = 10_000, 1.0, 20.0
    cfg = make_config(kernel=linear_kernel(lam), T=T, n_steps=2000, n_particles=N)
    bundle = simulate(cfg, LIMIT)
    y_T = bundle.x_paths[:, -1]
    # mu performs a Brownian motion with variance T / N
    assert abs(bundle.mu_paths[-1] - bundle.mu_paths[0]) <= 5 * math.sqrt(T / N)
    assert y_T.var(ddof=1) == pytest.approx(1 / (2 * lam), rel=0.05)


def test_zero_steps_returns_initial_state():
    cfg = make_config(n_steps=0, init=InitialLaw(GAUSSIAN, var_x=0.1, var_v=0.1))
    bundle = simulate(cfg)
    assert bundle.grid.tolist() == [0.0]
    assert bundle.x_paths.shape == (4, 1)
    np.testing.assert_array_equal(bundle.x_paths[:, 0], initial_state(cfg).x)


def test_grid_is_uniform():
    bundle = simulate(make_config(T=2.0, n_steps=8))
    np.testing.assert_array_equal(bundle.grid, np.arange(9) * 0.25)


def test_worker_count_gives_identical_bundles():
    cfg = make_config(beta=30.0, kernel=make_kernel("tanh"), n_steps=300, n_particles=64,
                      init=InitialLaw(GAUSSIAN, var_x=0.3, var_v=0.3))
    a = simulate(cfg)
    b = simulate(replace(cfg, workers=8))
    np.testing.assert_array_equal(a.x_paths, b.x_paths)
    np.testing.assert_array_equal(a.v_paths, b.v_paths)
    np.testing.assert_array_equal(a.mu_paths, b.mu_paths)


def test_same_seed_same_bundle_new_seed_new_bundle():
    cfg = make_config(n_steps=20, init=InitialLaw(GAUSSIAN, var_x=0.2))
    np.testing.assert_array_equal(simulate(cfg).x_paths, simulate(cfg).x_paths)
    other = simulate(make_config(n_steps=20, seed=43, init=InitialLaw(GAUSSIAN, var_x=0.2)))
    assert not np.array_equal(simulate(cfg).x_paths, other.x_paths)


def test_step_is_exchangeable():
    cfg = make_config(beta=5.0, kernel=make_kernel("tanh"), T=0.1, n_steps=1, n_particles=5)
    rng = np.random.default_rng(0)
    x, v, noise = rng.normal(size=5), rng.normal(size=5), rng.normal(size=(5, 3))
    perm = np.array([3, 0, 4, 1, 2])
    out = exact_ou_step(Ensemble.at(0.0, x, v), cfg, noise)
    out_p = exact_ou_step(Ensemble.at(0.0, x[perm], v[perm]), cfg, noise[perm])
    np.testing.assert_array_equal(out_p.x, out.x[perm])
    np.testing.assert_array_equal(out_p.v, out.v[perm])
    assert out_p.mu_hat == out.mu_hat


def test_empirical_mean_accuracy():
    x = np.random.default_rng(1).normal(scale=1e3, size=10_001)
    assert abs(empirical_mean(x) - x.mean()) <= 1e-12 * x.size * np.max(np.abs(x))


def test_mean_field_follows_its_ode():
    beta, N = 4.0, 2000
    init = InitialLaw(GAUSSIAN, mean_x=0.2, mean_v=1.0, var_x=0.25, var_v=0.25, M=2.0)
    bundle = simulate(make_config(beta=beta, kernel=linear_kernel(1.0), n_steps=100,
                                  n_particles=N, init=init))
    mu_ode = 0.2 + 1.0 * (-np.expm1(-beta * bundle.grid)) / beta
    se = bundle.x_paths.std(axis=0, ddof=1) / math.sqrt(N)
    assert np.all(np.abs(bundle.mu_paths - mu_ode) <= 5 * se + 1e-12)


def test_stiff_step_keeps_stationary_velocity_variance():
    beta, N = 100.0, 10_000
    bundle = simulate(make_config(beta=beta, T=5.0, n_steps=5, n_particles=N))
    assert np.all(np.isfinite(bundle.x_paths))
    v = bundle.v_paths[:, -1]
    var_se = v.var(ddof=1) * math.sqrt(2.0 / (N - 1))
    assert abs(v.var(ddof=1) - beta / 2) <= 3 * var_se


def test_divergence_is_reported_with_location():
    bad = DriftKernel(eval=lambda z: np.where(z > 0, np.inf, 0.0), kappa=0.0, name="bad")
    cfg = make_config(kernel=bad, n_particles=3, init=InitialLaw(GAUSSIAN, var_x=1.0))
    with pytest.raises(DivergenceError) as info:
        simulate(cfg)
    assert info.value.system == SECOND_ORDER
    assert info.value.step == 0


def test_config_guards():
    with pytest.raises(ParameterError):
        simulate(make_config(kernel=linear_kernel(1.0), T=1.0, n_steps=5))  # h kappa = 0.2
    with pytest.raises(ParameterError):
        simulate(make_config(beta=-1.0))
    with pytest.raises(ParameterError):
        simulate(make_config(init=InitialLaw(GAUSSIAN, mean_v=2.0, M=1.0)))
    with pytest.raises(ParameterError):
        simulate(make_config(), system="third-order")
    with pytest.raises(ParameterError):
        limit_step(Ensemble.at(0.0, np.zeros(2)), linear_kernel(1.0), 0.5, np.zeros(2))


def test_initial_draws_use_their_own_domain():
    cfg = make_config(n_steps=1, n_particles=8, init=InitialLaw(GAUSSIAN, var_x=1.0, var_v=1.0, M=2.0))
    x0 = initial_state(cfg).x
    z = NoiseSource(cfg.seed).normals(np.arange(8), 0, 1)[:, 0, 0]
    assert not np.any(x0 == z)


def test_paths_csv_layout(tmp_path):
    bundle = simulate(make_config(n_steps=1, n_particles=1))
    path = tmp_path / "paths.csv"
    write_paths_csv(bundle, path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["t", "particle_id", "x", "v"]
    assert len(frame) == 2

    limit = simulate(make_config(n_steps=3, n_particles=2), LIMIT)
    write_paths_csv(limit, path)
    frame = pd.read_csv(path)
    assert len(frame) == 8
    assert frame["v"].isna().all()
