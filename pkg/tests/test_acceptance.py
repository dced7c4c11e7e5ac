"""End-to-end acceptance gate, one test per criterion, at the stated tolerances."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from zodpo.config import build_problem, load_config
from zodpo.consensus import CommGraph, explicit_weights
from zodpo.engine import ZodpoConfig, global_cost_est, sample_usphere, sampling_error_level, zodpo_run
from zodpo.harness import run, run_trial, summarize, trial_seeds
from zodpo.hvac import settle_time, temperature_rollout
from zodpo.lq import DecentralizedPolicy, LinearSystem, ObservationPattern, QuadraticCost, global_gain, simulate
from zodpo.oracle import (
    build_quad_form,
    cost_weight,
    descend,
    exact_cost,
    fd_gradient,
    solve_dlyap,
)
from zodpo.selftest import random_stable_instance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

CYCLE_W = 0.5 * np.eye(4) + 0.25 * (np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1))


def test_c1_oracle_matches_long_run_average(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    T, batches = 100_000, 100
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        N = int(rng.integers(1, 4))
        system, pattern, cost, policy = random_stable_instance(rng, n=n, N=N)
        J = exact_cost(system, policy, pattern, cost)
        # start in the stationary law so the time average has no transient
        sigma_inf = solve_dlyap(system.A + system.B @ global_gain(policy, pattern), system.sigma_w).sigma_inf
        x0 = rng.multivariate_normal(np.zeros(n), sigma_inf)
        w = rng.multivariate_normal(np.zeros(n), system.sigma_w, size=T)
        traj = simulate(system, policy, pattern, cost, x0, T, noise=w)
        avg = traj.local_costs[1:].mean(axis=1)
        batch_means = avg.reshape(batches, -1).mean(axis=1)
        se = batch_means.std(ddof=1) / math.sqrt(batches)
        worst = max(worst, abs(avg.mean() - J) / se)
    elapsed = time.perf_counter() - start
    passed = worst <= 3.0 and elapsed < 30
    acceptance(1, passed, f"max |mean - J| / SE = {worst:.2f} (tol 3) over 20 instances, {elapsed:.1f}s (limit 30s)")
    assert passed


def test_c2_quadratic_gaussian_identity(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    system, pattern, cost, policy = random_stable_instance(rng, n=2, N=2)
    W = explicit_weights([[0.75, 0.25], [0.25, 0.75]], CommGraph.complete(2))
    QK = cost_weight(policy, pattern, cost, system.n)
    T_J = 5
    worst = 0.0
    for gamma in (0.0, W.rho_w, 1.0):
        form = build_quad_form(system, policy, pattern, cost, T_J, gamma)
        for _ in range(100):
            w = rng.multivariate_normal(np.zeros(2), system.sigma_w, size=T_J)
            x = simulate(system, policy, pattern, cost, np.zeros(2), T_J, noise=w).states
            direct = sum(gamma ** (T_J - t) * x[t] @ QK @ x[t] for t in range(1, T_J + 1))
            worst = max(worst, abs(form.value(w) - direct) / abs(direct))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-8 and elapsed < 5
    acceptance(2, passed, f"max relative gap {worst:.2e} (tol 1e-8), {elapsed:.2f}s (limit 5s)")
    assert passed


def test_c3_sampling_bounds_and_uniformity(acceptance):
    start = time.perf_counter()
    W = explicit_weights(CYCLE_W, CommGraph.cycle(4))
    T_S = next(t for t in range(1, 100) if sampling_error_level(W, t) <= 0.1)
    level = sampling_error_level(W, T_S)
    shapes = [(1, 2)] * 4
    n_K = 8
    draws = 10_000
    rng = np.random.default_rng(3)
    norm_viol = dev_viol = 0
    exact = np.empty((draws, n_K))
    for k in range(draws):
        d = sample_usphere(shapes, W, T_S, rng)
        if np.sum(d.vector**2) > (1 + level) ** 2:
            norm_viol += 1
        if any(np.linalg.norm(b - b0) > level * np.linalg.norm(b0) for b, b0 in zip(d.blocks, d.exact_blocks)):
            dev_viol += 1
        exact[k] = d.exact_vector
    unit = np.max(np.abs(np.linalg.norm(exact, axis=1) - 1.0))
    mean_ok = np.all(np.abs(exact.mean(axis=0)) <= 4 / math.sqrt(draws))
    sq = exact**2
    z2 = np.abs(sq.mean(axis=0) - 1 / n_K) / (sq.std(axis=0, ddof=1) / math.sqrt(draws))
    elapsed = time.perf_counter() - start
    passed = norm_viol == 0 and dev_viol == 0 and unit <= 1e-12 and mean_ok and np.all(z2 <= 5) and elapsed < 10
    acceptance(
        3,
        passed,
        f"T_S={T_S} level={level:.4f}; violations norm={norm_viol} deviation={dev_viol}; "
        f"max second-moment z={z2.max():.2f} (tol 5); {elapsed:.1f}s (limit 10s)",
    )
    assert passed


def test_c4_cost_estimator_bias_shrinks(acceptance):
    start = time.perf_counter()
    system = LinearSystem(np.diag([0.9, 0.9]), np.eye(2), np.eye(2))
    pattern = ObservationPattern(2, ((0,), (1,)), (1, 1))
    cost = QuadraticCost((1.9 * np.eye(2), 0.1 * np.eye(2)), (0.5 * np.eye(2), 0.5 * np.eye(2)))
    policy = DecentralizedPolicy((np.array([[-0.1]]), np.array([[-0.1]])))
    W = explicit_weights([[0.975, 0.025], [0.025, 0.975]], CommGraph.complete(2))
    J = exact_cost(system, policy, pattern, cost)
    stats = {}
    for T_J in (200, 800):
        mu = np.array(
            [
                global_cost_est(system, policy, pattern, cost, W, T_J, np.random.default_rng([T_J, k]), 1e6).mu
                for k in range(400)
            ]
        )
        stats[T_J] = (np.abs(mu.mean(axis=0) - J), np.mean((mu - J) ** 2, axis=0))
    bias200, mse200 = stats[200]
    bias800, mse800 = stats[800]
    elapsed = time.perf_counter() - start
    passed = bool(np.all(bias800 < bias200) and np.all(mse800 < mse200) and elapsed < 60)
    acceptance(
        4,
        passed,
        f"bias T_J=200 {np.round(bias200, 4).tolist()} -> 800 {np.round(bias800, 4).tolist()}; "
        f"MSE {np.round(mse200, 3).tolist()} -> {np.round(mse800, 3).tolist()}; {elapsed:.1f}s (limit 60s)",
    )
    assert passed


@pytest.mark.slow
def test_c5_zero_order_estimator_matches_gradient(acceptance):
    start = time.perf_counter()
    system = LinearSystem([[0.5, 0.2], [0.1, 0.4]], np.eye(2), np.eye(2))
    pattern = ObservationPattern(2, ((0,), (1,)), (1, 1))
    cost = QuadraticCost((np.diag([1.0, 0.2]), np.diag([0.2, 1.0])), (np.diag([1.0, 0.0]), np.diag([0.0, 1.0])))
    policy = DecentralizedPolicy((np.array([[-0.2]]), np.array([[-0.1]])))
    k = policy.vectorize()
    grad = fd_gradient(system, policy, pattern, cost)
    rng = np.random.default_rng(5)
    M = 100_000
    bias = {}
    for r in (0.2, 0.1):
        # randomly rotated equally spaced directions: an unbiased stratified
        # sample of the uniform law on the circle
        theta = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(M) / M
        D = np.column_stack([np.cos(theta), np.sin(theta)])
        J = np.array([exact_cost(system, policy.with_vector(k + r * d), pattern, cost) for d in D])
        G = (k.size / r) * (J[:, None] * D).mean(axis=0)
        bias[r] = float(np.linalg.norm(G - grad))
    ratio = bias[0.2] / bias[0.1]
    C = bias[0.2] / 0.2
    tol = max(0.05 * np.linalg.norm(grad), C * 0.1)
    elapsed = time.perf_counter() - start
    passed = bias[0.1] <= tol and ratio >= 1.5 and elapsed < 60
    acceptance(
        5,
        passed,
        f"|avg G - fd| r=0.2: {bias[0.2]:.4f}, r=0.1: {bias[0.1]:.4f} (tol {tol:.4f}); "
        f"shrink x{ratio:.2f} (need 1.5); {elapsed:.1f}s (limit 60s)",
    )
    assert passed


@pytest.mark.slow
def test_c6_full_observation_reaches_lqr_cost(acceptance):
    start = time.perf_counter()
    system = LinearSystem([[0.5]], [[1.0]], [[1.0]])
    pattern = ObservationPattern.full(1, 1)
    cost = QuadraticCost((np.eye(1),), (np.eye(1),))
    W = explicit_weights([[1.0]], CommGraph(1, frozenset()))
    K0 = DecentralizedPolicy.zeros(pattern)
    J_star = descend(system, pattern, cost, K0, step=0.5, iters=500).costs[-1]
    finals = []
    for seed in range(50):
        cfg = ZodpoConfig(r=0.1, eta=1e-3, j_bar=1e6, T_G=300, T_J=400, T_S=1, seed=seed)
        trace = zodpo_run(system, pattern, cost, W, cfg, K0)
        finals.append(exact_cost(system, trace.policy(300), pattern, cost))
    median = float(np.median(finals))
    gap = median / J_star - 1
    elapsed = time.perf_counter() - start
    passed = abs(gap) <= 0.10 and elapsed < 300
    acceptance(6, passed, f"median final J {median:.4f} vs J* {J_star:.4f} ({gap:+.1%}, tol 10%); {elapsed:.0f}s (limit 300s)")
    assert passed


class _Hvac:
    """Four-zone learning runs shared by criteria 7, 8 and 9."""

    def __init__(self):
        self.cfg = load_config(CONFIGS / "four_zone.json")
        self.seeds = trial_seeds(self.cfg.seed, 50)
        self.traces = {}
        self.elapsed = {}
        for T_J in (300, 50):
            cfg = self.cfg.model_copy(update={"zodpo": self.cfg.zodpo.model_copy(update={"T_J": T_J, "T_G": 300})})
            t0 = time.perf_counter()
            traces, times = [], []
            for s in self.seeds:
                t1 = time.perf_counter()
                traces.append(run_trial(cfg, s))
                times.append(time.perf_counter() - t1)
            self.traces[T_J] = traces
            self.elapsed[T_J] = (time.perf_counter() - t0, times)
        self.problem = build_problem(self.cfg).hvac


@pytest.fixture(scope="module")
def hvac_runs():
    return _Hvac()


@pytest.mark.slow
def test_c7_hvac_temperatures_settle(acceptance, hvac_runs):
    start = time.perf_counter()
    prob = hvac_runs.problem
    traces = hvac_runs.traces[300][:20]
    learn_time = sum(hvac_runs.elapsed[300][1][:20])
    zone_means, settle = [], {50: [], 250: []}
    for k, trace in enumerate(traces):
        for s in (50, 250):
            traj = temperature_rollout(prob, trace.policy(s), 300, x0=np.zeros(4), seed=10_000 + k)
            settle[s].append(settle_time(traj.states, 22.0, band=2.0))
            if s == 250:
                zone_means.append(traj.states[-200:].mean(axis=0))
    zone_means = np.array(zone_means)
    med50, med250 = float(np.median(settle[50])), float(np.median(settle[250]))
    elapsed = time.perf_counter() - start + learn_time
    in_band = bool(np.all((zone_means >= 20) & (zone_means <= 24)))
    passed = in_band and med250 < med50 and elapsed < 600
    acceptance(
        7,
        passed,
        f"zone means at T_G=250 in [{zone_means.min():.2f}, {zone_means.max():.2f}] (need [20, 24]); "
        f"median settle T_G=50: {med50:.0f}, T_G=250: {med250:.0f} steps; {elapsed:.0f}s (limit 600s)",
    )
    assert passed


@pytest.mark.slow
def test_c8_cost_trend_over_iterations_and_horizon(acceptance, hvac_runs):
    means = {}
    for T_J in (50, 300):
        costs = np.array([t.oracle_costs for t in hvac_runs.traces[T_J]])
        stable = np.array([[1.0 if r.stable else 0.0 for r in t.rows] for t in hvac_runs.traces[T_J]])
        rows = summarize(costs, stable, [50, 300])
        means[T_J] = (rows[0].mean_cost, rows[1].mean_cost, rows[1].frac_unstable)
    elapsed = hvac_runs.elapsed[300][0] + hvac_runs.elapsed[50][0]
    decreasing = all(means[T][1] < means[T][0] for T in (50, 300))
    passed = decreasing and means[300][1] <= means[50][1] and elapsed < 900
    acceptance(
        8,
        passed,
        f"mean J at T_G=50/300: T_J=50 {means[50][0]:.3f}/{means[50][1]:.3f}, "
        f"T_J=300 {means[300][0]:.3f}/{means[300][1]:.3f}; {elapsed:.0f}s (limit 900s)",
    )
    assert passed


@pytest.mark.slow
def test_c9_stability_during_learning(acceptance, hvac_runs):
    traces = hvac_runs.traces[300][:20]
    ok = [all(r.stable for r in t.rows[:251]) for t in traces]
    worst = max(max(r.spectral_radius for r in t.rows[:251]) for t in traces)
    frac = float(np.mean(ok))
    passed = frac >= 0.95
    acceptance(9, passed, f"{sum(ok)}/{len(ok)} seeds stable for every s <= 250 (need 95%); max spectral radius {worst:.3f}")
    assert passed


def test_c10_determinism(acceptance, tmp_path):
    cfg = load_config(CONFIGS / "four_zone.json")
    cfg = cfg.model_copy(
        update={"trials": 3, "checkpoints": None, "zodpo": cfg.zodpo.model_copy(update={"T_G": 20, "T_J": 100})}
    )
    a = run(cfg, tmp_path / "a", jobs=1)
    b = run(cfg, tmp_path / "b", jobs=2)
    same = all(pa.read_bytes() == pb.read_bytes() for pa, pb in zip(a.trace_files, b.trace_files))
    same = same and a.summary_file.read_bytes() == b.summary_file.read_bytes()
    passed = same and len(a.trace_files) == 3
    acceptance(10, passed, f"{len(a.trace_files)} trace files and summary byte-identical across repeat runs")
    assert passed
