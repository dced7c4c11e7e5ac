"""Fast numerical self-checks of the oracle and the sampling subroutine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .consensus import CommGraph, explicit_weights
from .engine import sample_usphere, sampling_error_level
from .lq import DecentralizedPolicy, LinearSystem, ObservationPattern, QuadraticCost, simulate
from .oracle import (
    _dlyap_direct,
    _dlyap_doubling,
    build_quad_form,
    closed_loop_matrix,
    cost_weight,
    exact_cost,
    fd_gradient,
    lyapunov_residual,
    spectral_radius,
)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_residual: float
    tolerance: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<28} {status}  max_residual={self.max_residual:.3e}  tol={self.tolerance:.1e}"


def random_stable_instance(rng: np.random.Generator, n: int = 2, N: int = 2, margin: float = 0.8):
    """Random plant with one scalar-input agent per state and a stabilizing local policy."""
    A = rng.normal(size=(n, n))
    A *= rng.uniform(0.6, 1.3) / max(spectral_radius(A), 1e-9)
    B = np.eye(n)[:, :N] if N <= n else rng.normal(size=(n, N))
    L = rng.normal(size=(n, n))
    sigma_w = L @ L.T + 0.5 * np.eye(n)
    system = LinearSystem(A, B, sigma_w)
    sets = tuple((i % n,) for i in range(N))
    pattern = ObservationPattern(n, sets, (1,) * N)
    Qs, Rs = [], []
    for _ in range(N):
        M = rng.normal(size=(n, n))
        Qs.append(M @ M.T / n + 0.1 * np.eye(n))
        Rs.append(np.diag(rng.uniform(0.1, 1.0, size=N)))
    cost = QuadraticCost(tuple(Qs), tuple(Rs))
    # shrink the plant until a random local policy gives the requested margin
    while True:
        policy = DecentralizedPolicy(tuple(rng.normal(scale=0.3, size=(1, 1)) for _ in range(N)))
        AK = closed_loop_matrix(system, policy, pattern)
        rho = spectral_radius(AK)
        if rho < margin:
            return system, pattern, cost, policy
        system = LinearSystem(0.9 * system.A, system.B, system.sigma_w)


def quad_form_suite(seed: int = 0, realizations: int = 100, T_J: int = 5) -> SuiteResult:
    rng = np.random.default_rng(seed)
    system, pattern, cost, policy = random_stable_instance(rng)
    W = explicit_weights(np.array([[0.75, 0.25], [0.25, 0.75]]), CommGraph.complete(2))
    QK = cost_weight(policy, pattern, cost, system.n)
    worst = 0.0
    for gamma in (0.0, W.rho_w, 1.0):
        form = build_quad_form(system, policy, pattern, cost, T_J, gamma)
        for _ in range(realizations):
            w = rng.multivariate_normal(np.zeros(system.n), system.sigma_w, size=T_J)
            traj = simulate(system, policy, pattern, cost, np.zeros(system.n), T_J, noise=w)
            x = traj.states[1:]
            direct = sum(gamma ** (T_J - t) * x[t - 1] @ QK @ x[t - 1] for t in range(1, T_J + 1))
            quad = form.value(w)
            worst = max(worst, abs(direct - quad) / max(abs(direct), 1e-300))
    return SuiteResult("quadratic_gaussian_identity", worst <= 1e-8, worst, 1e-8)


def lyapunov_suite(seed: int = 1, instances: int = 10) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 7))
        A = rng.normal(size=(n, n))
        A *= rng.uniform(0.3, 0.95) / spectral_radius(A)
        L = rng.normal(size=(n, n))
        S_w = L @ L.T + np.eye(n)
        S1 = _dlyap_direct(A, S_w)
        S2 = _dlyap_doubling(A, S_w)
        agree = np.linalg.norm(S1 - S2) / np.linalg.norm(S1)
        worst = max(worst, agree, lyapunov_residual(A, S_w, S1), lyapunov_residual(A, S_w, S2))
    return SuiteResult("lyapunov_residual", worst <= 1e-8, worst, 1e-8)


def fd_gradient_suite() -> SuiteResult:
    system = LinearSystem([[0.5]], [[1.0]], [[1.0]])
    pattern = ObservationPattern.full(1, 1)
    cost = QuadraticCost((np.eye(1),), (np.eye(1),))
    worst = 0.0
    for k in (-0.5, -0.2, 0.0, 0.2):
        policy = DecentralizedPolicy((np.array([[k]]),))
        g = fd_gradient(system, policy, pattern, cost)[0]
        # d/dk of (1 + k^2) / (1 - (0.5 + k)^2)
        a = 0.5 + k
        exact = (2 * k * (1 - a * a) + (1 + k * k) * 2 * a) / (1 - a * a) ** 2
        worst = max(worst, abs(g - exact))
        J = exact_cost(system, policy, pattern, cost)
        worst = max(worst, abs(J - (1 + k * k) / (1 - a * a)))
    return SuiteResult("fd_gradient", worst <= 1e-6, worst, 1e-6)


def sampling_suite(seed: int = 2, draws: int = 2000) -> SuiteResult:
    rng = np.random.default_rng(seed)
    W = explicit_weights(
        0.5 * np.eye(4) + 0.25 * (np.roll(np.eye(4), 1, axis=1) + np.roll(np.eye(4), -1, axis=1)),
        CommGraph.cycle(4),
    )
    T_S = 6
    level = sampling_error_level(W, T_S)
    shapes = [(1, 2)] * 4
    worst = 0.0
    for _ in range(draws):
        d = sample_usphere(shapes, W, T_S, rng)
        sq = sum(float(np.sum(b * b)) for b in d.blocks)
        worst = max(worst, sq - (1 + level) ** 2)
        for b, b0 in zip(d.blocks, d.exact_blocks):
            worst = max(worst, np.linalg.norm(b - b0) - level * np.linalg.norm(b0))
    return SuiteResult("sampling_bounds", worst <= 1e-12, max(worst, 0.0), 1e-12)


SUITES: dict[str, Callable[[], SuiteResult]] = {
    "quadratic_gaussian_identity": quad_form_suite,
    "lyapunov_residual": lyapunov_suite,
    "fd_gradient": fd_gradient_suite,
    "sampling_bounds": sampling_suite,
}


def selftest() -> list[SuiteResult]:
    return [suite() for suite in SUITES.values()]
