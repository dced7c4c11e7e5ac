"""Model-based ground truth for the decentralized LQ objective.

Everything here uses the plant matrices directly and is meant for
verification and baselines, never inside the model-free learner.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InstabilityError
from .lq import (
    DecentralizedPolicy,
    LinearSystem,
    ObservationPattern,
    closed_loop,
    global_gain,
)

STABILITY_TOL = 1e-9
EIG_FLOOR = 1e-14
DIRECT_MAX_N = 40


def spectral_radius(M) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got {M.shape}")
    if M.size == 0:
        return 0.0
    try:
        eig = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise ArithmeticError(f"eigensolver failed: {exc}") from exc
    return float(np.max(np.abs(eig)))


def closed_loop_matrix(system: LinearSystem, policy: DecentralizedPolicy, pattern: ObservationPattern) -> np.ndarray:
    return closed_loop(system, global_gain(policy, pattern, system.n))


def is_stabilizing(system, policy, pattern, tol: float = STABILITY_TOL) -> bool:
    AK = closed_loop_matrix(system, policy, pattern)
    if not np.all(np.isfinite(AK)):
        return False
    return spectral_radius(AK) < 1.0 - tol


@dataclass(frozen=True)
class StationaryCovariance:
    sigma_inf: np.ndarray
    residual: float


def lyapunov_residual(A_K: np.ndarray, sigma_w: np.ndarray, S: np.ndarray) -> float:
    """Relative residual of ``A S A' + sigma_w = S``."""
    R = A_K @ S @ A_K.T + sigma_w - S
    return float(np.linalg.norm(R) / max(np.linalg.norm(S), np.finfo(float).tiny))


def _dlyap_direct(A: np.ndarray, S_w: np.ndarray) -> np.ndarray:
    n = A.shape[0]
    # row-major vec: vec(A S A') = kron(A, A) vec(S)
    lhs = np.eye(n * n) - np.kron(A, A)
    return np.linalg.solve(lhs, S_w.reshape(-1)).reshape(n, n)


def _dlyap_doubling(A: np.ndarray, S_w: np.ndarray, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    S = S_w.copy()
    Ak = A.copy()
    for _ in range(max_iter):
        inc = Ak @ S @ Ak.T
        S = S + inc
        Ak = Ak @ Ak
        if np.linalg.norm(inc) < tol * max(1.0, np.linalg.norm(S)):
            break
    return S


def solve_dlyap(A_K, sigma_w, method: str = "auto") -> StationaryCovariance:
    """Stationary covariance: the fixed point of ``S = A_K S A_K' + sigma_w``.

    ``method`` is ``"direct"`` (Kronecker linear solve), ``"doubling"``
    (squaring iteration) or ``"auto"`` (direct up to n = 40).
    """
    A_K = np.asarray(A_K, dtype=float)
    sigma_w = np.asarray(sigma_w, dtype=float)
    rho = spectral_radius(A_K) if np.all(np.isfinite(A_K)) else np.inf
    if not rho < 1.0:
        raise InstabilityError(f"closed loop is not stable (spectral radius {rho:.6g})")
    if method == "auto":
        method = "direct" if A_K.shape[0] <= DIRECT_MAX_N else "doubling"
    if method == "direct":
        S = _dlyap_direct(A_K, sigma_w)
    elif method == "doubling":
        S = _dlyap_doubling(A_K, sigma_w)
    else:
        raise ValueError(f"unknown Lyapunov method {method!r}")
    S = 0.5 * (S + S.T)
    return StationaryCovariance(S, lyapunov_residual(A_K, sigma_w, S))


def psd_sqrt(S: np.ndarray, inverse: bool = False) -> np.ndarray:
    lam, V = np.linalg.eigh(0.5 * (S + S.T))
    lam = np.maximum(lam, EIG_FLOOR)
    p = -0.5 if inverse else 0.5
    return (V * lam**p) @ V.T


def cost_weight(policy, pattern, cost, n: int) -> np.ndarray:
    """``Q_K = Q + M(K)' R M(K)`` with averaged cost matrices."""
    M = global_gain(policy, pattern, n)
    return cost.Q + M.T @ cost.R @ M


def stationary_mean(system, policy, pattern, exo: float = 0.0) -> np.ndarray:
    AK = closed_loop_matrix(system, policy, pattern)
    forcing = system.B @ policy.input_offset(exo) + system.drift(exo)
    if not np.any(forcing):
        return np.zeros(system.n)
    return np.linalg.solve(np.eye(system.n) - AK, forcing)


def exact_cost(system, policy, pattern, cost, exo: float = 0.0) -> float:
    """Infinite-horizon average cost ``tr(Q_K Sigma_inf)`` plus the mean-offset term.

    With zero drift, no bias/feedforward and ``x_ref = 0`` the mean term is
    identically zero and this is exactly the LQ objective.
    """
    M = global_gain(policy, pattern, system.n)
    AK = system.A + system.B @ M
    cov = solve_dlyap(AK, system.sigma_w)
    QK = cost.Q + M.T @ cost.R @ M
    J = float(np.sum(QK * cov.sigma_inf))
    offset = policy.input_offset(exo)
    forcing = system.B @ offset + system.drift(exo)
    xbar = np.linalg.solve(np.eye(system.n) - AK, forcing) if np.any(forcing) else np.zeros(system.n)
    ubar = M @ xbar + offset
    dev = xbar - cost.x_ref
    if np.any(dev) or np.any(ubar):
        J += float(dev @ cost.Q @ dev + ubar @ cost.R @ ubar)
    return J


def default_fd_step(policy: DecentralizedPolicy) -> float:
    return 1e-5 * max(1.0, float(np.linalg.norm(policy.vectorize())))


def fd_gradient(system, policy, pattern, cost, h: float | None = None, exo: float = 0.0) -> np.ndarray:
    """Central-difference gradient of :func:`exact_cost` over the policy vector."""
    h = default_fd_step(policy) if h is None else h
    k = policy.vectorize()
    grad = np.empty_like(k)
    for idx in range(k.size):
        vals = []
        for sign in (1.0, -1.0):
            kk = k.copy()
            kk[idx] += sign * h
            try:
                vals.append(exact_cost(system, policy.with_vector(kk), pattern, cost, exo))
            except InstabilityError as exc:
                raise InstabilityError(f"coordinate {idx} perturbed by {sign * h:+g} is not stabilizing") from exc
        grad[idx] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


@dataclass
class DescentResult:
    policy: DecentralizedPolicy
    costs: list[float]
    grad_norm: float


def descend(
    system,
    pattern,
    cost,
    K0: DecentralizedPolicy,
    step: float,
    iters: int,
    gtol: float = 1e-9,
    exo: float = 0.0,
) -> DescentResult:
    """Model-based gradient descent with backtracking.

    The step is halved until the candidate is stabilizing and does not raise
    the cost, so the recorded cost sequence is monotone nonincreasing.
    """
    policy = K0
    J = exact_cost(system, policy, pattern, cost, exo)
    costs = [J]
    g = fd_gradient(system, policy, pattern, cost, exo=exo)
    lr = step
    for _ in range(iters):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            break
        k = policy.vectorize()
        accepted = False
        trial = lr
        for _ in range(60):
            cand = policy.with_vector(k - trial * g)
            if is_stabilizing(system, cand, pattern):
                Jc = exact_cost(system, cand, pattern, cost, exo)
                if Jc <= J:
                    accepted = True
                    break
            trial *= 0.5
        if not accepted:
            break
        policy, J = cand, Jc
        costs.append(J)
        # grow back towards the nominal step after a successful move
        lr = min(step, 2.0 * trial)
        try:
            g = fd_gradient(system, policy, pattern, cost, exo=exo)
        except InstabilityError:
            break
    return DescentResult(policy, costs, float(np.linalg.norm(g)))


@dataclass(frozen=True)
class QuadGaussForm:
    """Stacked-noise quadratic form for a finite closed-loop rollout from zero.

    With ``varpi = [sigma_w^{-1/2} w(0); ...; sigma_w^{-1/2} w(T_J - 1)]`` the
    discounted cost ``sum_t gamma^(T_J - t) x(t)' Q_K x(t)`` equals
    ``varpi' Phi varpi`` for every noise realization.
    """

    Psi: np.ndarray
    Phi: np.ndarray
    gamma: float
    whiten: np.ndarray

    def stack_noise(self, w: np.ndarray) -> np.ndarray:
        """Map disturbances ``w`` of shape ``(T_J, n)`` to ``varpi``."""
        return (np.asarray(w) @ self.whiten.T).reshape(-1)

    def value(self, w: np.ndarray) -> float:
        v = self.stack_noise(w)
        return float(v @ self.Phi @ v)


def build_quad_form(system, policy, pattern, cost, T_J: int, gamma: float) -> QuadGaussForm:
    n = system.n
    AK = closed_loop_matrix(system, policy, pattern)
    cov = solve_dlyap(AK, system.sigma_w)
    S_half = psd_sqrt(cov.sigma_inf)
    S_inv_half = psd_sqrt(cov.sigma_inf, inverse=True)
    W_half = psd_sqrt(system.sigma_w)
    W_inv_half = psd_sqrt(system.sigma_w, inverse=True)
    QK = cost_weight(policy, pattern, cost, n)

    powers = [np.eye(n)]
    for _ in range(1, T_J):
        powers.append(AK @ powers[-1])
    Psi = np.zeros((n * T_J, n * T_J))
    for t in range(T_J):
        for tau in range(t + 1):
            Psi[t * n : (t + 1) * n, tau * n : (tau + 1) * n] = S_inv_half @ powers[t - tau] @ W_half
    core = S_half @ QK @ S_half
    mid = np.zeros_like(Psi)
    for t in range(T_J):
        # block t holds x(t + 1); weight gamma^(T_J - (t + 1)), with 0^0 = 1
        weight = float(gamma) ** (T_J - 1 - t)
        mid[t * n : (t + 1) * n, t * n : (t + 1) * n] = weight * core
    Phi = Psi.T @ mid @ Psi
    Phi = 0.5 * (Phi + Phi.T)
    return QuadGaussForm(Psi, Phi, float(gamma), W_inv_half)


class ModelOracle:
    """Per-policy diagnostics recorded alongside a learning run."""

    def __init__(self, system, pattern, cost, exo: float = 0.0, gradient: bool = True):
        self.system = system
        self.pattern = pattern
        self.cost = cost
        self.exo = exo
        self.gradient = gradient

    def spectral_radius(self, policy) -> float:
        AK = closed_loop_matrix(self.system, policy, self.pattern)
        if not np.all(np.isfinite(AK)):
            return float("inf")
        return spectral_radius(AK)

    def evaluate(self, policy, exo: float | None = None) -> dict:
        exo = self.exo if exo is None else exo
        rho = self.spectral_radius(policy)
        out = {"oracle_cost": float("inf"), "spectral_radius": rho, "stable": rho < 1.0 - STABILITY_TOL, "grad_norm_sq": None}
        if not out["stable"]:
            return out
        out["oracle_cost"] = exact_cost(self.system, policy, self.pattern, self.cost, exo)
        if self.gradient:
            try:
                g = fd_gradient(self.system, policy, self.pattern, self.cost, exo=exo)
                out["grad_norm_sq"] = float(g @ g)
            except InstabilityError:
                pass
        return out
