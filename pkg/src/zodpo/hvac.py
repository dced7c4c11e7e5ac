"""Multi-zone building thermal models as linear plants.

Units follow the usual conventions: temperatures in degC, heat in kW,
capacitance in kJ/degC, resistances in degC/kW and time steps in seconds.
The outdoor temperature enters the plant as the exogenous signal of
:class:`~zodpo.lq.LinearSystem`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .consensus import CommGraph, ConsensusMatrix, explicit_weights, metropolis_weights
from .errors import DimensionError, ValidationError
from .lq import (
    DecentralizedPolicy,
    GaussianNoise,
    LinearSystem,
    ObservationPattern,
    QuadraticCost,
    Trajectory,
    simulate,
)


def _per_zone(value, N: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(N, float(arr))
    if arr.shape != (N,):
        raise DimensionError(f"{name} must be a scalar or have length {N}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class HvacParams:
    N: int
    adjacency: frozenset[tuple[int, int]]
    delta: float = 60.0
    upsilon: np.ndarray | float = 200.0
    zeta_out: np.ndarray | float = 1.0
    zeta_wall: float | Mapping[tuple[int, int], float] = 1.0
    pi_ext: np.ndarray | float = 1.0
    theta_star: np.ndarray | float = 22.0
    alpha: np.ndarray | float = 0.01
    noise_std: np.ndarray | float = 2.5

    def __post_init__(self) -> None:
        N = int(self.N)
        if N < 1:
            raise ValidationError("need at least one zone")
        edges = set()
        for i, j in self.adjacency:
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"zone {i} is adjacent to itself")
            if not (0 <= i < N and 0 <= j < N):
                raise ValidationError(f"adjacency pair ({i}, {j}) outside 0..{N - 1}")
            edges.add((min(i, j), max(i, j)))
        object.__setattr__(self, "adjacency", frozenset(edges))
        if not (math.isfinite(self.delta) and self.delta >= 0):
            raise ValidationError(f"delta must be nonnegative, got {self.delta}")
        for name in ("upsilon", "zeta_out", "pi_ext", "theta_star", "alpha", "noise_std"):
            arr = _per_zone(getattr(self, name), N, name)
            if name in ("upsilon", "zeta_out", "alpha", "noise_std", "pi_ext") and np.any(arr <= 0):
                raise ValidationError(f"{name} must be strictly positive")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        walls = {}
        for e in edges:
            if isinstance(self.zeta_wall, Mapping):
                val = self.zeta_wall.get(e, self.zeta_wall.get((e[1], e[0])))
                if val is None:
                    raise ValidationError(f"no wall resistance for adjacent zones {e}")
            else:
                val = self.zeta_wall
            if not float(val) > 0:
                raise ValidationError(f"wall resistance for {e} must be positive")
            walls[e] = float(val)
        object.__setattr__(self, "zeta_wall", walls)

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.adjacency if i in (a, b)})

    def wall(self, i: int, j: int) -> float:
        return self.zeta_wall[(min(i, j), max(i, j))]


@dataclass(frozen=True)
class OutdoorSchedule:
    """Outdoor temperature ``theta_o(t)``.

    ``kind`` is ``"constant"`` (``value``), ``"sinusoidal"`` (``mean``,
    ``amplitude``, ``period`` in steps, ``phase`` in radians) or ``"table"``
    (``values`` indexed by step).
    """

    kind: str = "constant"
    value: float = 30.0
    mean: float = 25.0
    amplitude: float = 8.0
    period: float = 1440.0
    phase: float = 0.0
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "sinusoidal", "table"):
            raise ValidationError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "sinusoidal" and not self.period > 0:
            raise ValidationError("sinusoidal period must be positive")
        if self.kind == "table":
            if not self.values:
                raise ValidationError("table schedule needs values")
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "sinusoidal":
            return float(self.mean + self.amplitude * math.sin(2 * math.pi * t / self.period + self.phase))
        if not 0 <= t < len(self.values):
            raise ValidationError(f"table schedule covers steps 0..{len(self.values) - 1}, asked for {t}")
        return self.values[t]

    def series(self, start: int, length: int) -> np.ndarray:
        return np.array([self(t) for t in range(start, start + length)])

    def reference(self) -> float:
        """Representative constant level (mean for periodic or tabulated schedules)."""
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "sinusoidal":
            return float(self.mean)
        return float(np.mean(self.values))


@dataclass(frozen=True)
class HvacProblem:
    params: HvacParams
    schedule: OutdoorSchedule
    system: LinearSystem
    cost: QuadraticCost
    pattern: ObservationPattern

    @property
    def graph(self) -> CommGraph:
        return CommGraph(self.params.N, self.params.adjacency)


def thermal_matrices(params: HvacParams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Discrete thermal model ``(A, B, d_const, e_outdoor, noise_scale)``.

    The drift at outdoor temperature ``theta`` is ``d_const + e_outdoor * theta``;
    ``noise_scale[i]`` multiplies the zone disturbance ``w_i``.
    """
    N, dt = params.N, params.delta
    ups = params.upsilon
    A = np.zeros((N, N))
    for i in range(N):
        A[i, i] = 1.0 - dt / (ups[i] * params.zeta_out[i])
        for j in params.neighbors(i):
            coupling = dt / (ups[i] * params.wall(i, j))
            A[i, i] -= coupling
            A[i, j] = coupling
    B = np.diag(dt / ups)
    d_const = dt / ups * params.pi_ext
    e_out = dt / (ups * params.zeta_out)
    noise_scale = math.sqrt(dt) / ups
    return A, B, d_const, e_out, noise_scale


def hvac_build(params: HvacParams, schedule: OutdoorSchedule | None = None) -> HvacProblem:
    """Plant, local costs ``(x_i - theta_i*)^2 + alpha_i u_i^2`` and own-zone sensing."""
    if not params.delta > 0:
        raise ValidationError(f"delta must be strictly positive to build a plant, got {params.delta}")
    schedule = OutdoorSchedule() if schedule is None else schedule
    A, B, d_const, e_out, noise_scale = thermal_matrices(params)
    N = params.N
    sigma_w = np.diag((noise_scale * params.noise_std) ** 2)
    system = LinearSystem(A, B, sigma_w, d=d_const, e=e_out)
    Q_list, R_list = [], []
    for i in range(N):
        q = np.zeros((N, N))
        q[i, i] = 1.0
        r = np.zeros((N, N))
        r[i, i] = params.alpha[i]
        Q_list.append(q)
        R_list.append(r)
    cost = QuadraticCost(tuple(Q_list), tuple(R_list), x_ref=params.theta_star)
    pattern = ObservationPattern(N, tuple((i,) for i in range(N)), (1,) * N)
    return HvacProblem(params, schedule, system, cost, pattern)


def four_zone(**overrides) -> HvacParams:
    """Four zones on a ring, each sharing walls with two others."""
    return HvacParams(N=4, adjacency=frozenset({(0, 1), (1, 2), (2, 3), (0, 3)}), **overrides)


def grid_adjacency(floors: int, rows: int, cols: int) -> frozenset[tuple[int, int]]:
    """Rooms ``floor * rows * cols + row * cols + col`` with in-plane and vertical walls."""

    def idx(f, r, c):
        return f * rows * cols + r * cols + c

    edges = set()
    for f in range(floors):
        for r in range(rows):
            for c in range(cols):
                if r + 1 < rows:
                    edges.add((idx(f, r, c), idx(f, r + 1, c)))
                if c + 1 < cols:
                    edges.add((idx(f, r, c), idx(f, r, c + 1)))
                if f + 1 < floors:
                    edges.add((idx(f, r, c), idx(f + 1, r, c)))
    return frozenset(edges)


def twenty_zone(params_base: HvacParams) -> HvacParams:
    """Two floors of 5 x 2 rooms; per-zone values replicated from zone 0 of the base."""
    wall = next(iter(params_base.zeta_wall.values()), 1.0)
    return HvacParams(
        N=20,
        adjacency=grid_adjacency(2, 5, 2),
        delta=params_base.delta,
        upsilon=float(params_base.upsilon[0]),
        zeta_out=float(params_base.zeta_out[0]),
        zeta_wall=wall,
        pi_ext=float(params_base.pi_ext[0]),
        theta_star=float(params_base.theta_star[0]),
        alpha=float(params_base.alpha[0]),
        noise_std=float(params_base.noise_std[0]),
    )


def wall_weights(params: HvacParams) -> ConsensusMatrix:
    """``W_ii = 1/2`` and ``W_ij = 1/4`` between wall-sharing zones.

    Only doubly stochastic when every zone has exactly two neighbours; other
    layouts are rejected by validation.
    """
    N = params.N
    W = 0.5 * np.eye(N)
    for a, b in params.adjacency:
        W[a, b] = W[b, a] = 0.25
    return explicit_weights(W, CommGraph(N, params.adjacency))


def default_weights(params: HvacParams) -> ConsensusMatrix:
    graph = CommGraph(params.N, params.adjacency)
    if all(len(params.neighbors(i)) == 2 for i in range(params.N)):
        return wall_weights(params)
    return metropolis_weights(graph)


@dataclass(frozen=True)
class ShiftedProblem:
    """Plant and cost in deviation coordinates ``x~ = x - offset``."""

    system: LinearSystem
    cost: QuadraticCost
    offset: np.ndarray

    def shift_policy(self, policy: DecentralizedPolicy, pattern: ObservationPattern) -> DecentralizedPolicy:
        """Equivalent policy acting on deviations: ``b~_i = b_i + K_i offset_{I_i}``."""
        if not np.any(self.offset):
            return policy
        base = policy.b_list if policy.has_bias else tuple(np.zeros(k.shape[0]) for k in policy.K_list)
        bs = tuple(
            b + K @ self.offset[list(pattern.index_sets[i])] for i, (b, K) in enumerate(zip(base, policy.K_list))
        )
        return DecentralizedPolicy(policy.K_list, bs, policy.Ko_list)


def setpoint_shift(system: LinearSystem, cost: QuadraticCost, theta_star) -> ShiftedProblem:
    """Rewrite the problem around ``theta_star``.

    ``x~(t+1) = A x~ + B u + [(A - I) theta* + d] + e exo + w`` and the cost
    reference moves to ``x_ref - theta*``. With ``theta* = x_ref`` the cost
    becomes a pure quadratic in the deviation.
    """
    theta = np.asarray(theta_star, dtype=float)
    if theta.ndim == 0:
        theta = np.full(system.n, float(theta))
    if theta.shape != (system.n,):
        raise DimensionError(f"theta_star must have length {system.n}")
    if not np.any(theta):
        return ShiftedProblem(system, cost, theta)
    d = (system.A - np.eye(system.n)) @ theta + system.d
    shifted = LinearSystem(system.A, system.B, system.sigma_w, d=d, e=system.e)
    new_cost = QuadraticCost(cost.Q_list, cost.R_list, x_ref=cost.x_ref - theta)
    return ShiftedProblem(shifted, new_cost, theta)


def temperature_rollout(
    problem: HvacProblem,
    policy: DecentralizedPolicy,
    T: int,
    x0=None,
    seed: int = 0,
    start: int = 0,
) -> Trajectory:
    """Closed-loop temperatures under the outdoor schedule from step ``start``."""
    x0 = np.zeros(problem.params.N) if x0 is None else x0
    rng = np.random.default_rng(seed)
    exo = problem.schedule.series(start, T + 1)
    return simulate(problem.system, policy, problem.pattern, problem.cost, x0, T, noise=GaussianNoise(problem.system.sigma_w, rng), exo=exo)


def settle_time(states: np.ndarray, target, band: float = 2.0) -> int:
    """First step from which every zone stays within ``band`` of ``target``.

    Returns ``len(states)`` when the trajectory never settles.
    """
    inside = np.all(np.abs(np.asarray(states) - np.asarray(target)) <= band, axis=1)
    T = len(inside)
    if not inside[-1]:
        return T
    outside = np.flatnonzero(~inside)
    return 0 if outside.size == 0 else int(outside[-1]) + 1
