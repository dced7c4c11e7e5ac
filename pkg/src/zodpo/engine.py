"""Zero-order distributed policy optimization.

Each outer iteration runs four stages: the agents jointly draw a perturbation
direction on the unit sphere through gossip on squared norms, roll out the
perturbed policies while tracking the global average cost with a
consensus-weighted running mean, truncate the estimates, and take a local
zero-order gradient step.

Randomness is derived from a single master seed. The stream for iteration
``s`` and purpose ``p`` (0 = direction sampling, 1 = process noise) and agent
``i`` is ``SeedSequence(seed, spawn_key=(s, p, i))``, so any iteration can be
replayed in isolation and runs with different seeds are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .consensus import ConsensusMatrix
from .errors import InstabilityError, SamplingError, ValidationError
from .lq import (
    DecentralizedPolicy,
    GaussianNoise,
    LinearSystem,
    ObservationPattern,
    QuadraticCost,
    simulate,
)

STREAM_SAMPLING = 0
STREAM_NOISE = 1


@dataclass(frozen=True)
class ZodpoConfig:
    r: float
    eta: float
    j_bar: float
    T_G: int
    T_J: int
    T_S: int
    seed: int = 0
    learn_bias: bool = False
    learn_feedforward: bool = False

    def __post_init__(self) -> None:
        for name in ("r", "j_bar"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be finite and positive, got {v}")
        # eta = 0 is accepted as a frozen-policy run
        if not (math.isfinite(self.eta) and self.eta >= 0):
            raise ValidationError(f"eta must be finite and nonnegative, got {self.eta}")
        if self.T_G < 0:
            raise ValidationError(f"T_G must be >= 0, got {self.T_G}")
        if self.T_J < 1 or self.T_S < 1:
            raise ValidationError(f"T_J and T_S must be >= 1, got {self.T_J}, {self.T_S}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


def stream(seed: int, iteration: int, purpose: int, agent: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(iteration, purpose, agent)))


@dataclass(frozen=True)
class PerturbationDirection:
    blocks: tuple[np.ndarray, ...]
    exact_blocks: tuple[np.ndarray, ...]
    q_final: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks])

    @property
    def exact_vector(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.exact_blocks])


def sampling_error_level(W: ConsensusMatrix, T_S: int) -> float:
    """``N * rho_W ** T_S``, the relative error bound of sphere sampling."""
    return W.N * W.rho_w**T_S


def sample_usphere(shapes: Sequence, W: ConsensusMatrix, T_S: int, rng) -> PerturbationDirection:
    """Approximately uniform direction on the unit sphere, agent by agent.

    Agent ``i`` draws a standard Gaussian block ``V_i`` of ``shapes[i]``,
    gossips its squared norm for ``T_S`` rounds and scales ``V_i`` by
    ``1 / sqrt(N q_i)``. ``rng`` is one Generator shared in agent order or a
    sequence of per-agent Generators. The exact-normalization direction
    ``V_i / ||V||`` is returned alongside for testing.
    """
    if T_S < 1:
        raise ValidationError(f"T_S must be >= 1, got {T_S}")
    N = W.N
    if len(shapes) != N:
        raise ValidationError(f"{len(shapes)} shapes for {N} agents")
    rngs = list(rng) if isinstance(rng, (list, tuple)) else [rng] * N
    V = [rngs[i].standard_normal(shapes[i]) for i in range(N)]
    q = np.array([float(np.sum(v * v)) for v in V])
    total = q.sum()
    for _ in range(T_S):
        q = W.W @ q
    if np.any(q <= 0) or total <= 0:
        raise SamplingError("consensus on squared norms returned a nonpositive value")
    D = tuple(v / math.sqrt(N * qi) for v, qi in zip(V, q))
    D0 = tuple(v / math.sqrt(total) for v in V)

    level = sampling_error_level(W, T_S)
    if level <= 0.5:
        sq = sum(float(np.sum(d * d)) for d in D)
        if sq > (1.0 + level) ** 2 * (1 + 1e-12):
            raise SamplingError(f"sum of squared block norms {sq:.6g} exceeds (1 + {level:.3g})^2")
    return PerturbationDirection(D, D0, q)


def consensus_running_mean(W: ConsensusMatrix, costs: np.ndarray) -> np.ndarray:
    """Gossip-averaged running mean of local costs.

    ``costs[t - 1, i]`` is agent ``i``'s stage cost at time ``t``. Returns the
    history ``mu[t]`` for ``t = 0..T`` with ``mu[0] = 0`` and
    ``mu(t) = (t - 1)/t * W mu(t - 1) + c(t) / t``.
    """
    costs = np.asarray(costs, dtype=float)
    T = costs.shape[0]
    mu = np.zeros((T + 1, costs.shape[1]))
    Wm = W.W
    for t in range(1, T + 1):
        mu[t] = ((t - 1) / t) * (Wm @ mu[t - 1]) + costs[t - 1] / t
    return mu


def truncate(mu, j_bar: float) -> np.ndarray:
    if not j_bar > 0:
        raise ValidationError(f"j_bar must be positive, got {j_bar}")
    return np.minimum(np.asarray(mu, dtype=float), j_bar)


@dataclass(frozen=True)
class CostEstimate:
    mu: np.ndarray
    j_hat: np.ndarray
    diverged: bool = False


def global_cost_est(
    system: LinearSystem,
    policy: DecentralizedPolicy,
    pattern: ObservationPattern,
    cost: QuadraticCost,
    W: ConsensusMatrix,
    T_J: int,
    rng,
    j_bar: float,
    x0=None,
    exo=None,
) -> CostEstimate:
    """Roll out ``T_J`` steps from ``x0`` (zero by default) and estimate the global cost.

    ``rng`` is a Generator for process noise, or anything :func:`simulate`
    accepts as noise. A diverging rollout yields ``mu = j_bar`` for every
    agent so the subsequent truncation is a no-op.
    """
    if T_J < 1:
        raise ValidationError(f"T_J must be >= 1, got {T_J}")
    noise = GaussianNoise(system.sigma_w, rng) if isinstance(rng, np.random.Generator) else rng
    x0 = np.zeros(system.n) if x0 is None else x0
    traj = simulate(system, policy, pattern, cost, x0, T_J, noise=noise, exo=exo)
    if traj.diverged:
        mu = np.full(pattern.N, float(j_bar))
        return CostEstimate(mu, truncate(mu, j_bar), True)
    mu = consensus_running_mean(W, traj.local_costs[1:])[-1]
    if not np.all(np.isfinite(mu)):
        mu = np.full(pattern.N, float(j_bar))
        return CostEstimate(mu, truncate(mu, j_bar), True)
    return CostEstimate(mu, truncate(mu, j_bar), False)


def partial_gradient(n_K: int, r: float, j_hat_i: float, D_i):
    """One-point zero-order partial gradient ``(n_K / r) * j_hat_i * D_i``."""
    if not r > 0:
        raise ValidationError(f"r must be positive, got {r}")
    return (n_K / r) * j_hat_i * np.asarray(D_i, dtype=float)


@dataclass
class TraceRow:
    iteration: int
    params: np.ndarray
    j_hat: np.ndarray | None = None
    diverged: bool = False
    oracle_cost: float | None = None
    spectral_radius: float | None = None
    stable: bool | None = None
    grad_norm_sq: float | None = None


@dataclass
class RunTrace:
    template: DecentralizedPolicy
    rows: list[TraceRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def policy(self, s: int) -> DecentralizedPolicy:
        return self.template.with_vector(self.rows[s].params)

    @property
    def params(self) -> np.ndarray:
        return np.stack([row.params for row in self.rows])

    @property
    def oracle_costs(self) -> np.ndarray:
        return np.array([np.nan if r.oracle_cost is None else r.oracle_cost for r in self.rows])


def _with_structure(K0: DecentralizedPolicy, config: ZodpoConfig) -> DecentralizedPolicy:
    """Add zero bias/feedforward blocks when the config learns them."""
    bs = K0.b_list
    Kos = K0.Ko_list
    if config.learn_bias and bs is None:
        bs = tuple(np.zeros(k.shape[0]) for k in K0.K_list)
    if config.learn_feedforward and Kos is None:
        Kos = tuple(np.zeros(k.shape[0]) for k in K0.K_list)
    return DecentralizedPolicy(K0.K_list, bs, Kos)


def zodpo_run(
    system: LinearSystem,
    pattern: ObservationPattern,
    cost: QuadraticCost,
    W: ConsensusMatrix,
    config: ZodpoConfig,
    K0: DecentralizedPolicy,
    oracle=None,
    exo: float | Callable[[int], float] | None = None,
    x0=None,
) -> RunTrace:
    """Run ``T_G`` outer iterations starting from ``K0``.

    ``exo`` is the exogenous signal held fixed during each iteration: a
    constant, or a function of the iteration number ``s = 1..T_G``.
    ``oracle``, when given, is an object with ``evaluate(policy) -> dict``
    (see :class:`zodpo.oracle.ModelOracle`) and is used only for recording
    and for checking that ``K0`` stabilizes the plant.

    Parameters that are not learned (bias or feedforward blocks present in
    ``K0`` while the matching flag is off) are held fixed.
    """
    if W.N != pattern.N:
        raise ValidationError(f"consensus matrix has {W.N} agents, pattern has {pattern.N}")
    policy = _with_structure(K0, config)
    trace = RunTrace(policy)

    def record(s, pol, est=None):
        row = TraceRow(s, pol.vectorize())
        if est is not None:
            row.j_hat = est.j_hat.copy()
            row.diverged = est.diverged
        if oracle is not None:
            info = oracle.evaluate(pol)
            row.oracle_cost = info["oracle_cost"]
            row.spectral_radius = info["spectral_radius"]
            row.stable = info["stable"]
            row.grad_norm_sq = info["grad_norm_sq"]
        trace.rows.append(row)

    record(0, policy)
    if oracle is not None and not trace.rows[0].stable:
        raise InstabilityError(f"initial policy is not stabilizing (spectral radius {trace.rows[0].spectral_radius:.6g})")

    vec = policy.vectorize()
    n_K = vec.size
    slices = policy.agent_slices()
    learn = np.zeros(n_K, dtype=bool)
    for k, sl in zip(policy.K_list, slices):
        mi, size = k.shape[0], k.size
        learn[sl.start : sl.start + size] = True
        pos = sl.start + size
        if policy.has_bias:
            learn[pos : pos + mi] = config.learn_bias
            pos += mi
        if policy.has_feedforward:
            learn[pos : pos + mi] = config.learn_feedforward
    learn_slices = [np.flatnonzero(learn[sl]) + sl.start for sl in slices]
    n_learn = int(learn.sum())
    shapes = [(len(ix),) for ix in learn_slices]

    for s in range(1, config.T_G + 1):
        exo_s = exo(s) if callable(exo) else exo
        rngs = [stream(config.seed, s, STREAM_SAMPLING, i) for i in range(pattern.N)]
        direction = sample_usphere(shapes, W, config.T_S, rngs)
        perturbed_vec = vec.copy()
        for ix, d in zip(learn_slices, direction.blocks):
            perturbed_vec[ix] += config.r * d
        est = global_cost_est(
            system,
            policy.with_vector(perturbed_vec),
            pattern,
            cost,
            W,
            config.T_J,
            stream(config.seed, s, STREAM_NOISE),
            config.j_bar,
            x0=x0,
            exo=exo_s,
        )
        for i, (ix, d) in enumerate(zip(learn_slices, direction.blocks)):
            vec[ix] -= config.eta * partial_gradient(n_learn, config.r, est.j_hat[i], d)
        policy = policy.with_vector(vec)
        record(s, policy, est)
    return trace
