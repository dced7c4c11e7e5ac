"""Linear plants, quadratic costs, observation patterns and decentralized policies.

Indices are 0-based everywhere in this module. Configuration files use the
1-based convention; :meth:`ObservationPattern.from_one_based` is the single
conversion point.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError

SYM_TOL = 1e-12
DIVERGENCE_LIMIT = 1e9
_CHECK_EVERY = 128


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_psd(M: np.ndarray, name: str, strict: bool = False) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValidationError(f"{name} has non-finite entries")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(M), initial=0.0)):
        raise ValidationError(f"{name} is not symmetric")
    if M.size == 0:
        return
    lam_min = np.linalg.eigvalsh(0.5 * (M + M.T)).min()
    scale = max(1.0, np.max(np.abs(M)))
    if strict and lam_min <= 0.0:
        raise ValidationError(f"{name} is not positive definite (min eigenvalue {lam_min:.3e})")
    if not strict and lam_min < -SYM_TOL * scale:
        raise ValidationError(f"{name} is not positive semidefinite (min eigenvalue {lam_min:.3e})")


@dataclass(frozen=True)
class LinearSystem:
    """Plant ``x(t+1) = A x + B u + d + e * exo(t) + w``, ``w ~ N(0, sigma_w)``.

    ``d`` is a constant drift and ``e`` multiplies an optional scalar
    exogenous signal (the outdoor temperature in the HVAC benchmark). Both
    default to zero, which recovers the pure LQ setting.
    """

    A: np.ndarray
    B: np.ndarray
    sigma_w: np.ndarray
    d: np.ndarray | None = None
    e: np.ndarray | None = None

    def __post_init__(self) -> None:
        A = _frozen(self.A)
        B = _frozen(self.B)
        if B.ndim == 1:
            B = _frozen(B.reshape(-1, 1))
        n = A.shape[0]
        if A.ndim != 2 or A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.ndim != 2 or B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {B.shape}")
        sigma_w = _frozen(self.sigma_w)
        if sigma_w.shape != (n, n):
            raise DimensionError(f"sigma_w must be {n}x{n}, got {sigma_w.shape}")
        _check_psd(sigma_w, "sigma_w", strict=True)
        d = _frozen(np.zeros(n) if self.d is None else self.d)
        e = _frozen(np.zeros(n) if self.e is None else self.e)
        if d.shape != (n,):
            raise DimensionError(f"d must have length {n}, got {d.shape}")
        if e.shape != (n,):
            raise DimensionError(f"e must have length {n}, got {e.shape}")
        for name, value in (("A", A), ("B", B), ("sigma_w", sigma_w), ("d", d), ("e", e)):
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B.shape[1])

    @property
    def drift_free(self) -> bool:
        return not (np.any(self.d) or np.any(self.e))

    def drift(self, exo: float = 0.0) -> np.ndarray:
        return self.d + self.e * exo


@dataclass(frozen=True)
class ObservationPattern:
    """Per-agent observed state indices and input dimensions (0-based)."""

    n: int
    index_sets: tuple[tuple[int, ...], ...]
    input_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        sets = tuple(tuple(int(j) for j in s) for s in self.index_sets)
        dims = tuple(int(k) for k in self.input_dims)
        if len(sets) != len(dims):
            raise DimensionError(f"{len(sets)} index sets but {len(dims)} input dims")
        if not sets:
            raise ValidationError("pattern needs at least one agent")
        for i, s in enumerate(sets):
            if not s:
                raise ValidationError(f"agent {i} observes no states")
            if len(set(s)) != len(s):
                raise ValidationError(f"agent {i} has repeated indices {s}")
            bad = [j for j in s if not 0 <= j < self.n]
            if bad:
                raise ValidationError(f"agent {i} index out of range [0, {self.n}): {bad}")
        if any(k < 1 for k in dims):
            raise ValidationError(f"input dims must be positive, got {dims}")
        object.__setattr__(self, "index_sets", sets)
        object.__setattr__(self, "input_dims", dims)

    @classmethod
    def from_one_based(cls, n: int, index_sets: Sequence[Sequence[int]], input_dims: Sequence[int]):
        return cls(n, tuple(tuple(j - 1 for j in s) for s in index_sets), tuple(input_dims))

    @classmethod
    def full(cls, n: int, m: int) -> "ObservationPattern":
        """Single agent observing the whole state."""
        return cls(n, (tuple(range(n)),), (m,))

    @property
    def N(self) -> int:
        return len(self.index_sets)

    @property
    def m(self) -> int:
        return sum(self.input_dims)

    @cached_property
    def input_offsets(self) -> tuple[int, ...]:
        offs = [0]
        for k in self.input_dims:
            offs.append(offs[-1] + k)
        return tuple(offs)

    def gain_shape(self, i: int) -> tuple[int, int]:
        return self.input_dims[i], len(self.index_sets[i])


@dataclass(frozen=True)
class QuadraticCost:
    """Local stage costs ``c_i = (x - x_ref)' Q_i (x - x_ref) + u' R_i u``.

    ``x_ref`` defaults to zero (the LQ setting); the HVAC benchmark uses it
    for per-zone setpoints.
    """

    Q_list: tuple[np.ndarray, ...]
    R_list: tuple[np.ndarray, ...]
    x_ref: np.ndarray | None = None

    def __post_init__(self) -> None:
        Qs = tuple(_frozen(q) for q in self.Q_list)
        Rs = tuple(_frozen(r) for r in self.R_list)
        if len(Qs) != len(Rs) or not Qs:
            raise DimensionError(f"need matching nonempty Q/R lists, got {len(Qs)} and {len(Rs)}")
        n, m = Qs[0].shape[0], Rs[0].shape[0]
        for i, (q, r) in enumerate(zip(Qs, Rs)):
            if q.shape != (n, n) or r.shape != (m, m):
                raise DimensionError(f"agent {i}: Q {q.shape}, R {r.shape}, expected {(n, n)}, {(m, m)}")
            _check_psd(q, f"Q_{i}")
            _check_psd(r, f"R_{i}")
        Q = sum(Qs) / len(Qs)
        R = sum(Rs) / len(Rs)
        _check_psd(Q, "average Q", strict=True)
        _check_psd(R, "average R", strict=True)
        x_ref = _frozen(np.zeros(n) if self.x_ref is None else self.x_ref)
        if x_ref.shape != (n,):
            raise DimensionError(f"x_ref must have length {n}")
        object.__setattr__(self, "Q_list", Qs)
        object.__setattr__(self, "R_list", Rs)
        object.__setattr__(self, "x_ref", x_ref)

    @property
    def N(self) -> int:
        return len(self.Q_list)

    @property
    def Q(self) -> np.ndarray:
        return sum(self.Q_list) / self.N

    @property
    def R(self) -> np.ndarray:
        return sum(self.R_list) / self.N

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self.Q_list), np.stack(self.R_list)


@dataclass(frozen=True)
class DecentralizedPolicy:
    """Local policies ``u_i = K_i x_{I_i} + Ko_i * exo + b_i``.

    ``b_list`` and ``Ko_list`` are optional; when present every agent carries
    one. Agent ``i``'s parameters vectorize as ``[vec(K_i), b_i, Ko_i]`` (row-major
    ``K_i``) and the full vector concatenates agents in order.
    """

    K_list: tuple[np.ndarray, ...]
    b_list: tuple[np.ndarray, ...] | None = None
    Ko_list: tuple[np.ndarray, ...] | None = None

    def __post_init__(self) -> None:
        Ks = tuple(_frozen(np.atleast_2d(k)) for k in self.K_list)
        object.__setattr__(self, "K_list", Ks)
        for name in ("b_list", "Ko_list"):
            vals = getattr(self, name)
            if vals is None:
                continue
            vals = tuple(_frozen(np.atleast_1d(v)) for v in vals)
            if len(vals) != len(Ks):
                raise DimensionError(f"{name} has {len(vals)} entries for {len(Ks)} agents")
            for i, (v, k) in enumerate(zip(vals, Ks)):
                if v.shape != (k.shape[0],):
                    raise DimensionError(f"{name}[{i}] must have length {k.shape[0]}, got {v.shape}")
            object.__setattr__(self, name, vals)

    @classmethod
    def zeros(cls, pattern: ObservationPattern, bias: bool = False, feedforward: bool = False):
        Ks = [np.zeros(pattern.gain_shape(i)) for i in range(pattern.N)]
        bs = [np.zeros(m) for m in pattern.input_dims] if bias else None
        Kos = [np.zeros(m) for m in pattern.input_dims] if feedforward else None
        return cls(tuple(Ks), None if bs is None else tuple(bs), None if Kos is None else tuple(Kos))

    @property
    def N(self) -> int:
        return len(self.K_list)

    @property
    def has_bias(self) -> bool:
        return self.b_list is not None

    @property
    def has_feedforward(self) -> bool:
        return self.Ko_list is not None

    def agent_sizes(self) -> list[int]:
        extra = int(self.has_bias) + int(self.has_feedforward)
        return [k.size + extra * k.shape[0] for k in self.K_list]

    def agent_slices(self) -> list[slice]:
        bounds = np.concatenate([[0], np.cumsum(self.agent_sizes())])
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def n_params(self) -> int:
        return int(sum(self.agent_sizes()))

    def agent_vector(self, i: int) -> np.ndarray:
        parts = [self.K_list[i].ravel()]
        if self.b_list is not None:
            parts.append(self.b_list[i])
        if self.Ko_list is not None:
            parts.append(self.Ko_list[i])
        return np.concatenate(parts)

    def vectorize(self) -> np.ndarray:
        return np.concatenate([self.agent_vector(i) for i in range(self.N)])

    def with_vector(self, vec: np.ndarray) -> "DecentralizedPolicy":
        """Same structure, parameters taken from ``vec``."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_params,):
            raise DimensionError(f"expected vector of length {self.n_params}, got {vec.shape}")
        Ks, bs, Kos = [], [], []
        for k, sl in zip(self.K_list, self.agent_slices()):
            block = vec[sl]
            mi = k.shape[0]
            Ks.append(block[: k.size].reshape(k.shape))
            pos = k.size
            if self.has_bias:
                bs.append(block[pos : pos + mi])
                pos += mi
            if self.has_feedforward:
                Kos.append(block[pos : pos + mi])
        return DecentralizedPolicy(
            tuple(Ks),
            tuple(bs) if self.has_bias else None,
            tuple(Kos) if self.has_feedforward else None,
        )

    def input_offset(self, exo: float = 0.0) -> np.ndarray:
        """Stacked ``b + Ko * exo`` over agents (zeros when absent)."""
        parts = []
        for i, k in enumerate(self.K_list):
            off = np.zeros(k.shape[0])
            if self.b_list is not None:
                off = off + self.b_list[i]
            if self.Ko_list is not None:
                off = off + self.Ko_list[i] * exo
            parts.append(off)
        return np.concatenate(parts)

    def feedforward_gain(self) -> np.ndarray:
        if self.Ko_list is None:
            return np.zeros(sum(k.shape[0] for k in self.K_list))
        return np.concatenate(self.Ko_list)

    def bias(self) -> np.ndarray:
        if self.b_list is None:
            return np.zeros(sum(k.shape[0] for k in self.K_list))
        return np.concatenate(self.b_list)


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop rollout.

    ``states[t]``, ``inputs[t]`` and ``local_costs[t]`` refer to time ``t``
    for ``t = 0..len-1``. When ``diverged`` is set the rollout stopped at the
    last state that was finite and below the divergence limit.
    """

    states: np.ndarray
    inputs: np.ndarray
    local_costs: np.ndarray
    diverged: bool = False

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def global_gain(policy: DecentralizedPolicy, pattern: ObservationPattern, n: int | None = None) -> np.ndarray:
    """Scatter the local gains into the global ``m x n`` feedback matrix."""
    n = pattern.n if n is None else n
    if n != pattern.n:
        raise DimensionError(f"pattern is over {pattern.n} states, got n={n}")
    if policy.N != pattern.N:
        raise DimensionError(f"policy has {policy.N} agents, pattern has {pattern.N}")
    M = np.zeros((pattern.m, n))
    offs = pattern.input_offsets
    for i, K in enumerate(policy.K_list):
        if K.shape != pattern.gain_shape(i):
            raise DimensionError(f"K_{i} has shape {K.shape}, expected {pattern.gain_shape(i)}")
        M[offs[i] : offs[i + 1], list(pattern.index_sets[i])] = K
    return M


def closed_loop(system: LinearSystem, gain: np.ndarray) -> np.ndarray:
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (system.m, system.n):
        raise DimensionError(f"gain must be {(system.m, system.n)}, got {gain.shape}")
    return system.A + system.B @ gain


class GaussianNoise:
    """Draws i.i.d. ``N(0, sigma_w)`` disturbances from a numpy Generator."""

    def __init__(self, sigma_w: np.ndarray, rng: np.random.Generator):
        sigma_w = np.asarray(sigma_w, dtype=float)
        self._chol = np.linalg.cholesky(sigma_w)
        self._rng = rng

    def take(self, T: int) -> np.ndarray:
        z = self._rng.standard_normal((T, self._chol.shape[0]))
        return z @ self._chol.T


def _noise_block(noise, T: int, n: int) -> np.ndarray:
    if noise is None:
        return np.zeros((T, n))
    if isinstance(noise, (np.ndarray, list, tuple)):
        w = np.asarray(noise, dtype=float)
    else:
        w = noise.take(T)
    if w.shape[0] < T or w.shape[1:] != (n,):
        raise DimensionError(f"noise must have shape ({T}, {n}), got {w.shape}")
    return w[:T]


def _exo_block(exo, T: int) -> np.ndarray:
    if exo is None:
        return np.zeros(T + 1)
    arr = np.asarray(exo, dtype=float)
    if arr.ndim == 0:
        return np.full(T + 1, float(arr))
    if arr.shape[0] < T + 1:
        raise DimensionError(f"exogenous signal must cover {T + 1} steps, got {arr.shape[0]}")
    return arr[: T + 1]


def simulate(
    system: LinearSystem,
    policy: DecentralizedPolicy,
    pattern: ObservationPattern,
    cost: QuadraticCost,
    x0,
    T: int,
    noise=None,
    exo=None,
) -> Trajectory:
    """Roll the closed loop forward ``T`` steps from ``x0``.

    ``noise`` is ``None`` (noise-free), an array of shape ``(T, n)`` replayed
    verbatim, or any object with a ``take(T)`` method such as
    :class:`GaussianNoise`. ``exo`` is a scalar or a length ``T + 1`` sequence.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    n = system.n
    M = global_gain(policy, pattern, n)
    if M.shape[0] != system.m:
        raise DimensionError(f"pattern inputs sum to {M.shape[0]}, B has {system.m} columns")
    AK = system.A + system.B @ M
    w = _noise_block(noise, T, n)
    exo_t = _exo_block(exo, T)
    u_off = policy.bias()[None, :] + exo_t[:, None] * policy.feedforward_gain()[None, :]
    system_offsets = (u_off[:-1] @ system.B.T) + system.d[None, :] + exo_t[:-1, None] * system.e[None, :] + w

    states = np.empty((T + 1, n))
    states[0] = np.asarray(x0, dtype=float)
    x = states[0]
    stop = T
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, T, _CHECK_EVERY):
            end = min(T, start + _CHECK_EVERY)
            for t in range(start, end):
                x = AK @ x + system_offsets[t]
                states[t + 1] = x
            block = states[start + 1 : end + 1]
            ok = np.all(np.isfinite(block), axis=1) & (np.max(np.abs(block), axis=1, initial=0.0) <= DIVERGENCE_LIMIT)
            if not ok.all():
                stop = start + int(np.argmin(ok))
                diverged = True
                break
    states = states[: stop + 1]
    inputs = states @ M.T + u_off[: stop + 1]
    dev = states - cost.x_ref[None, :]
    Qs, Rs = cost.stacked()
    local_costs = np.einsum("tj,ijk,tk->ti", dev, Qs, dev) + np.einsum("tj,ijk,tk->ti", inputs, Rs, inputs)
    return Trajectory(states, inputs, local_costs, diverged)
