"""Communication graphs, doubly-stochastic consensus matrices and gossip."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DimensionError, ValidationError

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class CommGraph:
    """Undirected connected graph on agents ``0..N-1``."""

    N: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        norm = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValidationError(f"self-loop at node {i}")
            if not (0 <= i < self.N and 0 <= j < self.N):
                raise ValidationError(f"edge ({i}, {j}) outside 0..{self.N - 1}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(norm))
        if not self._connected():
            raise ValidationError(f"communication graph on {self.N} nodes is not connected")

    @classmethod
    def from_one_based(cls, N: int, edges: Iterable[tuple[int, int]]) -> "CommGraph":
        return cls(N, frozenset((i - 1, j - 1) for i, j in edges))

    @classmethod
    def complete(cls, N: int) -> "CommGraph":
        return cls(N, frozenset((i, j) for i in range(N) for j in range(i + 1, N)))

    @classmethod
    def cycle(cls, N: int) -> "CommGraph":
        if N == 2:
            return cls(2, frozenset({(0, 1)}))
        return cls(N, frozenset((i, (i + 1) % N) for i in range(N)))

    def neighbors(self, i: int) -> list[int]:
        return sorted({b if a == i else a for a, b in self.edges if i in (a, b)})

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.N, dtype=int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.N, self.N), dtype=bool)
        for a, b in self.edges:
            adj[a, b] = adj[b, a] = True
        return adj

    def _connected(self) -> bool:
        if self.N <= 0:
            return False
        adj = {i: [] for i in range(self.N)}
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        seen = {0}
        queue = deque([0])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == self.N


def consensus_rate(W: np.ndarray) -> float:
    """Spectral norm of ``W - 11'/N``."""
    N = W.shape[0]
    return float(np.linalg.svd(W - np.full((N, N), 1.0 / N), compute_uv=False)[0])


@dataclass(frozen=True)
class ConsensusMatrix:
    W: np.ndarray
    rho_w: float
    graph: CommGraph

    @property
    def N(self) -> int:
        return self.graph.N


def _validate(W: np.ndarray, graph: CommGraph) -> np.ndarray:
    N = graph.N
    if W.shape != (N, N):
        raise DimensionError(f"W must be {N}x{N}, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise ValidationError("W has non-finite entries")
    if np.any(W < 0):
        raise ValidationError("W has negative entries (nonnegativity violated)")
    rows, cols = W.sum(axis=1), W.sum(axis=0)
    if np.max(np.abs(rows - 1.0)) > STOCHASTIC_TOL:
        raise ValidationError(f"row sums of W differ from 1 (max error {np.max(np.abs(rows - 1)):.3e})")
    if np.max(np.abs(cols - 1.0)) > STOCHASTIC_TOL:
        raise ValidationError(f"column sums of W differ from 1 (max error {np.max(np.abs(cols - 1)):.3e})")
    off_graph = ~graph.adjacency() & ~np.eye(N, dtype=bool)
    if np.any(W[off_graph] != 0):
        i, j = map(int, np.argwhere((W != 0) & off_graph)[0])
        raise ValidationError(f"W[{i},{j}] nonzero but ({i},{j}) is not an edge of the graph")
    if np.any(np.diag(W) <= 0):
        raise ValidationError("W has a zero diagonal entry (W_ii > 0 required)")
    # forgive sub-tolerance rounding: one Sinkhorn sweep keeps the pattern
    W = W / W.sum(axis=1, keepdims=True)
    W = W / W.sum(axis=0, keepdims=True)
    return W


def explicit_weights(W_raw, graph: CommGraph) -> ConsensusMatrix:
    """Validate a user-supplied consensus matrix against ``graph``."""
    W = _validate(np.array(W_raw, dtype=float), graph)
    rho = consensus_rate(W)
    if not rho < 1.0 - STOCHASTIC_TOL:
        raise ValidationError(f"rho_W = {rho:.6g} is not below 1; W does not mix across the graph")
    W.setflags(write=False)
    return ConsensusMatrix(W, rho, graph)


def metropolis_weights(graph: CommGraph) -> ConsensusMatrix:
    """Metropolis rule ``W_ij = 1 / (1 + max(deg_i, deg_j))`` on edges."""
    deg = graph.degrees()
    W = np.zeros((graph.N, graph.N))
    for a, b in graph.edges:
        W[a, b] = W[b, a] = 1.0 / (1.0 + max(deg[a], deg[b]))
    W[np.diag_indices(graph.N)] = 1.0 - W.sum(axis=1)
    return explicit_weights(W, graph)


def gossip_step(W: ConsensusMatrix, values) -> np.ndarray:
    """One synchronous round: every agent replaces its value by the W-weighted mix."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != W.N:
        raise DimensionError(f"expected {W.N} values, got {values.shape[0]}")
    return W.W @ values
