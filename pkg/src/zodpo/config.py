"""Experiment configuration schema and problem assembly.

Configs are JSON documents. Indices (agents, states, graph nodes) are
1-based in the file and converted once here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from .consensus import CommGraph, ConsensusMatrix, explicit_weights, metropolis_weights
from .engine import ZodpoConfig
from .errors import ConfigError, ValidationError
from .hvac import HvacParams, OutdoorSchedule, default_weights, four_zone, hvac_build, twenty_zone, wall_weights
from .lq import DecentralizedPolicy, LinearSystem, ObservationPattern, QuadraticCost

SCHEMA_VERSION = 1

PosFloat = Annotated[float, Field(gt=0, allow_inf_nan=False)]
NonNegFloat = Annotated[float, Field(ge=0, allow_inf_nan=False)]
Matrix = list[list[float]]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ScheduleSpec(_Strict):
    kind: Literal["constant", "sinusoidal", "table"] = "constant"
    value: float = 30.0
    mean: float = 25.0
    amplitude: float = 8.0
    period: PosFloat = 1440.0
    phase: float = 0.0
    values: list[float] = []


class HvacParamSpec(_Strict):
    delta: PosFloat = 60.0
    upsilon: Union[PosFloat, list[PosFloat]] = 200.0
    zeta_out: Union[PosFloat, list[PosFloat]] = 1.0
    zeta_wall: PosFloat = 1.0
    pi_ext: Union[PosFloat, list[PosFloat]] = 1.0
    theta_star: Union[float, list[float]] = 22.0
    alpha: Union[PosFloat, list[PosFloat]] = 0.01
    noise_std: Union[PosFloat, list[PosFloat]] = 2.5


class CustomLayout(_Strict):
    N: int = Field(ge=1)
    adjacency: list[tuple[int, int]]


class HvacSystemSpec(_Strict):
    kind: Literal["hvac"]
    layout: Union[Literal["four_zone", "twenty_zone"], CustomLayout] = "four_zone"
    params: HvacParamSpec = HvacParamSpec()
    schedule: ScheduleSpec = ScheduleSpec()


class ExplicitSystemSpec(_Strict):
    kind: Literal["explicit"]
    A: Matrix
    B: Matrix
    sigma_w: Matrix
    d: list[float] | None = None
    index_sets: list[list[int]]
    input_dims: list[int]
    Q_list: list[Matrix]
    R_list: list[Matrix]


class GraphSpec(_Strict):
    edges: list[tuple[int, int]] | None = None
    weights: Literal["auto", "metropolis", "wall", "explicit"] = "auto"
    matrix: Matrix | None = None

    @model_validator(mode="after")
    def _matrix_iff_explicit(self):
        if (self.weights == "explicit") != (self.matrix is not None):
            raise ValueError("'matrix' must be given exactly when weights = 'explicit'")
        return self


class ZodpoSpec(_Strict):
    r: PosFloat
    eta: NonNegFloat
    j_bar: PosFloat = 1e6
    T_G: int = Field(ge=0)
    T_J: int = Field(ge=1)
    T_S: int = Field(default=10, ge=1)
    learn_bias: bool = False
    learn_feedforward: bool = False


class SweepSpec(_Strict):
    T_J: list[int] | None = None
    r: list[PosFloat] | None = None
    eta: list[NonNegFloat] | None = None


class ExperimentConfig(_Strict):
    schema_version: Literal[1] = 1
    system: Union[HvacSystemSpec, ExplicitSystemSpec] = Field(discriminator="kind")
    graph: GraphSpec = GraphSpec()
    zodpo: ZodpoSpec
    initial_policy: list[float] | None = None
    trials: int = Field(default=1, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    oracle: bool = True
    oracle_gradient: bool = True
    checkpoints: list[int] | None = None
    sweep: SweepSpec | None = None
    output_dir: str = "runs"


def _format_pydantic(exc: PydanticValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"field {loc}: {err['msg']}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.model_validate(data)
    except PydanticValidationError as exc:
        raise ConfigError(f"{source}: invalid configuration\n{_format_pydantic(exc)}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


@dataclass
class Problem:
    """Everything one trial needs, built from a config."""

    system: LinearSystem
    pattern: ObservationPattern
    cost: QuadraticCost
    W: ConsensusMatrix
    template: DecentralizedPolicy
    zodpo: ZodpoSpec
    exo: float | Callable[[int], float] | None
    oracle_exo: float
    hvac: object | None = None

    def run_config(self, seed: int) -> ZodpoConfig:
        z = self.zodpo
        return ZodpoConfig(
            r=z.r, eta=z.eta, j_bar=z.j_bar, T_G=z.T_G, T_J=z.T_J, T_S=z.T_S,
            seed=seed, learn_bias=z.learn_bias, learn_feedforward=z.learn_feedforward,
        )


def _hvac_params(spec: HvacSystemSpec) -> HvacParams:
    p = spec.params.model_dump()
    if spec.layout == "four_zone":
        return four_zone(**p)
    if spec.layout == "twenty_zone":
        return twenty_zone(four_zone(**p))
    edges = frozenset((a - 1, b - 1) for a, b in spec.layout.adjacency)
    return HvacParams(N=spec.layout.N, adjacency=edges, **p)


def _weights(graph_spec: GraphSpec, graph: CommGraph, hvac_params: HvacParams | None) -> ConsensusMatrix:
    kind = graph_spec.weights
    if kind == "explicit":
        return explicit_weights(np.array(graph_spec.matrix, dtype=float), graph)
    if kind == "metropolis":
        return metropolis_weights(graph)
    if kind == "wall":
        if hvac_params is None:
            raise ValidationError("'wall' weights need an hvac system")
        return wall_weights(hvac_params)
    if hvac_params is not None and graph_spec.edges is None:
        return default_weights(hvac_params)
    return metropolis_weights(graph)


def build_problem(cfg: ExperimentConfig) -> Problem:
    try:
        return _build_problem(cfg)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(f"configuration is inconsistent: {exc}") from exc


def _build_problem(cfg: ExperimentConfig) -> Problem:
    spec = cfg.system
    z = cfg.zodpo
    hvac = None
    hvac_params = None
    if isinstance(spec, HvacSystemSpec):
        hvac_params = _hvac_params(spec)
        schedule = OutdoorSchedule(**spec.schedule.model_dump(exclude={"values"}), values=tuple(spec.schedule.values))
        hvac = hvac_build(hvac_params, schedule)
        system, pattern, cost = hvac.system, hvac.pattern, hvac.cost
        if schedule.kind == "constant":
            exo = float(schedule.value)
        else:
            T_J = z.T_J
            needed = max(z.T_G - 1, 0) * T_J + 1
            if schedule.kind == "table" and len(schedule.values) < needed:
                raise ValidationError(f"table schedule has {len(schedule.values)} values, run needs {needed}")

            def exo(s, _sched=schedule, _T=T_J):
                return _sched((s - 1) * _T)

        oracle_exo = schedule.reference()
        N = hvac_params.N
    else:
        n = len(spec.A)
        system = LinearSystem(np.array(spec.A), np.array(spec.B), np.array(spec.sigma_w), d=spec.d)
        pattern = ObservationPattern.from_one_based(n, spec.index_sets, spec.input_dims)
        cost = QuadraticCost(tuple(np.array(q) for q in spec.Q_list), tuple(np.array(r) for r in spec.R_list))
        exo, oracle_exo = None, 0.0
        N = pattern.N
        if cost.N != N:
            raise ValidationError(f"{cost.N} cost pairs for {N} agents")

    if cfg.graph.edges is not None:
        graph = CommGraph.from_one_based(N, cfg.graph.edges)
    elif hvac_params is not None:
        graph = CommGraph(N, hvac_params.adjacency)
    else:
        graph = CommGraph.complete(N)
    W = _weights(cfg.graph, graph, hvac_params)

    template = DecentralizedPolicy.zeros(pattern, bias=z.learn_bias, feedforward=z.learn_feedforward)
    if cfg.initial_policy is not None:
        template = template.with_vector(np.array(cfg.initial_policy, dtype=float))
    return Problem(system, pattern, cost, W, template, z, exo, oracle_exo, hvac)


def sweep_points(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """Expand the sweep axes into named single-run configs (cartesian product)."""
    if cfg.sweep is None:
        return [("base", cfg)]
    axes = {k: v for k, v in cfg.sweep.model_dump().items() if v}
    if not axes:
        return [("base", cfg)]
    points = [({}, "")]
    for key, values in axes.items():
        points = [({**d, key: v}, f"{name}_{key}={v}" if name else f"{key}={v}") for d, name in points for v in values]
    out = []
    for overrides, name in points:
        zodpo = cfg.zodpo.model_copy(update=overrides)
        out.append((name, cfg.model_copy(update={"zodpo": zodpo, "sweep": None})))
    return out
