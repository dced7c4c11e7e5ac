"""Batch experiment driver: seeded trials, CSV traces, summaries, self-test."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_problem, sweep_points
from .engine import RunTrace, zodpo_run
from .errors import ValidationError
from .oracle import ModelOracle

log = logging.getLogger(__name__)

BAND = (15.0, 85.0)


def trial_seeds(master_seed: int, trials: int) -> list[int]:
    """Per-trial 64-bit seeds fanned out from the master seed."""
    state = np.random.SeedSequence(master_seed).generate_state(trials, dtype=np.uint64)
    return [int(s) for s in state]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return repr(float(v))


def trace_header(N: int, n_params: int) -> list[str]:
    return (
        ["iter"]
        + [f"agent_jhat_{i}" for i in range(1, N + 1)]
        + ["oracle_cost", "spectral_radius", "stable", "grad_norm_sq", "diverged"]
        + [f"k_{j}" for j in range(1, n_params + 1)]
    )


def trace_to_csv(trace: RunTrace, N: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(trace_header(N, trace.template.n_params))
    for row in trace.rows:
        jhat = [""] * N if row.j_hat is None else [_fmt(v) for v in row.j_hat]
        writer.writerow(
            [str(row.iteration)]
            + jhat
            + [_fmt(row.oracle_cost), _fmt(row.spectral_radius), _fmt(row.stable), _fmt(row.grad_norm_sq), _fmt(row.diverged)]
            + [_fmt(v) for v in row.params]
        )
    return buf.getvalue()


@dataclass
class TraceTable:
    """Parsed trace file."""

    iterations: np.ndarray
    j_hat: np.ndarray
    oracle_cost: np.ndarray
    stable: np.ndarray
    params: np.ndarray

    def __len__(self) -> int:
        return len(self.iterations)


def _parse(v: str) -> float:
    return float(v) if v != "" else np.nan


def read_trace(path) -> TraceTable:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: trace has no data rows")
    header = rows[0]
    N = sum(h.startswith("agent_jhat_") for h in header)
    kcols = [i for i, h in enumerate(header) if h.startswith("k_")]
    col = {h: i for i, h in enumerate(header)}
    data = rows[1:]
    return TraceTable(
        iterations=np.array([int(r[0]) for r in data]),
        j_hat=np.array([[_parse(v) for v in r[1 : 1 + N]] for r in data]),
        oracle_cost=np.array([_parse(r[col["oracle_cost"]]) for r in data]),
        stable=np.array([_parse(r[col["stable"]]) for r in data]),
        params=np.array([[float(r[i]) for i in kcols] for r in data]),
    )


def pick_output(params: np.ndarray, rule: str = "last", seed: int = 0) -> tuple[int, np.ndarray]:
    """Select the output policy from a trace.

    ``rule="last"`` returns ``K(T_G)``; ``rule="uniform"`` draws ``s``
    uniformly from ``1..T_G`` (falling back to ``K(0)`` when ``T_G = 0``).
    """
    params = np.asarray(params)
    if params.ndim != 2 or len(params) == 0:
        raise ValidationError("cannot pick from an empty trace")
    T_G = len(params) - 1
    if rule == "last":
        s = T_G
    elif rule == "uniform":
        s = 0 if T_G == 0 else int(np.random.default_rng(seed).integers(1, T_G + 1))
    else:
        raise ValidationError(f"unknown pick rule {rule!r}")
    return s, params[s]


@dataclass
class SummaryRow:
    checkpoint: int
    mean_cost: float | None
    band_lo: float | None
    band_hi: float | None
    frac_unstable: float | None
    n_trials: int


def summarize(costs: np.ndarray, stable: np.ndarray, checkpoints) -> list[SummaryRow]:
    """Per-checkpoint statistics across trials.

    ``costs`` and ``stable`` have shape ``(trials, T_G + 1)``. Means and the
    15th/85th percentile band are taken over the stabilizing runs; NaN costs
    (oracle off) give empty statistics.
    """
    out = []
    for c in checkpoints:
        col = costs[:, c]
        st = stable[:, c]
        if np.all(np.isnan(col)):
            out.append(SummaryRow(c, None, None, None, None, len(col)))
            continue
        ok = (st == 1) & np.isfinite(col)
        frac = float(1.0 - ok.mean())
        if ok.any():
            lo, hi = np.percentile(col[ok], BAND)
            out.append(SummaryRow(c, float(np.mean(col[ok])), float(lo), float(hi), frac, len(col)))
        else:
            out.append(SummaryRow(c, None, None, None, frac, len(col)))
    return out


def summary_to_csv(rows: list[SummaryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["checkpoint", "mean_cost", "band_lo", "band_hi", "frac_unstable", "n_trials"])
    for r in rows:
        writer.writerow([r.checkpoint, _fmt(r.mean_cost), _fmt(r.band_lo), _fmt(r.band_hi), _fmt(r.frac_unstable), r.n_trials])
    return buf.getvalue()


def summary_from_traces(paths, checkpoints=None) -> list[SummaryRow]:
    tables = [read_trace(p) for p in paths]
    costs = np.stack([t.oracle_cost for t in tables])
    stable = np.stack([t.stable for t in tables])
    if checkpoints is None:
        checkpoints = list(range(costs.shape[1]))
    return summarize(costs, stable, checkpoints)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_trial(cfg: ExperimentConfig, seed: int, oracle: bool | None = None) -> RunTrace:
    problem = build_problem(cfg)
    use_oracle = cfg.oracle if oracle is None else oracle
    orc = None
    if use_oracle:
        orc = ModelOracle(problem.system, problem.pattern, problem.cost, exo=problem.oracle_exo, gradient=cfg.oracle_gradient)
    return zodpo_run(
        problem.system, problem.pattern, problem.cost, problem.W, problem.run_config(seed), problem.template,
        oracle=orc, exo=problem.exo,
    )


def _trial_csv(args) -> str:
    cfg_json, seed, oracle = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    trace = run_trial(cfg, seed, oracle)
    return trace_to_csv(trace, trace.template.N)


@dataclass
class RunResult:
    out_dir: Path
    trace_files: list[Path]
    summary_file: Path
    summary: list[SummaryRow]


def run(cfg: ExperimentConfig, out_dir=None, jobs: int | None = None, oracle: bool | None = None) -> RunResult:
    """Execute every trial of ``cfg`` and write traces plus a summary.

    File contents depend only on the config and master seed, never on ``jobs``.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    build_problem(cfg)  # fail fast before spawning workers
    seeds = trial_seeds(cfg.seed, cfg.trials)
    jobs = jobs or os.cpu_count() or 1
    payload = [(cfg.model_dump_json(), s, oracle) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            texts = list(pool.map(_trial_csv, payload))
    else:
        texts = [_trial_csv(p) for p in payload]
    files = []
    for s, text in zip(seeds, texts):
        path = out / f"trial_{s}.csv"
        atomic_write(path, text)
        files.append(path)
    checkpoints = cfg.checkpoints if cfg.checkpoints is not None else list(range(cfg.zodpo.T_G + 1))
    bad = [c for c in checkpoints if not 0 <= c <= cfg.zodpo.T_G]
    if bad:
        raise ValidationError(f"checkpoints outside 0..{cfg.zodpo.T_G}: {bad}")
    rows = summary_from_traces(files, checkpoints)
    summary_file = out / "summary.csv"
    atomic_write(summary_file, summary_to_csv(rows))
    atomic_write(out / "config.json", cfg.model_dump_json(indent=2) + "\n")
    log.info("wrote %d traces and %s", len(files), summary_file)
    return RunResult(out, files, summary_file, rows)


def sweep(cfg: ExperimentConfig, out_dir=None, jobs: int | None = None, oracle: bool | None = None) -> dict[str, RunResult]:
    """Run each point of the sweep grid into its own subdirectory."""
    base = Path(out_dir if out_dir is not None else cfg.output_dir)
    results = {}
    lines = []
    for name, point in sweep_points(cfg):
        res = run(point, base / name, jobs=jobs, oracle=oracle)
        results[name] = res
        for r in res.summary:
            lines.append([name, r.checkpoint, _fmt(r.mean_cost), _fmt(r.band_lo), _fmt(r.band_hi), _fmt(r.frac_unstable), r.n_trials])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point", "checkpoint", "mean_cost", "band_lo", "band_hi", "frac_unstable", "n_trials"])
    writer.writerows(lines)
    atomic_write(base / "sweep_summary.csv", buf.getvalue())
    return results


def write_json(path, obj) -> None:
    atomic_write(Path(path), json.dumps(obj, indent=2) + "\n")
