"""Experiment harness: scenario matrices, metric aggregation, CSV emission.

Latency averages are weighted the way long multi-run experiments need:
total operation latency over all runs divided by the total number of
clients that finished their workload, so runs where more clients survive
count for more. The per-run (non-weighted) figures are kept alongside.
"""

from __future__ import annotations

import concurrent.futures
import io
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .core import Role
from .protocols import Algorithm, OpKind
from .quorums import build_majority_system
from .simnet import RunResult, ScenarioConfig, run_scenario

CSV_HEADER = (
    "algo,readers,writers,servers,f,degree,quorums,seed,"
    "pct_slow_r,pct_slow_w,avg_lat_r,avg_lat_w,completed_r,completed_w"
)


@dataclass(frozen=True)
class RunMetrics:
    """Counters for one run, restricted to clients that terminated."""

    terminated_readers: int
    terminated_writers: int
    completed_reads: int
    completed_writes: int
    slow_reads: int
    slow_writes: int
    total_read_latency: Fraction
    total_write_latency: Fraction

    @property
    def avg_read_latency(self) -> Optional[Fraction]:
        if self.terminated_readers == 0:
            return None
        return self.total_read_latency / self.terminated_readers

    @property
    def avg_write_latency(self) -> Optional[Fraction]:
        if self.terminated_writers == 0:
            return None
        return self.total_write_latency / self.terminated_writers


@dataclass(frozen=True)
class Metrics:
    """Pooled metrics over a batch of runs, plus the per-run breakdown."""

    per_run: Tuple[RunMetrics, ...]
    scenario: Optional[ScenarioConfig]
    completed_reads: int
    completed_writes: int
    slow_reads: int
    slow_writes: int
    terminated_readers: int
    terminated_writers: int
    pct_slow_reads: Optional[Fraction]
    pct_slow_writes: Optional[Fraction]
    avg_read_latency: Optional[Fraction]
    avg_write_latency: Optional[Fraction]
    nonweighted_avg_read_latency: Optional[Fraction]
    nonweighted_avg_write_latency: Optional[Fraction]


def weighted_average(parts: Iterable[Tuple[Fraction, int]]) -> Optional[Fraction]:
    """Sum of totals over sum of counts; None when nothing terminated."""
    total = Fraction(0)
    count = 0
    for t, c in parts:
        total += Fraction(t)
        count += c
    if count == 0:
        return None
    return total / count


def non_weighted_average(parts: Iterable[Tuple[Fraction, int]]) -> Optional[Fraction]:
    """Mean of the per-run averages, each run weighing the same."""
    averages = [Fraction(t) / c for t, c in parts if c > 0]
    if not averages:
        return None
    return sum(averages) / len(averages)


def run_metrics(result: RunResult) -> RunMetrics:
    terminated = result.terminated_processes()
    readers = {p for p in terminated if p.role is Role.READER}
    writers = {p for p in terminated if p.role is Role.WRITER}
    counted = [rec for rec in result.records if rec.process in terminated]
    reads = [rec for rec in counted if rec.kind is OpKind.READ]
    writes = [rec for rec in counted if rec.kind is OpKind.WRITE]
    return RunMetrics(
        terminated_readers=len(readers),
        terminated_writers=len(writers),
        completed_reads=len(reads),
        completed_writes=len(writes),
        slow_reads=sum(1 for r in reads if r.rounds == 2),
        slow_writes=sum(1 for w in writes if w.rounds == 2),
        total_read_latency=sum((r.latency for r in reads), Fraction(0)),
        total_write_latency=sum((w.latency for w in writes), Fraction(0)),
    )


def aggregate_metrics(results: Sequence[RunResult]) -> Metrics:
    """Pool a batch of runs; zero-denominator figures stay None, never 0."""
    if not results:
        raise ValueError("aggregate_metrics needs at least one run")
    per_run = tuple(run_metrics(r) for r in results)
    completed_reads = sum(m.completed_reads for m in per_run)
    completed_writes = sum(m.completed_writes for m in per_run)
    slow_reads = sum(m.slow_reads for m in per_run)
    slow_writes = sum(m.slow_writes for m in per_run)
    read_parts = [(m.total_read_latency, m.terminated_readers) for m in per_run]
    write_parts = [(m.total_write_latency, m.terminated_writers) for m in per_run]
    return Metrics(
        per_run=per_run,
        scenario=results[0].config,
        completed_reads=completed_reads,
        completed_writes=completed_writes,
        slow_reads=slow_reads,
        slow_writes=slow_writes,
        terminated_readers=sum(m.terminated_readers for m in per_run),
        terminated_writers=sum(m.terminated_writers for m in per_run),
        pct_slow_reads=(
            Fraction(100) * slow_reads / completed_reads if completed_reads else None
        ),
        pct_slow_writes=(
            Fraction(100) * slow_writes / completed_writes if completed_writes else None
        ),
        avg_read_latency=weighted_average(read_parts),
        avg_write_latency=weighted_average(write_parts),
        nonweighted_avg_read_latency=non_weighted_average(read_parts),
        nonweighted_avg_write_latency=non_weighted_average(write_parts),
    )


@dataclass(frozen=True)
class MatrixCell:
    readers: int
    writers: int
    servers: int
    f: int


SMOKE_MATRIX = (MatrixCell(2, 2, 5, 1),)

# Desk-scale default: the full grid is exponential for the exact engine.
DESK_MATRIX = tuple(
    MatrixCell(c, c, s, f)
    for f in (1, 2)
    for s in (10, 15)
    for c in (10, 20)
    if s // f - 1 >= 2
)

FULL_MATRIX = tuple(
    MatrixCell(c, c, s, f)
    for f in (1, 2)
    for s in (10, 15, 20, 25)
    for c in (10, 20, 40, 80)
)

MATRICES = {"smoke": SMOKE_MATRIX, "desk": DESK_MATRIX, "full": FULL_MATRIX}

ALL_ALGORITHMS = (Algorithm.SIMPLE, Algorithm.SFW, Algorithm.APRX_SFW, Algorithm.CWFR)


def run_cell(
    algorithm: Algorithm,
    cell: MatrixCell,
    repeats: int,
    base_seed: int,
    **overrides,
) -> List[RunResult]:
    """Seeded repeat runs of one cell; seeds are base + run index so the
    same draws recur across algorithms."""
    results = []
    for i in range(repeats):
        cfg = ScenarioConfig(
            algorithm=algorithm,
            readers=cell.readers,
            writers=cell.writers,
            servers=cell.servers,
            f=cell.f,
            seed=base_seed + i,
            **overrides,
        )
        results.append(run_scenario(cfg))
    return results


def _fmt(x: Optional[Fraction]) -> str:
    return "" if x is None else f"{float(x):.6f}"


def _cell_job(args) -> Tuple[int, str]:
    order, algorithm, cell, repeats, base_seed, overrides = args
    base = (
        f"{algorithm.value},{cell.readers},{cell.writers},{cell.servers},{cell.f}"
    )
    try:
        qs = build_majority_system(cell.servers, cell.f)
        results = run_cell(algorithm, cell, repeats, base_seed, **overrides)
        m = aggregate_metrics(results)
        row = ",".join(
            [
                base,
                str(qs.degree),
                str(len(qs.quorums)),
                str(base_seed),
                _fmt(m.pct_slow_reads),
                _fmt(m.pct_slow_writes),
                _fmt(m.avg_read_latency),
                _fmt(m.avg_write_latency),
                str(m.completed_reads),
                str(m.completed_writes),
            ]
        )
        return order, row
    except Exception as exc:
        print(
            f"cell failed ({algorithm.value} {cell}): {type(exc).__name__}: {exc}",
            file=sys.stderr,
        )
        return order, f"{base},,,{base_seed},,,,,,"


def run_matrix(
    cells: Sequence[MatrixCell],
    algorithms: Sequence[Algorithm] = ALL_ALGORITHMS,
    repeats: int = 5,
    base_seed: int = 0,
    jobs: int = 1,
    **overrides,
) -> str:
    """Run every (algorithm, cell) pair and render the metrics CSV.

    Failed cells become rows with empty metric fields (the error goes to
    stderr) and the rest of the matrix still runs. Output depends only on
    the inputs, never on worker scheduling.
    """
    job_args = [
        (i, algorithm, cell, repeats, base_seed, overrides)
        for i, (algorithm, cell) in enumerate(
            (a, c) for a in algorithms for c in cells
        )
    ]
    rows: Dict[int, str] = {}
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            for order, row in pool.map(_cell_job, job_args):
                rows[order] = row
    else:
        for args in job_args:
            order, row = _cell_job(args)
            rows[order] = row
    out = io.StringIO()
    out.write(CSV_HEADER + "\n")
    for i in range(len(job_args)):
        out.write(rows[i] + "\n")
    return out.getvalue()


def run_net_cell(
    algorithm: Algorithm,
    cell: MatrixCell,
    *,
    ops: int,
    r_int: float,
    w_int: float,
    seed: int,
) -> List[RunResult]:
    """Single-host loopback deployment of one cell over real sockets."""
    from .netio import run_loopback_workload

    qs = build_majority_system(cell.servers, cell.f)
    return run_loopback_workload(
        algorithm,
        qs,
        readers=cell.readers,
        writers=cell.writers,
        ops=ops,
        r_int=r_int,
        w_int=w_int,
        seed=seed,
    )
