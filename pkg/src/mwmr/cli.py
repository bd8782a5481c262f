"""Command line front end: bench, check, quorums, serve, client."""

from __future__ import annotations

import argparse
import signal
import sys
import threading
from fractions import Fraction
from typing import List, Optional

from . import bench, checker, netio, quorums
from .protocols import Algorithm


def _add_bench(subparsers) -> None:
    p = subparsers.add_parser("bench", help="run experiment cells and emit CSV")
    p.add_argument("--algo", choices=[a.value for a in Algorithm], action="append",
                   help="algorithm; repeatable; default all four")
    p.add_argument("--mode", choices=["sim", "net"], default="sim")
    p.add_argument("--matrix", choices=sorted(bench.MATRICES),
                   help="run a predefined grid instead of one cell")
    p.add_argument("--readers", type=int, default=10)
    p.add_argument("--writers", type=int, default=10)
    p.add_argument("--servers", type=int, default=10)
    p.add_argument("-f", "--failures", type=int, default=1, dest="f")
    p.add_argument("--rint", type=float, default=4.0)
    p.add_argument("--wint", type=float, default=4.0)
    p.add_argument("--ops", type=int, default=25)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--budget", type=float, default=300.0,
                   help="simulated time budget in seconds")
    p.add_argument("--crashes", action="store_true")
    p.add_argument("--crash-chance", type=float, default=0.05)
    p.add_argument("--measure-computation", action="store_true",
                   help="add host wall-clock predicate time to simulated latency "
                        "(breaks bit-for-bit reproducibility)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="CSV output path; stdout when omitted")


def _cmd_bench(args) -> int:
    algorithms = (
        [Algorithm.parse(a) for a in args.algo] if args.algo else bench.ALL_ALGORITHMS
    )
    if args.matrix:
        cells = bench.MATRICES[args.matrix]
    else:
        cells = (bench.MatrixCell(args.readers, args.writers, args.servers, args.f),)
    if args.mode == "sim":
        csv_text = bench.run_matrix(
            cells,
            algorithms,
            repeats=args.repeats,
            base_seed=args.seed,
            jobs=args.jobs,
            r_int=args.rint,
            w_int=args.wint,
            ops_per_client=args.ops,
            crashes_enabled=args.crashes,
            crash_chance=args.crash_chance,
            sim_time_budget=args.budget,
            measure_computation=args.measure_computation,
        )
    else:
        lines = [bench.CSV_HEADER]
        for algorithm in algorithms:
            for cell in cells:
                results = bench.run_net_cell(
                    algorithm,
                    cell,
                    ops=args.ops,
                    r_int=args.rint,
                    w_int=args.wint,
                    seed=args.seed,
                )
                qs = quorums.build_majority_system(cell.servers, cell.f)
                m = bench.aggregate_metrics(results)
                lines.append(
                    ",".join(
                        [
                            f"{algorithm.value},{cell.readers},{cell.writers},"
                            f"{cell.servers},{cell.f}",
                            str(qs.degree),
                            str(len(qs.quorums)),
                            str(args.seed),
                            bench._fmt(m.pct_slow_reads),
                            bench._fmt(m.pct_slow_writes),
                            bench._fmt(m.avg_read_latency),
                            bench._fmt(m.avg_write_latency),
                            str(m.completed_reads),
                            str(m.completed_writes),
                        ]
                    )
                )
        csv_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    return 0


def _add_check(subparsers) -> None:
    p = subparsers.add_parser("check", help="check atomicity of history CSVs")
    p.add_argument("--history", action="append", required=True,
                   help="history CSV; repeatable, merged before checking")
    p.add_argument("--skew", type=float, default=0.05,
                   help="clock-skew allowance in seconds (default 0.05)")


def _cmd_check(args) -> int:
    events = []
    for path in args.history:
        events.extend(checker.read_history_csv(path))
    write_tags = checker.derive_write_tags(events)
    verdict = checker.check_atomicity(
        events, write_tags, epsilon=Fraction(str(args.skew))
    )
    if verdict.ok:
        print(f"OK: {len(events)} events atomic under skew {args.skew}s")
        return 0
    v = verdict.violation
    print(f"VIOLATION {v.rule}: {v.detail}")
    for ev in v.events:
        print(f"  {ev.process} op {ev.op_seq} {ev.kind.value} at {ev.time}")
    return 1


def _add_quorums(subparsers) -> None:
    p = subparsers.add_parser("quorums", help="generate a majority quorum file")
    p.add_argument("--servers", type=int, required=True)
    p.add_argument("-f", "--failures", type=int, required=True, dest="f")
    p.add_argument("--out", required=True)


def _cmd_quorums(args) -> int:
    qs = quorums.build_majority_system(args.servers, args.f)
    quorums.write_quorum_file(qs, args.out)
    print(
        f"wrote {len(qs.quorums)} quorums of size {qs.quorum_size} "
        f"(degree {qs.degree}) to {args.out}"
    )
    return 0


def _add_serve(subparsers) -> None:
    p = subparsers.add_parser("serve", help="run a replica server")
    p.add_argument("--config", required=True)


def _cmd_serve(args) -> int:
    cfg = netio.load_deployment_config(args.config)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    netio.run_server(cfg, stop)
    return 0


def _add_client(subparsers) -> None:
    p = subparsers.add_parser("client", help="run a reader or writer")
    p.add_argument("--config", required=True)


def _cmd_client(args) -> int:
    cfg = netio.load_deployment_config(args.config)
    result = netio.run_client(cfg)
    print(
        f"{cfg.role}: {result.completed_reads} reads, "
        f"{result.completed_writes} writes completed"
        + (f", history in {cfg.history_out}" if cfg.history_out else "")
    )
    return 0 if not result.incomplete else 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mwmr",
        description="Atomic MWMR register algorithms: simulate, deploy, verify",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_bench(subparsers)
    _add_check(subparsers)
    _add_quorums(subparsers)
    _add_serve(subparsers)
    _add_client(subparsers)
    args = parser.parse_args(argv)
    handlers = {
        "bench": _cmd_bench,
        "check": _cmd_check,
        "quorums": _cmd_quorums,
        "serve": _cmd_serve,
        "client": _cmd_client,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
