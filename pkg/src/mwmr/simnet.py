"""Deterministic discrete-event simulation of the protocols over lossy time.

The network model is delay-only: every message delivery costs the link
latency plus a uniform per-message processing delay. Server crashes follow
a timer-halving schedule, with one quorum drawn up front and kept correct
so operations always terminate. All randomness comes from streams derived
from the scenario seed, split per process in fixed id order, so a run is a
pure function of its configuration.
"""

from __future__ import annotations

import heapq
import random
import time as _time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Set, Tuple, Union

from .core import (
    EventKind,
    HistoryEvent,
    ProcessId,
    Role,
    Tag,
    WriteId,
    reader,
    server,
    writer,
)
from .protocols import (
    Algorithm,
    ClientSession,
    Completion,
    INVOKE,
    OpKind,
    ProtocolMessage,
    Reply,
    SfwReplica,
    SimpleReplica,
    client_step,
    sfw_server_apply,
    simple_server_apply,
)
from .quorums import QuorumSystem, build_majority_system

Seconds = Union[int, float, str, Fraction]


def _frac(x: Seconds) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(x)


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated deployment; see module docstring for the model."""

    algorithm: Algorithm
    readers: int
    writers: int
    servers: int
    f: int
    link_latency: Fraction = Fraction(1, 100)
    proc_delay_max: Fraction = Fraction(3, 10)
    r_int: Fraction = Fraction(4)
    w_int: Fraction = Fraction(4)
    ops_per_client: int = 25
    crashes_enabled: bool = False
    crash_chance: Fraction = Fraction(1, 20)
    sim_time_budget: Fraction = Fraction(300)
    seed: int = 0
    measure_computation: bool = False

    def __post_init__(self) -> None:
        for name in (
            "link_latency",
            "proc_delay_max",
            "r_int",
            "w_int",
            "crash_chance",
            "sim_time_budget",
        ):
            object.__setattr__(self, name, _frac(getattr(self, name)))
        if min(self.readers, self.writers, self.ops_per_client) < 0:
            raise ValueError("participant and operation counts must be >= 0")
        for name in ("link_latency", "proc_delay_max", "r_int", "w_int", "sim_time_budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.crash_chance <= 1:
            raise ValueError("crash_chance must be within [0, 1]")


@dataclass(frozen=True)
class OpRecord:
    process: ProcessId
    op_seq: int
    kind: OpKind
    invoke_time: Fraction
    respond_time: Fraction
    rounds: int
    tag: Tag

    @property
    def latency(self) -> Fraction:
        return self.respond_time - self.invoke_time


@dataclass
class RunResult:
    """Everything one execution produced; feeds the checker and the metrics."""

    config: Optional[ScenarioConfig]
    ops_target: int
    history: List[HistoryEvent]
    records: List[OpRecord]
    completed_reads: int
    completed_writes: int
    crashed_servers: FrozenSet[int]
    incomplete: Tuple[Tuple[ProcessId, int], ...]
    write_tags: Dict[WriteId, Tag]

    @property
    def truncated(self) -> bool:
        return bool(self.incomplete)

    def terminated_processes(self) -> Set[ProcessId]:
        """Clients that finished their whole workload."""
        done: Dict[ProcessId, int] = {}
        for rec in self.records:
            done[rec.process] = done.get(rec.process, 0) + 1
        return {p for p, n in done.items() if n >= self.ops_target > 0}


def _stream(seed: int, label: str, who: str) -> random.Random:
    # String seeding hashes via sha512 inside random, so it is stable across
    # runs and interpreters, and adding processes never shifts other streams.
    return random.Random(f"{seed}:{label}:{who}")


def sample_message_delay(rng: random.Random, cfg: ScenarioConfig) -> Fraction:
    """Link latency plus uniform processing delay, exact and seed-driven."""
    return cfg.link_latency + Fraction(rng.random()) * cfg.proc_delay_max


def schedule_crashes(
    cfg: ScenarioConfig, rng: random.Random, correct_quorum: FrozenSet[int]
) -> List[Tuple[int, Fraction]]:
    """Crash times for unprotected servers under the halving-timer model.

    Each server outside the protected quorum re-arms a timer starting at a
    third of the budget, halving until it drops below one second, and rolls
    the crash chance at every expiry; the first success fixes its crash
    time. Servers may well survive every roll.
    """
    plan: List[Tuple[int, Fraction]] = []
    for s in range(cfg.servers):
        if s in correct_quorum:
            continue
        interval = cfg.sim_time_budget / 3
        now = Fraction(0)
        while interval >= 1:
            now += interval
            if Fraction(rng.random()) < cfg.crash_chance:
                plan.append((s, now))
                break
            interval /= 2
    return plan


@dataclass
class _Client:
    pid: ProcessId
    gap_rng: random.Random
    send_rng: random.Random
    interval: Fraction
    done: int = 0
    session: Optional[ClientSession] = None
    invoke_time: Optional[Fraction] = None

    def next_gap(self) -> Fraction:
        return Fraction(self.gap_rng.random()) * self.interval


_INVOKE_KIND = {OpKind.READ: EventKind.READ_INVOKE, OpKind.WRITE: EventKind.WRITE_INVOKE}
_RESPOND_KIND = {OpKind.READ: EventKind.READ_RESPOND, OpKind.WRITE: EventKind.WRITE_RESPOND}


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    """Run one scenario to quiescence or to the time budget."""
    qs = build_majority_system(cfg.servers, cfg.f)

    fault_rng = _stream(cfg.seed, "fault", "all")
    correct_quorum = qs.quorums[fault_rng.randrange(len(qs.quorums))]
    crash_plan = (
        schedule_crashes(cfg, fault_rng, correct_quorum) if cfg.crashes_enabled else []
    )

    simple = cfg.algorithm in (Algorithm.SIMPLE, Algorithm.CWFR)
    replicas = [SimpleReplica() if simple else SfwReplica() for _ in range(cfg.servers)]
    apply_fn = simple_server_apply if simple else sfw_server_apply
    server_rngs = [_stream(cfg.seed, "send", str(server(s))) for s in range(cfg.servers)]

    clients: Dict[ProcessId, _Client] = {}
    for i in range(cfg.readers):
        pid = reader(i)
        clients[pid] = _Client(
            pid,
            _stream(cfg.seed, "gap", str(pid)),
            _stream(cfg.seed, "send", str(pid)),
            cfg.r_int,
        )
    for i in range(cfg.writers):
        pid = writer(i)
        clients[pid] = _Client(
            pid,
            _stream(cfg.seed, "gap", str(pid)),
            _stream(cfg.seed, "send", str(pid)),
            cfg.w_int,
        )

    heap: List[Tuple[Fraction, int, str, tuple]] = []
    counter = 0

    def push(at: Fraction, kind: str, data: tuple) -> None:
        nonlocal counter
        counter += 1
        heapq.heappush(heap, (at, counter, kind, data))

    for s, at in crash_plan:
        push(at, "crash", (s,))
    for pid, client in clients.items():
        if cfg.ops_per_client > 0:
            push(client.next_gap(), "invoke", (pid,))

    history: List[HistoryEvent] = []
    records: List[OpRecord] = []
    write_tags: Dict[WriteId, Tag] = {}
    crashed: Set[int] = set()
    completed = {OpKind.READ: 0, OpKind.WRITE: 0}

    def dispatch(at: Fraction, client: _Client, sends) -> None:
        for dest, msg in sends:
            delay = sample_message_delay(client.send_rng, cfg)
            push(at + delay, "to_server", (dest, msg, client.pid))

    def complete_op(at: Fraction, client: _Client, done: Completion) -> None:
        history.append(
            HistoryEvent(
                client.pid, done.op_seq, _RESPOND_KIND[done.kind], at, done.tag, done.rounds
            )
        )
        records.append(
            OpRecord(
                client.pid,
                done.op_seq,
                done.kind,
                client.invoke_time,
                at,
                done.rounds,
                done.tag,
            )
        )
        completed[done.kind] += 1
        if done.kind is OpKind.WRITE:
            write_tags[WriteId(client.pid, done.op_seq)] = done.tag
        client.session = None
        client.invoke_time = None
        client.done += 1
        if client.done < cfg.ops_per_client:
            push(at + client.next_gap(), "invoke", (client.pid,))

    while heap:
        at, _, kind, data = heapq.heappop(heap)
        if at > cfg.sim_time_budget:
            break
        if kind == "crash":
            crashed.add(data[0])
        elif kind == "invoke":
            (pid,) = data
            client = clients[pid]
            op_seq = client.done + 1
            if pid.role is Role.READER:
                session = ClientSession.for_read(cfg.algorithm, pid, op_seq)
                ev_kind = EventKind.READ_INVOKE
            else:
                value = f"{pid}.{op_seq}".encode("ascii")
                session = ClientSession.for_write(cfg.algorithm, pid, op_seq, value, op_seq)
                ev_kind = EventKind.WRITE_INVOKE
            client.session = session
            client.invoke_time = at
            history.append(HistoryEvent(pid, op_seq, ev_kind, at))
            result = client_step(session, INVOKE, qs)
            dispatch(at, client, result.sends)
        elif kind == "to_server":
            dest, msg, from_pid = data
            if dest in crashed:
                continue
            replicas[dest], reply_msg = apply_fn(replicas[dest], msg, server(dest))
            delay = sample_message_delay(server_rngs[dest], cfg)
            push(at + delay, "to_client", (from_pid, dest, reply_msg))
        elif kind == "to_client":
            pid, from_server, msg = data
            client = clients[pid]
            if client.session is None:
                continue
            started = _time.perf_counter() if cfg.measure_computation else 0.0
            result = client_step(client.session, Reply(from_server, msg), qs)
            when = at
            if cfg.measure_computation:
                when = at + Fraction(str(_time.perf_counter() - started))
            dispatch(when, client, result.sends)
            if result.completion is not None:
                complete_op(when, client, result.completion)

    incomplete = tuple(
        (pid, client.session.op_seq)
        for pid, client in clients.items()
        if client.session is not None
    )
    history.sort(key=lambda e: (e.time, e.process.role, e.process.index, e.op_seq))
    return RunResult(
        config=cfg,
        ops_target=cfg.ops_per_client,
        history=history,
        records=records,
        completed_reads=completed[OpKind.READ],
        completed_writes=completed[OpKind.WRITE],
        crashed_servers=frozenset(crashed),
        incomplete=incomplete,
        write_tags=write_tags,
    )
