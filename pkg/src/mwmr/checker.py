"""Atomicity checking over recorded read/write histories.

With unique per-write tags, a register history is atomic exactly when the
tag order respects real-time precedence; the conditions C0..C5 below state
that pairwise and are therefore decidable in O(N^2), which is plenty at
desk scale. Histories recorded on a real network carry per-process clocks,
so cross-process precedence is only assumed when intervals stay apart even
after allowing a clock-skew epsilon.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .core import (
    EventKind,
    HistoryEvent,
    ProcessId,
    Role,
    TAG_ZERO,
    Tag,
    WriteId,
)

HISTORY_COLUMNS = ("time", "role", "index", "op_seq", "kind", "ts", "wid", "wseq", "rounds")


class MalformedHistoryError(ValueError):
    """The event list is not a well-formed history; atomicity is undecidable."""


@dataclass(frozen=True)
class Violation:
    rule: str
    events: Tuple[HistoryEvent, HistoryEvent]
    detail: str


@dataclass(frozen=True)
class Verdict:
    ok: bool
    violation: Optional[Violation] = None

    def __bool__(self) -> bool:
        return self.ok


@dataclass
class _Op:
    process: ProcessId
    op_seq: int
    read: bool
    invoke: HistoryEvent
    respond: Optional[HistoryEvent] = None

    @property
    def tag(self) -> Optional[Tag]:
        return self.respond.tag if self.respond else None


def _canonical(history: Iterable[HistoryEvent]) -> List[HistoryEvent]:
    # Fixed order among equal-time events so the verdict is permutation-proof.
    return sorted(
        history,
        key=lambda e: (e.time, e.process.role, e.process.index, e.op_seq, e.kind.value),
    )


def _collect_ops(history: Sequence[HistoryEvent]) -> List[_Op]:
    ops: Dict[Tuple[ProcessId, int], _Op] = {}
    open_op: Dict[ProcessId, Tuple[ProcessId, int]] = {}
    last_time: Dict[ProcessId, Fraction] = {}

    for ev in history:
        if ev.time < 0:
            raise MalformedHistoryError(f"negative time on {ev}")
        prev = last_time.get(ev.process)
        if prev is not None and ev.time < prev:
            raise MalformedHistoryError(
                f"{ev.process}: time goes backwards at op {ev.op_seq}"
            )
        last_time[ev.process] = ev.time
        key = (ev.process, ev.op_seq)
        if ev.kind.is_invoke:
            if key in ops:
                raise MalformedHistoryError(f"duplicate invocation {key}")
            if ev.process in open_op:
                raise MalformedHistoryError(
                    f"{ev.process} invoked op {ev.op_seq} while "
                    f"op {open_op[ev.process][1]} is still open"
                )
            ops[key] = _Op(ev.process, ev.op_seq, ev.kind.is_read, ev)
            open_op[ev.process] = key
        else:
            op = ops.get(key)
            if op is None or op.respond is not None:
                raise MalformedHistoryError(f"response without open invocation {key}")
            if op.invoke.kind.respond_kind is not ev.kind:
                raise MalformedHistoryError(f"mismatched invoke/respond kinds {key}")
            if ev.tag is None or ev.rounds not in (1, 2):
                raise MalformedHistoryError(f"response {key} missing tag or rounds")
            op.respond = ev
            del open_op[ev.process]
    return list(ops.values())


def _precedes(a: _Op, b: _Op, epsilon: Fraction) -> bool:
    """Did a's response happen before b's invocation, beyond clock doubt?"""
    if a.respond is None:
        return False
    if a.process == b.process:
        # Same local clock: compare directly (well-formedness ordered them).
        return a.respond.time <= b.invoke.time and (a.process, a.op_seq) != (
            b.process,
            b.op_seq,
        )
    return a.respond.time + epsilon < b.invoke.time


def check_atomicity(
    history: Iterable[HistoryEvent],
    write_tags: Optional[Mapping[WriteId, Tag]] = None,
    epsilon: Fraction = Fraction(0),
) -> Verdict:
    """Decide atomicity of a history via the tag-order conditions.

    C0  one tag per write, across its own response and reads returning it
    C1  read tags come from the initial value or an already-invoked write
    C2  writes completed before another write started carry a smaller tag
    C3  a read after a completed write returns a tag at least as large
    C4  tags never go backwards across non-overlapping reads
    C5  a write after a completed read gets a strictly larger tag

    ``write_tags`` may supply tags of writes known out-of-band; tags of
    completed writes are also taken from the history itself. A write with
    no response is treated as possibly effective: reads may return its tag
    (C1) but it induces no precedence edges.
    """
    events = _canonical(history)
    ops = _collect_ops(events)
    epsilon = Fraction(epsilon)

    writes = [op for op in ops if not op.read]
    reads = [op for op in ops if op.read]

    known: Dict[WriteId, Tag] = {}
    if write_tags:
        known.update(write_tags)
    respond_of: Dict[WriteId, _Op] = {}
    for op in writes:
        wid = WriteId(op.process, op.op_seq)
        respond_of[wid] = op
        if op.respond is not None:
            if wid in known and known[wid] != op.tag:
                return Verdict(
                    False,
                    Violation(
                        "C0",
                        (op.respond, op.respond),
                        f"write {wid} responded {op.tag} but was recorded as {known[wid]}",
                    ),
                )
            known[wid] = op.tag

    # C0: server-side-ordered tags embed (writer, wseq); any read returning a
    # structurally matching tag must agree with the write's own tag exactly.
    returned: Dict[WriteId, Tuple[Tag, HistoryEvent]] = {}
    for op in reads:
        if op.respond is None:
            continue
        tag = op.tag
        if tag.wseq >= 1:
            wid = WriteId(ProcessId(Role.WRITER, tag.wid), tag.wseq)
            if wid in known and known[wid] != tag:
                anchor = respond_of[wid].respond or respond_of[wid].invoke
                return Verdict(
                    False,
                    Violation(
                        "C0",
                        (anchor, op.respond),
                        f"write {wid} has tag {known[wid]} but read returned {tag}",
                    ),
                )
            if wid not in known:
                seen = returned.get(wid)
                if seen is not None and seen[0] != tag:
                    return Verdict(
                        False,
                        Violation(
                            "C0",
                            (seen[1], op.respond),
                            f"reads returned both {seen[0]} and {tag} for write {wid}",
                        ),
                    )
                returned[wid] = (tag, op.respond)

    # C1: each returned tag must trace back to some write invoked early enough.
    tag_to_write: Dict[Tag, List[_Op]] = {}
    for op in writes:
        if op.respond is not None:
            tag_to_write.setdefault(op.tag, []).append(op)
    incomplete_writes = [op for op in writes if op.respond is None]
    for op in reads:
        if op.respond is None:
            continue
        tag = op.tag
        if tag == TAG_ZERO:
            continue
        deadline = op.respond.time + epsilon
        candidates = list(tag_to_write.get(tag, ()))
        for w in incomplete_writes:
            if tag.wseq >= 1:
                structural = (
                    tag.wid == w.process.index and tag.wseq == w.op_seq
                )
            else:
                structural = tag.wid == w.process.index
            if structural:
                candidates.append(w)
        ok = False
        for w in candidates:
            if w.process == op.process:
                ok = w.invoke.time <= op.respond.time
            else:
                ok = w.invoke.time <= deadline
            if ok:
                break
        if not ok:
            return Verdict(
                False,
                Violation(
                    "C1",
                    (op.invoke, op.respond),
                    f"read returned {tag} which belongs to no write invoked before it",
                ),
            )

    complete = [op for op in ops if op.respond is not None]
    checks = (
        ("C2", False, False, lambda ta, tb: ta < tb, "<"),
        ("C3", False, True, lambda ta, tb: tb >= ta, ">="),
        ("C4", True, True, lambda ta, tb: ta <= tb, "<="),
        ("C5", True, False, lambda ta, tb: tb > ta, ">"),
    )
    for rule, a_read, b_read, holds, sym in checks:
        firsts = [op for op in complete if op.read == a_read]
        seconds = [op for op in complete if op.read == b_read]
        for a in firsts:
            for b in seconds:
                if a is b or not _precedes(a, b, epsilon):
                    continue
                if not holds(a.tag, b.tag):
                    return Verdict(
                        False,
                        Violation(
                            rule,
                            (a.respond, b.respond),
                            f"{a.process}#{a.op_seq} precedes {b.process}#{b.op_seq} "
                            f"but tag {b.tag} is not {sym} required vs {a.tag}",
                        ),
                    )
    return Verdict(True)


def derive_write_tags(history: Iterable[HistoryEvent]) -> Dict[WriteId, Tag]:
    """Tags of all completed writes, keyed by (writer, op_seq)."""
    tags: Dict[WriteId, Tag] = {}
    for ev in history:
        if ev.kind is EventKind.WRITE_RESPOND and ev.tag is not None:
            tags[WriteId(ev.process, ev.op_seq)] = ev.tag
    return tags


_ROLES = {r.name.lower(): r for r in Role}
_KINDS = {k.value: k for k in EventKind}


def write_history_csv(path: str, history: Iterable[HistoryEvent]) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for ev in history:
            if ev.tag is None:
                ts = wid = wseq = rounds = ""
            else:
                ts, wid, wseq, rounds = ev.tag.ts, ev.tag.wid, ev.tag.wseq, ev.rounds
            w.writerow(
                [
                    str(ev.time),
                    ev.process.role.name.lower(),
                    ev.process.index,
                    ev.op_seq,
                    ev.kind.value,
                    ts,
                    wid,
                    wseq,
                    rounds,
                ]
            )


def read_history_csv(path: str) -> List[HistoryEvent]:
    events: List[HistoryEvent] = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != HISTORY_COLUMNS:
            raise MalformedHistoryError(f"{path}: bad or missing header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(HISTORY_COLUMNS):
                raise MalformedHistoryError(f"{path}:{lineno}: wrong column count")
            time_s, role_s, index_s, seq_s, kind_s, ts_s, wid_s, wseq_s, rounds_s = row
            try:
                role = _ROLES[role_s]
                kind = _KINDS[kind_s]
                process = ProcessId(role, int(index_s))
                time = Fraction(time_s)
                op_seq = int(seq_s)
            except (KeyError, ValueError) as exc:
                raise MalformedHistoryError(f"{path}:{lineno}: {exc}") from exc
            if kind.is_invoke:
                events.append(HistoryEvent(process, op_seq, kind, time))
            else:
                try:
                    tag = Tag(int(ts_s), int(wid_s), int(wseq_s))
                    rounds = int(rounds_s)
                except ValueError as exc:
                    raise MalformedHistoryError(f"{path}:{lineno}: {exc}") from exc
                events.append(HistoryEvent(process, op_seq, kind, time, tag, rounds))
    return events
