"""The four register algorithms as event-driven client and server machines.

Nothing here does I/O or owns a clock. A client session consumes one event
(its invocation, or a server reply) and yields messages to send plus an
optional completion record; a replica consumes one message and yields its
reply. The transport layer (simulator or sockets) owns all concurrency and
feeds events in whatever order the network produces them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

from .core import (
    INITIAL_VALUE,
    ProcessId,
    ProtocolError,
    Role,
    TAG_ZERO,
    Tag,
    TaggedValue,
    WriteId,
    next_tag,
)
from .predicates import (
    Decision,
    evaluate_read_predicate,
    evaluate_write_predicate,
)
from .quorums import QuorumSystem, reply_complete


class Algorithm(enum.Enum):
    SIMPLE = "simple"
    SFW = "sfw"
    APRX_SFW = "aprxsfw"
    CWFR = "cwfr"

    @classmethod
    def parse(cls, name: str) -> "Algorithm":
        for alg in cls:
            if alg.value == name.lower():
                return alg
        raise ValueError(f"unknown algorithm {name!r}")


def engine_for(algorithm: Algorithm) -> str:
    return "greedy" if algorithm is Algorithm.APRX_SFW else "exact"


class MessageKind(enum.IntEnum):
    READ_QUERY = 1
    WRITE_QUERY = 2
    SFW_WRITE = 3
    PROPAGATE = 4
    REPLY_READ = 5
    REPLY_WRITE = 6
    ACK = 7


class InProgressEntry(NamedTuple):
    writer: int
    tag: Tag
    value: bytes


@dataclass(frozen=True)
class ProtocolMessage:
    """One wire-level message; unused sections stay at their zero defaults.

    SFW_WRITE carries no real tag yet (servers assign it), so its tag slot
    holds (0, writer index, write seq) to transport the sequence number.
    """

    kind: MessageKind
    sender: ProcessId
    op_seq: int
    tag: Tag = TAG_ZERO
    value: bytes = b""
    inprogress: Tuple[InProgressEntry, ...] = ()
    confirmed: Tag = TAG_ZERO


@dataclass
class SimpleReplica:
    """Server state for the query/propagate algorithms: just the local copy."""

    local: TaggedValue = INITIAL_VALUE


@dataclass
class SfwReplica:
    """Server state for server-side ordering.

    ``inprogress`` keeps the latest tag this server assigned per writer;
    ``confirmed`` the largest tag known finished (written or already read);
    ``max_ts_seen`` guarantees freshly generated tags top everything
    witnessed so far, including propagated ones.
    """

    local: TaggedValue = INITIAL_VALUE
    inprogress: Dict[int, Tuple[Tag, bytes]] = field(default_factory=dict)
    confirmed: Tag = TAG_ZERO
    max_ts_seen: int = 0

    def inprogress_entries(self) -> Tuple[InProgressEntry, ...]:
        return tuple(
            InProgressEntry(w, tag, value)
            for w, (tag, value) in sorted(self.inprogress.items())
        )


def simple_server_apply(
    state: SimpleReplica, msg: ProtocolMessage, self_id: ProcessId
) -> Tuple[SimpleReplica, ProtocolMessage]:
    """Adopt strictly newer propagated pairs; reply with the local copy."""

    def reply(kind: MessageKind) -> ProtocolMessage:
        return ProtocolMessage(
            kind=kind,
            sender=self_id,
            op_seq=msg.op_seq,
            tag=state.local.tag,
            value=state.local.value,
        )

    if msg.kind is MessageKind.READ_QUERY:
        return state, reply(MessageKind.REPLY_READ)
    if msg.kind is MessageKind.WRITE_QUERY:
        return state, reply(MessageKind.REPLY_WRITE)
    if msg.kind is MessageKind.PROPAGATE:
        if msg.tag > state.local.tag:
            state.local = TaggedValue(msg.tag, msg.value)
        return state, reply(MessageKind.ACK)
    raise ProtocolError(f"simple replica cannot handle {msg.kind.name}")


def sfw_server_apply(
    state: SfwReplica, msg: ProtocolMessage, self_id: ProcessId
) -> Tuple[SfwReplica, ProtocolMessage]:
    """Server-side ordering: assign tags to writes, track confirmed tags."""

    def reply(kind: MessageKind, tag: Tag, value: bytes) -> ProtocolMessage:
        return ProtocolMessage(
            kind=kind,
            sender=self_id,
            op_seq=msg.op_seq,
            tag=tag,
            value=value,
            inprogress=state.inprogress_entries(),
            confirmed=state.confirmed,
        )

    if msg.kind is MessageKind.READ_QUERY:
        return state, reply(MessageKind.REPLY_READ, *state.local)
    if msg.kind is MessageKind.WRITE_QUERY:
        return state, reply(MessageKind.REPLY_WRITE, *state.local)
    if msg.kind is MessageKind.SFW_WRITE:
        if msg.sender.role is not Role.WRITER:
            raise ProtocolError(f"write request from non-writer {msg.sender}")
        held = state.inprogress.get(msg.sender.index)
        if held is not None and held[0].wseq >= msg.tag.wseq:
            # This write (or a later one by the same writer) is already
            # known here through a propagated settlement that outran the
            # request. Assigning a fresh tag now would spawn a divergent
            # sibling of an already-settled write; report what is held.
            return state, reply(MessageKind.REPLY_WRITE, held[0], held[1])
        new_tag = Tag(state.max_ts_seen + 1, msg.sender.index, msg.tag.wseq)
        state.max_ts_seen = new_tag.ts
        state.inprogress[msg.sender.index] = (new_tag, msg.value)
        return state, reply(MessageKind.REPLY_WRITE, new_tag, msg.value)
    if msg.kind is MessageKind.PROPAGATE:
        state.max_ts_seen = max(state.max_ts_seen, msg.tag.ts)
        if msg.tag > state.local.tag:
            state.local = TaggedValue(msg.tag, msg.value)
        state.confirmed = max(state.confirmed, msg.tag)
        if msg.tag.wseq >= 1:
            # A propagated server-side tag is a settled fact for its write:
            # it replaces whatever this server assigned to that write (or an
            # older one), including divergent assignments above it.
            held = state.inprogress.get(msg.tag.wid)
            if held is None or held[0].wseq <= msg.tag.wseq:
                if held is None or held[0] != msg.tag:
                    state.inprogress[msg.tag.wid] = (msg.tag, msg.value)
        return state, reply(MessageKind.ACK, *state.local)
    raise ProtocolError(f"sfw replica cannot handle {msg.kind.name}")


def analyze_quorum_views(
    qs: QuorumSystem, replying_quorum: int, tags: Dict[int, Tag]
) -> Decision:
    """Classify the tag distribution inside the replying quorum.

    Iteratively: if every remaining server holds the current maximum, that
    write is potentially complete everywhere it matters (fast). If some
    other quorum's intersection with Q holds only tags at or above the
    current maximum, the write may have finished in that quorum (slow,
    propagate the overall maximum). Otherwise the current maximum was
    certainly not completed: strip its holders and look at the next tag
    down. Strictly shrinking, and a single survivor always matches its own
    maximum, so at most |Q| iterations.
    """
    members = qs.quorums[replying_quorum]
    missing = members - tags.keys()
    if missing:
        raise ProtocolError(f"no tag from quorum members {sorted(missing)}")
    max_tag = max(tags[s] for s in members)
    remaining = set(members)
    while True:
        cur_max = max(tags[s] for s in remaining)
        if all(tags[s] == cur_max for s in remaining):
            return Decision(True, cur_max)
        for i, quorum in enumerate(qs.quorums):
            if i == replying_quorum:
                continue
            common = quorum & members
            if common and all(tags[s] >= cur_max for s in common):
                return Decision(False, max_tag)
        remaining -= {s for s in remaining if tags[s] == cur_max}


class OpKind(enum.Enum):
    READ = "read"
    WRITE = "write"


class SessionPhase(enum.Enum):
    CREATED = "created"
    ROUND1 = "round1"
    ROUND2 = "round2"
    DONE = "done"


@dataclass(frozen=True)
class Completion:
    """What an operation decided: its tag, value and round count."""

    process: ProcessId
    op_seq: int
    kind: OpKind
    tag: Tag
    value: bytes
    rounds: int


class Invoke:
    """Start the session's operation."""

    def __repr__(self) -> str:  # pragma: no cover
        return "Invoke()"


INVOKE = Invoke()


@dataclass(frozen=True)
class Reply:
    """A server's reply arrived."""

    server: int
    message: ProtocolMessage


@dataclass
class ClientSession:
    """One in-flight operation of one client; strictly sequential."""

    algorithm: Algorithm
    process: ProcessId
    op_seq: int
    op: OpKind
    value: bytes = b""
    wseq: int = 0
    phase: SessionPhase = SessionPhase.CREATED
    replies: Dict[int, ProtocolMessage] = field(default_factory=dict)
    acks: Set[int] = field(default_factory=set)
    round1_quorum: Optional[int] = None
    decided: Optional[TaggedValue] = None
    rounds_used: int = 0

    @classmethod
    def for_read(
        cls, algorithm: Algorithm, process: ProcessId, op_seq: int
    ) -> "ClientSession":
        return cls(algorithm, process, op_seq, OpKind.READ)

    @classmethod
    def for_write(
        cls,
        algorithm: Algorithm,
        process: ProcessId,
        op_seq: int,
        value: bytes,
        wseq: int,
    ) -> "ClientSession":
        if process.role is not Role.WRITER:
            raise ValueError(f"write sessions need a writer, got {process}")
        return cls(algorithm, process, op_seq, OpKind.WRITE, value=value, wseq=wseq)


class StepResult(NamedTuple):
    session: ClientSession
    sends: List[Tuple[int, ProtocolMessage]]
    completion: Optional[Completion]


def _broadcast(
    qs: QuorumSystem, msg: ProtocolMessage
) -> List[Tuple[int, ProtocolMessage]]:
    return [(s, msg) for s in range(qs.server_count)]


def _value_for_tag(
    session: ClientSession, members, tag: Tag
) -> bytes:
    """Find the value carried with ``tag`` anywhere in the round-1 replies."""
    for s in sorted(members):
        for entry in session.replies[s].inprogress:
            if entry.tag == tag:
                return entry.value
    for s in sorted(members):
        if session.replies[s].tag == tag:
            return session.replies[s].value
    raise ProtocolError(f"no reply carries a value for tag {tag}")


def client_step(
    session: ClientSession, event, qs: QuorumSystem
) -> StepResult:
    """Feed one event to a session; returns it mutated, plus any output.

    Replies from unknown servers, for other operations, or of a kind the
    current phase does not expect are ignored, which also makes duplicate
    deliveries idempotent.
    """
    if isinstance(event, Invoke):
        return _step_invoke(session, qs)
    if isinstance(event, Reply):
        return _step_reply(session, event, qs)
    raise TypeError(f"unknown client event {event!r}")


def _step_invoke(session: ClientSession, qs: QuorumSystem) -> StepResult:
    if session.phase is not SessionPhase.CREATED:
        raise ProtocolError(f"operation already invoked (phase {session.phase})")
    session.phase = SessionPhase.ROUND1
    if session.op is OpKind.READ:
        msg = ProtocolMessage(
            MessageKind.READ_QUERY, session.process, session.op_seq
        )
    elif session.algorithm in (Algorithm.SFW, Algorithm.APRX_SFW):
        msg = ProtocolMessage(
            MessageKind.SFW_WRITE,
            session.process,
            session.op_seq,
            tag=Tag(0, session.process.index, session.wseq),
            value=session.value,
        )
    else:
        msg = ProtocolMessage(
            MessageKind.WRITE_QUERY, session.process, session.op_seq
        )
    return StepResult(session, _broadcast(qs, msg), None)


def _step_reply(session: ClientSession, event: Reply, qs: QuorumSystem) -> StepResult:
    msg = event.message
    if not 0 <= event.server < qs.server_count:
        return StepResult(session, [], None)
    if msg.op_seq != session.op_seq:
        return StepResult(session, [], None)

    if session.phase is SessionPhase.ROUND1:
        expected = (
            MessageKind.REPLY_READ
            if session.op is OpKind.READ
            else MessageKind.REPLY_WRITE
        )
        if msg.kind is not expected:
            return StepResult(session, [], None)
        session.replies[event.server] = msg
        quorum = reply_complete(qs, session.replies.keys())
        if quorum is None:
            return StepResult(session, [], None)
        session.round1_quorum = quorum
        return _finish_round1(session, qs)

    if session.phase is SessionPhase.ROUND2:
        if msg.kind is not MessageKind.ACK:
            return StepResult(session, [], None)
        session.acks.add(event.server)
        _absorb_ack_evidence(session, event.server, msg, qs)
        if reply_complete(qs, session.acks) is None:
            return StepResult(session, [], None)
        return _complete(session, rounds=2)

    return StepResult(session, [], None)


def _finish_round1(session: ClientSession, qs: QuorumSystem) -> StepResult:
    members = qs.quorums[session.round1_quorum]
    alg = session.algorithm

    if session.op is OpKind.WRITE and alg in (Algorithm.SIMPLE, Algorithm.CWFR):
        max_tag = max(session.replies[s].tag for s in members)
        new_tag = next_tag(max_tag, session.process, 0)
        session.decided = TaggedValue(new_tag, session.value)
        return _enter_round2(session, qs)

    if session.op is OpKind.WRITE:  # SFW / APRX_SFW
        assigned = {
            s: [e.tag for e in session.replies[s].inprogress] for s in members
        }
        decision = evaluate_write_predicate(
            qs,
            session.round1_quorum,
            assigned,
            WriteId(session.process, session.wseq),
            qs.degree,
            engine_for(alg),
            confirmed={s: session.replies[s].confirmed for s in members},
        )
        session.decided = TaggedValue(decision.tag, session.value)
        if decision.fast:
            return _complete(session, rounds=1)
        return _enter_round2(session, qs)

    if alg is Algorithm.SIMPLE:
        best = max(members, key=lambda s: session.replies[s].tag)
        reply = session.replies[best]
        session.decided = TaggedValue(reply.tag, reply.value)
        return _enter_round2(session, qs)

    if alg is Algorithm.CWFR:
        tags = {s: session.replies[s].tag for s in members}
        decision = analyze_quorum_views(qs, session.round1_quorum, tags)
        session.decided = TaggedValue(
            decision.tag, _value_for_tag(session, members, decision.tag)
        )
        if decision.fast:
            return _complete(session, rounds=1)
        return _enter_round2(session, qs)

    # SFW / APRX_SFW read
    per_server = {
        s: (
            [e.tag for e in session.replies[s].inprogress],
            session.replies[s].confirmed,
        )
        for s in members
    }
    decision = evaluate_read_predicate(
        qs, session.round1_quorum, per_server, qs.degree, engine_for(alg)
    )
    session.decided = TaggedValue(
        decision.tag, _value_for_tag(session, members, decision.tag)
    )
    if decision.fast:
        return _complete(session, rounds=1)
    return _enter_round2(session, qs)


def _absorb_ack_evidence(
    session: ClientSession, server: int, msg: ProtocolMessage, qs: QuorumSystem
) -> None:
    """Converge a slow operation's tag with a concurrent settlement.

    While this operation propagates its resolved tag, a concurrent one may
    have settled the same write on a higher tag; once that propagation
    touches one of our ackers, its confirmed field exposes the fact. Same
    write means same value, so only the tag moves.
    """
    decided = session.decided.tag
    if decided.wseq < 1:
        return
    if (
        msg.confirmed.wid == decided.wid
        and msg.confirmed.wseq == decided.wseq
        and msg.confirmed > decided
    ):
        session.decided = TaggedValue(msg.confirmed, session.decided.value)


def _enter_round2(session: ClientSession, qs: QuorumSystem) -> StepResult:
    session.phase = SessionPhase.ROUND2
    msg = ProtocolMessage(
        MessageKind.PROPAGATE,
        session.process,
        session.op_seq,
        tag=session.decided.tag,
        value=session.decided.value,
    )
    return StepResult(session, _broadcast(qs, msg), None)


def _complete(session: ClientSession, rounds: int) -> StepResult:
    session.phase = SessionPhase.DONE
    session.rounds_used = rounds
    completion = Completion(
        process=session.process,
        op_seq=session.op_seq,
        kind=session.op,
        tag=session.decided.tag,
        value=session.decided.value,
        rounds=rounds,
    )
    return StepResult(session, [], completion)
