"""Shared protocol vocabulary: identities, version tags, values, history records.

Everything in this module is an immutable value object. The state machines,
the simulator, the checker and the transport all speak in these terms, so
they can be copied and sent between threads freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, NamedTuple


class ProtocolError(Exception):
    """A reply set or message sequence violated a protocol precondition."""


class Role(enum.IntEnum):
    READER = 0
    WRITER = 1
    SERVER = 2


@dataclass(frozen=True, order=True)
class ProcessId:
    """Identity of a participant: role plus 0-based index within that role."""

    role: Role
    index: int

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"process index must be >= 0, got {self.index}")

    def __str__(self) -> str:
        return f"{self.role.name.lower()}{self.index}"


def reader(index: int) -> ProcessId:
    return ProcessId(Role.READER, index)


def writer(index: int) -> ProcessId:
    return ProcessId(Role.WRITER, index)


def server(index: int) -> ProcessId:
    return ProcessId(Role.SERVER, index)


class Tag(NamedTuple):
    """Version label attached to every value.

    Orders lexicographically by (ts, wid, wseq); tuple comparison already
    does that. wseq stays 0 for the algorithms where the writer picks the
    tag itself, so one tag type serves every protocol and the checker.
    """

    ts: int
    wid: int
    wseq: int

    def __str__(self) -> str:
        return f"({self.ts},{self.wid},{self.wseq})"


TAG_ZERO = Tag(0, 0, 0)


class Ordering(enum.Enum):
    LESS = -1
    EQUAL = 0
    GREATER = 1


def compare_tags(a: Tag, b: Tag) -> Ordering:
    """Total lexicographic order over (ts, wid, wseq)."""
    if a < b:
        return Ordering.LESS
    if a > b:
        return Ordering.GREATER
    return Ordering.EQUAL


def next_tag(max_seen: Tag, origin: ProcessId, wseq: int) -> Tag:
    """New tag strictly above ``max_seen``: bump the timestamp, stamp the writer.

    Only writers generate tags this way; ties between distinct writers are
    broken by writer index ascending through the tag order itself.
    """
    if origin.role is not Role.WRITER:
        raise ValueError(f"only writers may generate tags, got {origin}")
    return Tag(max_seen.ts + 1, origin.index, wseq)


@dataclass(frozen=True, order=True)
class WriteId:
    """One write operation: the writer plus its per-writer sequence number."""

    writer: ProcessId
    seq: int

    def __post_init__(self) -> None:
        if self.writer.role is not Role.WRITER:
            raise ValueError(f"WriteId requires a writer process, got {self.writer}")
        if self.seq < 1:
            raise ValueError(f"write sequence starts at 1, got {self.seq}")


class TaggedValue(NamedTuple):
    tag: Tag
    value: bytes


INITIAL_VALUE = TaggedValue(TAG_ZERO, b"")


class EventKind(enum.Enum):
    READ_INVOKE = "ReadInvoke"
    READ_RESPOND = "ReadRespond"
    WRITE_INVOKE = "WriteInvoke"
    WRITE_RESPOND = "WriteRespond"

    @property
    def is_invoke(self) -> bool:
        return self in (EventKind.READ_INVOKE, EventKind.WRITE_INVOKE)

    @property
    def is_read(self) -> bool:
        return self in (EventKind.READ_INVOKE, EventKind.READ_RESPOND)

    @property
    def respond_kind(self) -> "EventKind":
        if self is EventKind.READ_INVOKE:
            return EventKind.READ_RESPOND
        if self is EventKind.WRITE_INVOKE:
            return EventKind.WRITE_RESPOND
        raise ValueError(f"{self} is not an invocation kind")


@dataclass(frozen=True)
class HistoryEvent:
    """One invocation or response record.

    Times are rational seconds so the deterministic simulator never sees
    floating-point drift. ``tag`` and ``rounds`` are present on responses
    only.
    """

    process: ProcessId
    op_seq: int
    kind: EventKind
    time: Fraction
    tag: Optional[Tag] = None
    rounds: Optional[int] = None
