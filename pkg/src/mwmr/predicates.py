"""Certification predicates for server-side-ordered writes and reads.

A write (or read) that finished its first round holds, per server, the tags
that server assigned. The operation may finish right there if "enough"
servers agree on one tag: formally, if some set A of at most k quorums
satisfies intersection(A) & Q <= MS, where Q is the replying quorum and MS
the members of Q that reported the tag. Deciding that is a k-set-intersection
problem; this module offers the exact (exponential) search and the
polynomial greedy set-cover approximation, which only ever errs by
rejecting (one-sided error).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

from .core import ProtocolError, TAG_ZERO, Tag, WriteId
from .quorums import QuorumSystem, is_complete_majority

ENGINES = ("exact", "greedy")


@dataclass(frozen=True)
class PredicateQuery:
    """One certification question: does any witness of size <= k exist?"""

    qs: QuorumSystem
    replying_quorum: int
    ms: FrozenSet[int]
    k: int

    def __post_init__(self) -> None:
        members = self.qs.quorums[self.replying_quorum]
        if not self.ms <= members:
            raise ValueError(
                f"ms {sorted(self.ms)} not within quorum {sorted(members)}"
            )


@dataclass(frozen=True)
class PredicateWitness:
    """A satisfying set of quorum indices; empty iff the whole quorum agreed."""

    quorum_indices: FrozenSet[int]
    satisfied_by_empty: bool

    def __post_init__(self) -> None:
        if self.satisfied_by_empty != (not self.quorum_indices):
            raise ValueError("empty-branch flag must match an empty index set")


def matching_servers(
    qs: QuorumSystem,
    replying_quorum: int,
    replies: Mapping[int, Iterable[Tag]],
    tag: Tag,
) -> FrozenSet[int]:
    """Members of the replying quorum whose reply contains ``tag``."""
    members = qs.quorums[replying_quorum]
    missing = members - replies.keys()
    if missing:
        raise ProtocolError(f"no reply from quorum members {sorted(missing)}")
    return frozenset(s for s in members if tag in replies[s])


def exact_predicate(query: PredicateQuery) -> Optional[PredicateWitness]:
    """Minimum-size witness by exhaustive search, or None.

    Subsets are tried in increasing size, lexicographic within a size, so
    the returned witness is canonical. k < 0 can never be satisfied; k = 0
    admits only the unanimous branch (MS equal to the whole quorum).
    """
    if query.k < 0:
        return None
    members = query.qs.quorums[query.replying_quorum]
    if query.ms == members:
        return PredicateWitness(frozenset(), True)
    uncovered = members - query.ms
    limit = min(query.k, len(query.qs.quorums))
    for size in range(1, limit + 1):
        for combo in itertools.combinations(range(len(query.qs.quorums)), size):
            inter = query.qs.intersection_of(frozenset(combo))
            # intersection(A) & Q <= MS  <=>  intersection(A) misses Q \ MS
            if inter.isdisjoint(uncovered):
                return PredicateWitness(frozenset(combo), False)
    return None


@dataclass
class CoverInstance:
    """Set-cover reduction of one predicate query.

    ``family`` maps each marked server m to the cover sets of the quorums
    containing m: for quorum Qi the cover set is (U \\ M) \\ (Qi \\ M), the
    unmarked servers Qi excludes. Covering all of U \\ M with such sets
    forces intersection(chosen) inside M.
    """

    universe: FrozenSet[int]
    marked: FrozenSet[int]
    family: Dict[int, List[Tuple[int, FrozenSet[int]]]]
    k: int


def build_cover_instance(qs: QuorumSystem, ms: FrozenSet[int], k: int) -> CoverInstance:
    universe = qs.servers
    outside = universe - ms
    family: Dict[int, List[Tuple[int, FrozenSet[int]]]] = {}
    for m in sorted(ms):
        family[m] = [
            (i, outside - (quorum - ms))
            for i, quorum in enumerate(qs.quorums)
            if m in quorum
        ]
    return CoverInstance(universe, ms, family, k)


def greedy_cover(
    target: FrozenSet[int], candidates: Sequence[Tuple[int, FrozenSet[int]]]
) -> Optional[List[int]]:
    """Greedy set cover of ``target``; returns chosen quorum indices or None.

    Each step picks the candidate covering the most still-uncovered
    elements, ties broken by lowest quorum index. Stops short (None) once
    no candidate makes progress.
    """
    uncovered = set(target)
    remaining = list(candidates)
    chosen: List[int] = []
    while uncovered:
        best_pos = -1
        best_gain = 0
        for pos, (_, cover) in enumerate(remaining):
            gain = len(cover & uncovered)
            if gain > best_gain:
                best_gain = gain
                best_pos = pos
        if best_pos < 0:
            return None
        index, cover = remaining.pop(best_pos)
        chosen.append(index)
        uncovered -= cover
    return chosen


def greedy_predicate(query: PredicateQuery) -> Optional[PredicateWitness]:
    """Polynomial approximation of :func:`exact_predicate`; sound, incomplete.

    Runs the greedy cover once per marked server and accepts the first
    server whose cover succeeds within k sets. A witness returned here
    always satisfies the exact condition; the converse can fail.
    """
    if query.k < 0:
        return None
    members = query.qs.quorums[query.replying_quorum]
    if query.ms == members:
        return PredicateWitness(frozenset(), True)
    if not query.ms:
        return None
    instance = build_cover_instance(query.qs, query.ms, query.k)
    target = instance.universe - instance.marked
    for m in sorted(instance.family):
        chosen = greedy_cover(target, instance.family[m])
        if chosen is not None and 0 < len(chosen) <= query.k:
            return PredicateWitness(frozenset(chosen), False)
    return None


_ENGINE_FUNCS = {"exact": exact_predicate, "greedy": greedy_predicate}


@dataclass(frozen=True)
class Decision:
    """First-round verdict: finish now with ``tag`` (fast) or propagate it."""

    fast: bool
    tag: Tag


def _predicate(engine: str):
    try:
        return _ENGINE_FUNCS[engine]
    except KeyError:
        raise ValueError(f"engine must be one of {ENGINES}, got {engine!r}") from None


def could_be_settled(
    qs: QuorumSystem, replying_quorum: int, ms: FrozenSet[int], degree: int
) -> bool:
    """Support test for slow-path resolution, witness bound degree//2.

    The tag a completed operation settled on always shows support covering
    an intersection pattern within this bound, from any quorum's viewpoint:
    a certified tag carries its certification bound plus the quorum it was
    certified against, and a propagated tag covers the quorum that acked
    it. A stray assignment that no operation ever settles on has support
    bounded by f and never passes. Slow operations resolve onto the largest
    passing tag so their choices agree with settled outcomes instead of
    with one view's raw maximum.

    On a complete majority system the bound reduces to counting dissenters
    (every f-subset of servers is some quorum's complement); otherwise it
    falls back to the exact subset search.
    """
    k = degree // 2
    members = qs.quorums[replying_quorum]
    if is_complete_majority(qs):
        return len(members - ms) <= k * qs.f
    return exact_predicate(PredicateQuery(qs, replying_quorum, ms, k)) is not None


def evaluate_write_predicate(
    qs: QuorumSystem,
    replying_quorum: int,
    replies: Mapping[int, Iterable[Tag]],
    write_id: WriteId,
    degree: int,
    engine: str = "exact",
    confirmed: Optional[Mapping[int, Tag]] = None,
) -> Decision:
    """Can this write settle on the largest tag the servers assigned to it?

    Only the maximum of the tags generated for this write is a candidate,
    with witness bound k = degree//2 - 1: certifying anything lower would
    leave the higher tag in circulation with no way for later readers to
    tell it apart from the settled one. Failure means a slow second round
    propagating that maximum, which settles it.

    When ``confirmed`` reports a confirmed tag for this very write, a
    concurrent reader already settled and propagated it; the write adopts
    that tag and re-propagates it (a fast finish is the predicate's
    privilege alone).
    """
    predicate = _predicate(engine)
    members = qs.quorums[replying_quorum]
    missing = members - replies.keys()
    if missing:
        raise ProtocolError(f"no reply from quorum members {sorted(missing)}")
    if confirmed:
        own = [
            c
            for c in confirmed.values()
            if c.wid == write_id.writer.index and c.wseq == write_id.seq
        ]
        if own:
            return Decision(False, max(own))
    k = degree // 2 - 1
    candidates = set()
    for s in members:
        own = [
            t
            for t in replies[s]
            if t.wid == write_id.writer.index and t.wseq == write_id.seq
        ]
        if len(own) > 1:
            raise ProtocolError(
                f"server {s} reported {len(own)} tags for write {write_id}"
            )
        candidates.update(own)
    if not candidates:
        raise ProtocolError(f"no server assigned a tag to write {write_id}")
    top = max(candidates)
    ms = matching_servers(qs, replying_quorum, replies, top)
    if predicate(PredicateQuery(qs, replying_quorum, ms, k)):
        return Decision(True, top)
    # Slow resolution, mirrored by the readers: prefer the largest of our
    # assigned tags with settlement-grade support, so concurrent readers
    # resolving this same write land on the same choice; fall back to the
    # raw maximum when support is fragmented (readers skip such strays).
    settled = [
        t
        for t in candidates
        if could_be_settled(
            qs, replying_quorum, matching_servers(qs, replying_quorum, replies, t), degree
        )
    ]
    return Decision(False, max(settled) if settled else top)


def evaluate_read_predicate(
    qs: QuorumSystem,
    replying_quorum: int,
    replies: Mapping[int, Tuple[Iterable[Tag], Tag]],
    degree: int,
    engine: str = "exact",
) -> Decision:
    """Which tag may this read return after one round?

    ``replies`` maps each member to (assigned tag set, confirmed tag). Tags
    at or below the largest confirmed tag need no certification: their
    write finished or an earlier read already returned them. Above that,
    only the maximum discovered tag may be returned fast (bound k =
    degree//2 - 2): anything lower might trail a write that already
    completed on the higher tag. When it fails, the read goes slow and
    propagates the largest tag with settlement-grade support (every
    completed operation's tag qualifies; see :func:`could_be_settled`), or
    re-propagates the confirmed maximum when nothing rises above it.
    """
    predicate = _predicate(engine)
    members = qs.quorums[replying_quorum]
    missing = members - replies.keys()
    if missing:
        raise ProtocolError(f"no reply from quorum members {sorted(missing)}")
    k = degree // 2 - 2
    max_confirmed = max(replies[s][1] for s in members)
    assigned: Dict[int, FrozenSet[Tag]] = {
        s: frozenset(replies[s][0]) for s in members
    }
    # A confirmed tag settles its write for good; any other assignment
    # still circulating for that write is a refuted leftover.
    settled_writes = {
        (c.wid, c.wseq)
        for c in (replies[s][1] for s in members)
        if c.wseq >= 1
    }
    candidates = {
        t
        for tags in assigned.values()
        for t in tags
        if t > max_confirmed and (t.wid, t.wseq) not in settled_writes
    }
    if not candidates:
        return Decision(True, max_confirmed)
    top = max(candidates)
    ms = matching_servers(qs, replying_quorum, assigned, top)
    if predicate(PredicateQuery(qs, replying_quorum, ms, k)):
        return Decision(True, top)
    # Slow resolution: of the tags with settlement-grade support, take the
    # largest. Every tag a completed operation settled on qualifies, so
    # this never goes stale, while stray divergent assignments with thin
    # backing (which nobody will ever return) are passed over.
    settled = [
        t
        for t in candidates
        if could_be_settled(
            qs, replying_quorum, matching_servers(qs, replying_quorum, assigned, t), degree
        )
    ]
    return Decision(False, max(settled) if settled else max_confirmed)
