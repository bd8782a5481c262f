"""Majority quorum systems with a declared intersection degree.

A system built from ``server_count`` servers tolerating ``f`` crashes takes
every subset of size ``server_count - f`` as a quorum, which yields an
(server_count//f - 1)-wise system: any that many quorums share a server.
"""

from __future__ import annotations

import itertools
import math
import random
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Optional, Tuple


class QuorumConfigError(ValueError):
    """Parameters or file contents do not describe a usable quorum system."""


@dataclass(eq=True)
class QuorumSystem:
    """Immutable-by-convention description of a quorum system.

    ``quorums`` is ordered lexicographically by member set so quorum indices
    are stable across runs and across config files.
    """

    server_count: int
    f: int
    degree: int
    quorums: Tuple[FrozenSet[int], ...]
    _intersections: Dict[FrozenSet[int], FrozenSet[int]] = field(
        default_factory=dict, repr=False, compare=False
    )

    @property
    def quorum_size(self) -> int:
        return self.server_count - self.f

    @property
    def servers(self) -> FrozenSet[int]:
        return frozenset(range(self.server_count))

    def members(self, quorum_index: int) -> FrozenSet[int]:
        return self.quorums[quorum_index]

    def intersection_of(self, indices: FrozenSet[int]) -> FrozenSet[int]:
        """Cached intersection of the named quorums."""
        cached = self._intersections.get(indices)
        if cached is None:
            it = iter(indices)
            cached = self.quorums[next(it)]
            for i in it:
                cached = cached & self.quorums[i]
            self._intersections[indices] = cached
        return cached


def build_majority_system(server_count: int, f: int) -> QuorumSystem:
    """All subsets of size ``server_count - f``, lexicographic order.

    Rejects f = 0 and any combination whose intersection degree falls below
    2, since nothing useful can be run on a sub-pairwise system.
    """
    if f < 1:
        raise QuorumConfigError(f"f must be >= 1, got {f}")
    if server_count <= f:
        raise QuorumConfigError(
            f"need more servers than failures, got {server_count} servers, f={f}"
        )
    degree = server_count // f - 1
    if degree < 2:
        raise QuorumConfigError(
            f"{server_count} servers with f={f} gives intersection degree "
            f"{degree}; at least 2 is required"
        )
    quorums = tuple(
        frozenset(combo)
        for combo in itertools.combinations(range(server_count), server_count - f)
    )
    return QuorumSystem(server_count, f, degree, quorums)


@dataclass(frozen=True)
class IntersectionCheck:
    """Outcome of an intersection-degree check; truthy iff the degree holds.

    When the number of combinations exceeds the budget the check samples
    instead of enumerating; ``exhaustive`` is False then and ``checked``
    reports how many combinations were examined.
    """

    holds: bool
    exhaustive: bool
    checked: int

    def __bool__(self) -> bool:
        return self.holds


def verify_intersection_degree(
    qs: QuorumSystem,
    n: int,
    *,
    budget: int = 200_000,
    samples: int = 20_000,
    sample_seed: int = 0,
) -> IntersectionCheck:
    """True iff every choice of ``n`` quorums has a non-empty intersection."""
    if n < 2:
        raise ValueError(f"intersection degree must be >= 2, got {n}")
    count = len(qs.quorums)
    if n > count:
        # Fewer quorums than n: every n-subset is vacuously intersecting.
        return IntersectionCheck(True, True, 0)
    total = math.comb(count, n)
    if total <= budget:
        checked = 0
        for combo in itertools.combinations(range(count), n):
            checked += 1
            if not qs.intersection_of(frozenset(combo)):
                return IntersectionCheck(False, True, checked)
        return IntersectionCheck(True, True, checked)
    rng = random.Random(sample_seed)
    for i in range(samples):
        combo = rng.sample(range(count), n)
        if not qs.intersection_of(frozenset(combo)):
            return IntersectionCheck(False, False, i + 1)
    return IntersectionCheck(True, False, samples)


def intersect(qs: QuorumSystem, indices: Iterable[int]) -> FrozenSet[int]:
    """Intersection of the named quorums; the index set must be non-empty."""
    idx = frozenset(indices)
    if not idx:
        raise ValueError("cannot intersect an empty set of quorums")
    for i in idx:
        if not 0 <= i < len(qs.quorums):
            raise IndexError(f"quorum index {i} out of range")
    return qs.intersection_of(idx)


def is_complete_majority(qs: QuorumSystem) -> bool:
    """True when the system holds every subset of size server_count - f."""
    size = qs.quorum_size
    return len(qs.quorums) == math.comb(qs.server_count, qs.f) and all(
        len(q) == size for q in qs.quorums
    )


def reply_complete(qs: QuorumSystem, replied: Iterable[int]) -> Optional[int]:
    """Lowest-index quorum fully contained in ``replied``, if any.

    The lowest-index tie-break keeps simulated executions reproducible; any
    fixed choice preserves correctness.
    """
    got = frozenset(replied)
    if len(got) < qs.quorum_size:
        return None
    for i, quorum in enumerate(qs.quorums):
        if quorum <= got:
            return i
    return None


def write_quorum_file(qs: QuorumSystem, path: str) -> None:
    """Plain-text export: header line then one line of member indices per quorum."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"{qs.server_count} {qs.f} {qs.degree}\n")
        for quorum in qs.quorums:
            fh.write(" ".join(str(s) for s in sorted(quorum)) + "\n")


def read_quorum_file(path: str) -> QuorumSystem:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise QuorumConfigError(f"{path}: empty quorum file")
    head = lines[0].split()
    if len(head) != 3:
        raise QuorumConfigError(f"{path}: header must be '<servers> <f> <degree>'")
    try:
        server_count, f, degree = (int(x) for x in head)
    except ValueError as exc:
        raise QuorumConfigError(f"{path}: bad header: {exc}") from exc
    quorums = []
    for ln in lines[1:]:
        try:
            members = frozenset(int(x) for x in ln.split())
        except ValueError as exc:
            raise QuorumConfigError(f"{path}: bad quorum line {ln!r}") from exc
        if not members or not all(0 <= s < server_count for s in members):
            raise QuorumConfigError(f"{path}: quorum members out of range: {ln!r}")
        quorums.append(members)
    if not quorums:
        raise QuorumConfigError(f"{path}: no quorums listed")
    if len(set(quorums)) != len(quorums):
        raise QuorumConfigError(f"{path}: duplicate quorums listed")
    return QuorumSystem(server_count, f, degree, tuple(quorums))
