"""Atomic MWMR register algorithms: simulation, deployment, verification."""

from .core import (
    HistoryEvent,
    ProcessId,
    Role,
    TAG_ZERO,
    Tag,
    TaggedValue,
    WriteId,
    compare_tags,
    next_tag,
)
from .protocols import Algorithm
from .quorums import QuorumSystem, build_majority_system
from .simnet import RunResult, ScenarioConfig, run_scenario
from .checker import Verdict, check_atomicity

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "HistoryEvent",
    "ProcessId",
    "QuorumSystem",
    "Role",
    "RunResult",
    "ScenarioConfig",
    "TAG_ZERO",
    "Tag",
    "TaggedValue",
    "Verdict",
    "WriteId",
    "build_majority_system",
    "check_atomicity",
    "compare_tags",
    "next_tag",
    "run_scenario",
    "__version__",
]
