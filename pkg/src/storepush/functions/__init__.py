"""Pushdown storage functions and the step contract they implement.

A function is a state machine over ``(block, scratch)``: the target reads a
block, calls ``step`` and follows the returned outcome. All state that has
to survive between steps lives in the scratch buffer, so functions are
stateless objects and safe to share across requests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Union

BTREE_LOOKUP = 1
BTREE_RANGE = 2
SST_CHAIN = 3

# Fallback reason codes
FALLBACK_BAD_FORMAT = 1
FALLBACK_NO_ROOM = 2
FALLBACK_SPLIT_READ = 3


@dataclass(frozen=True)
class Resubmit:
    fd_index: int
    offset: int
    length: int


@dataclass(frozen=True)
class Done:
    result_length: int


@dataclass(frozen=True)
class Fallback:
    reason: int


StepOutcome = Union[Resubmit, Done, Fallback]


class BudgetExceeded(Exception):
    pass


class StepBudget:
    """Per-request bound on work inside function steps.

    Functions call :meth:`tick` in every loop so a runaway step is cut off,
    the way an instruction limit would.
    """

    def __init__(self, max_steps: int = 1 << 20):
        self.max_steps = max_steps
        self.used = 0

    def tick(self, n: int = 1) -> None:
        self.used += n
        if self.used > self.max_steps:
            raise BudgetExceeded(f"step budget {self.max_steps} exhausted")


class PushdownFunction(Protocol):
    function_id: int

    def step(self, block: bytes, scratch: bytearray,
             budget: StepBudget | None = None) -> StepOutcome: ...


def default_functions() -> dict[int, PushdownFunction]:
    from .btree import BTreeLookup, BTreeRange
    from .sst import SstChain

    return {BTREE_LOOKUP: BTreeLookup(), BTREE_RANGE: BTreeRange(), SST_CHAIN: SstChain()}
