"""The three-transition stack machine with bit-exact rollback.

A StackState owns a spine of recurrent states (index 0 is the initial state)
and a stack of open-constituent frames. NT opens a frame and advances the
spine with the new-nonterminal vector x; GEN advances it with a character
embedding; REDUCE composes the frame's children, truncates the spine back to
the exact prefix that existed before the matching NT, and advances once with
the composed phrase. Spine entries are never mutated, so truncation restores
earlier states bitwise.

The machine is generic over the embedding type: it calls back into a `step`
function for spine advances and a `composer` for REDUCE, and never inspects
the vectors it carries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ContractViolation

NT, GEN, REDUCE = 0, 1, 2
TRANSITION_NAMES = ("NT", "GEN", "REDUCE")


@dataclass(frozen=True)
class PassLimits:
    max_depth: int = 40
    max_actions: int = 0

    @classmethod
    def for_text(cls, text_length: int, max_depth: int = 40,
                 slack: int = 0) -> "PassLimits":
        # 8*len+16 holds for any tree the trained policies should produce;
        # `slack` widens it for untrained argmax roll-outs.
        return cls(max_depth=max_depth,
                   max_actions=8 * text_length + 16 + slack)


@dataclass
class BufferCursor:
    """Position in the ground-truth text (teacher mode) or an emission cap.

    The buffer feeds GEN inputs and gates legality; it is never an input to
    the transition policy.
    """

    tokens: list[int] | None
    limit: int
    cursor: int = 0
    require_full_consumption: bool = True

    @classmethod
    def teacher(cls, tokens: Sequence[int]) -> "BufferCursor":
        return cls(list(tokens), len(tokens))

    @classmethod
    def free(cls, cap: int) -> "BufferCursor":
        return cls(None, cap, require_full_consumption=False)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.limit

    def peek(self) -> int:
        if self.exhausted:
            raise ContractViolation("peek past the end of the buffer")
        if self.tokens is None:
            raise ContractViolation("free-running buffer has no ground truth")
        return self.tokens[self.cursor]

    def advance(self):
        if self.exhausted:
            raise ContractViolation("advance past the end of the buffer")
        self.cursor += 1


@dataclass
class Frame:
    nt_spine_index: int            # spine length when this frame was opened
    children: list = field(default_factory=list)
    child_is_nt: list = field(default_factory=list)
    parent_slot: int | None = None  # placeholder position in the parent frame
    attn_index: int | None = None   # decoder: column of the attention event


class StackState:
    def __init__(self, initial_state, step: Callable):
        self.spine: list = [initial_state]
        self.frames: list[Frame] = []
        self.step = step

    @property
    def depth(self) -> int:
        return len(self.frames)

    @property
    def active(self) -> Frame:
        if not self.frames:
            raise ContractViolation("no open constituent")
        return self.frames[-1]

    def _advance(self, x):
        self.spine.append(self.step(self.spine[-1], x))


def stack_summary(stack: StackState):
    """h of the spine top; the policy's only input."""
    return stack.spine[-1][0]


def legal_transitions(stack: StackState, buffer: BufferCursor,
                      limits: PassLimits) -> np.ndarray:
    depth = stack.depth
    can_nt = depth < limits.max_depth and not buffer.exhausted
    can_gen = depth >= 1 and not buffer.exhausted
    can_reduce = depth >= 1 and len(stack.frames[-1].children) >= 1
    if can_reduce and depth == 1 and buffer.require_full_consumption:
        can_reduce = buffer.exhausted
    mask = np.array([can_nt, can_gen, can_reduce])
    # unreachable by construction: the active frame always has a child once
    # the buffer is exhausted, and NT is legal from a fresh state
    assert mask.any(), "no legal transition"
    return mask


def apply_nt(stack: StackState, buffer: BufferCursor, limits: PassLimits,
             x_new, attn_index: int | None = None) -> StackState:
    if not legal_transitions(stack, buffer, limits)[NT]:
        raise ContractViolation("NT is not legal here")
    parent_slot = None
    if stack.frames:
        parent = stack.frames[-1]
        parent.children.append(x_new)
        parent.child_is_nt.append(True)
        parent_slot = len(parent.children) - 1
    stack.frames.append(Frame(
        nt_spine_index=len(stack.spine),
        parent_slot=parent_slot,
        attn_index=attn_index,
    ))
    stack._advance(x_new)
    return stack


def apply_gen(stack: StackState, buffer: BufferCursor, limits: PassLimits,
              char_embedding) -> StackState:
    if not legal_transitions(stack, buffer, limits)[GEN]:
        raise ContractViolation("GEN is not legal here")
    frame = stack.active
    frame.children.append(char_embedding)
    frame.child_is_nt.append(False)
    stack._advance(char_embedding)
    buffer.advance()
    return stack


def apply_reduce(stack: StackState, buffer: BufferCursor, limits: PassLimits,
                 composer: Callable) -> tuple[StackState, Any, tuple[int, int]]:
    """Close the active constituent; returns (stack, phrase, (n, t))."""
    if not legal_transitions(stack, buffer, limits)[REDUCE]:
        raise ContractViolation("REDUCE is not legal here")
    frame = stack.frames.pop()
    phrase = composer(frame.children)
    n = sum(1 for f in frame.child_is_nt if f)
    t = len(frame.child_is_nt) - n
    del stack.spine[frame.nt_spine_index:]
    stack._advance(phrase)
    if frame.parent_slot is not None:
        stack.frames[-1].children[frame.parent_slot] = phrase
    return stack, phrase, (n, t)
