"""Coupled encoder and decoder passes over the stack machine.

Both passes run the same loop: read the stack summary, score the three
transitions, mask illegal ones, pick an action (sampled, greedy, or forced),
and apply it. They differ in what an NT pushes: the encoder pushes one
learned constant vector, the decoder pushes an attention-weighted sum of
encoder phrase embeddings, with the attention query taken from the stack
summary as it stood before the push.

Every stochastic choice leaves behind an ActionRecord carrying the
differentiable log-probability of the chosen transition, so a later backward
pass can apply policy-gradient weights without re-running anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ContractViolation, TrajectoryAbandoned
from .model import (
    ParamBinding, action_scores, argmax_legal, bilstm_compose, lm_loss,
    lstm_step, masked_categorical, masked_softmax, output_distribution,
)
from .stack import (
    GEN, NT, REDUCE, BufferCursor, PassLimits, StackState, apply_gen,
    apply_nt, apply_reduce, legal_transitions, stack_summary,
)


@dataclass
class EncoderNode:
    s_enc: Var                      # spine top just after pushing x^enc
    h_enc: Var | None = None        # phrase embedding, set at REDUCE
    span: tuple[int, int] = (0, 0)  # source char offsets [start, end)


class EncoderNodeTable:
    """Encoder nonterminals in REDUCE (completion) order, root included."""

    def __init__(self):
        self.nodes: list[EncoderNode] = []

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def append(self, node: EncoderNode):
        self.nodes.append(node)

    @property
    def complete(self) -> bool:
        return len(self.nodes) > 0 and all(
            n.h_enc is not None for n in self.nodes)


class AttentionMatrix:
    """Columns of attention weights, one per decoder NT event."""

    def __init__(self):
        self.columns: list[Var] = []
        self.column_action_index: list[int] = []

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    def add_column(self, alphas: Var, action_index: int):
        self.columns.append(alphas)
        self.column_action_index.append(action_index)

    @property
    def values(self) -> np.ndarray:
        """Dense (encoder nodes x decoder events) float matrix."""
        if not self.columns:
            return np.zeros((0, 0))
        return np.stack([c.value for c in self.columns], axis=1)

    def validate(self, tol: float = 1e-6):
        for c in self.columns:
            if (c.value < 0).any() or abs(c.value.sum() - 1.0) > tol:
                raise ContractViolation("attention column is not a distribution")


@dataclass
class ActionRecord:
    transition: int
    legal: np.ndarray
    prob: float
    distribution: np.ndarray
    log_prob: Var
    stack_summary: Var
    lm_loss: Var | None = None      # GEN records only
    char_id: int | None = None      # GEN records only
    child_stats: tuple[int, int] | None = None  # REDUCE records only
    gen_count: int = 0              # GENs among actions 1..k (inclusive)
    reward: float = 0.0             # tree reward, assigned after the pass


@dataclass
class Trajectory:
    side: str                       # "enc" or "dec"
    tape: Tape
    records: list[ActionRecord] = field(default_factory=list)
    truncated: bool = False

    def __len__(self):
        return len(self.records)

    @property
    def transitions(self) -> list[int]:
        return [r.transition for r in self.records]

    @property
    def gen_records(self) -> list[ActionRecord]:
        return [r for r in self.records if r.transition == GEN]

    def lm_loss_vars(self) -> list[Var]:
        return [r.lm_loss for r in self.gen_records]

    @property
    def lm_total(self) -> float:
        return float(sum(r.lm_loss.value for r in self.gen_records))

    @property
    def gen_chars(self) -> list[int]:
        return [r.char_id for r in self.gen_records]

    @property
    def max_depth_seen(self) -> int:
        depth = peak = 0
        for t in self.transitions:
            if t == NT:
                depth += 1
                peak = max(peak, depth)
            elif t == REDUCE:
                depth -= 1
        return peak


def _choose(scores: Var, mask: np.ndarray, mode: str, rng,
            forced_transition: int | None):
    if forced_transition is not None:
        if not mask[forced_transition]:
            raise ContractViolation(
                f"forced transition {forced_transition} is illegal here")
        dist = masked_softmax(scores.value, mask)
        return forced_transition, float(dist[forced_transition]), dist
    if mode == "sample":
        return masked_categorical(scores.value, mask, rng)
    if mode == "argmax":
        return argmax_legal(scores.value, mask)
    raise ContractViolation(f"unknown mode '{mode}'")


def _log_prob(scores: Var, mask: np.ndarray, idx: int) -> Var:
    return ad.sub(ad.pick(scores, idx), ad.logsumexp(scores, mask))


def _record_gen(binding: ParamBinding, s: Var, char_id: int,
                lm_detach: bool) -> Var:
    s_lm = ad.detach(s) if lm_detach else s
    return lm_loss(binding, s_lm, char_id)


def encode_pass(binding: ParamBinding, source_ids: Sequence[int],
                mode: str = "sample", rng=None,
                limits: PassLimits | None = None,
                forced: Sequence[int] | None = None,
                lm_detach: bool = True
                ) -> tuple[Trajectory, EncoderNodeTable]:
    """Run the encoder over the full source, inducing one constituency tree."""
    if len(source_ids) == 0:
        raise ContractViolation("empty source")
    if limits is None:
        limits = PassLimits.for_text(len(source_ids))
    stack = StackState(binding.zero_state(),
                       lambda st, x: _spine_step(binding, st, x))
    buf = BufferCursor.teacher(source_ids)
    table = EncoderNodeTable()
    pending: list[EncoderNode] = []       # one entry per open constituent
    span_starts: list[int] = []
    traj = Trajectory("enc", binding.tape)
    gen_count = 0
    while not (traj.records and stack.depth == 0):
        k = len(traj.records)
        if k >= limits.max_actions:
            raise TrajectoryAbandoned("enc", k, limits.max_actions)
        s = stack_summary(stack)
        mask = legal_transitions(stack, buf, limits)
        scores = action_scores(binding, s)
        idx, p, dist = _choose(scores, mask, mode, rng,
                               forced[k] if forced is not None else None)
        rec = ActionRecord(idx, mask.copy(), p, dist,
                           _log_prob(scores, mask, idx), s)
        if idx == NT:
            apply_nt(stack, buf, limits, binding["x_enc_embedding"])
            pending.append(EncoderNode(s_enc=stack_summary(stack)))
            span_starts.append(buf.cursor)
        elif idx == GEN:
            gt = buf.peek()
            rec.lm_loss = _record_gen(binding, s, gt, lm_detach)
            rec.char_id = gt
            gen_count += 1
            apply_gen(stack, buf, limits, binding.char_embedding(gt))
        else:
            _, phrase, stats = apply_reduce(
                stack, buf, limits, lambda ch: bilstm_compose(binding, ch))
            node = pending.pop()
            node.h_enc = phrase
            node.span = (span_starts.pop(), buf.cursor)
            table.append(node)
            rec.child_stats = stats
        rec.gen_count = gen_count
        traj.records.append(rec)
    assert buf.exhausted
    return traj, table


def structural_attention(s_dec: Var, table: EncoderNodeTable
                         ) -> tuple[Var, Var]:
    """Attention over encoder nodes queried by the decoder stack summary."""
    if not table.complete:
        raise ContractViolation("encoder node table is empty or incomplete")
    scores = ad.dots([n.s_enc for n in table.nodes], s_dec)
    alphas = ad.softmax(scores)
    x_dec = ad.lincomb(alphas, [n.h_enc for n in table.nodes])
    return alphas, x_dec


def decode_pass(binding: ParamBinding, table: EncoderNodeTable,
                target_ids: Sequence[int] | None = None,
                mode: str = "sample", rng=None,
                limits: PassLimits | None = None,
                forced: Sequence[int] | None = None,
                free_cap: int | None = None,
                lm_detach: bool = True
                ) -> tuple[Trajectory, AttentionMatrix]:
    """Run the decoder; teacher-forced when target_ids is given, else
    free-running with an emission cap (greedy inference)."""
    if not table.complete:
        raise ContractViolation("decode_pass needs a completed encoder table")
    free_running = target_ids is None
    if free_running:
        if free_cap is None or free_cap < 1:
            raise ContractViolation("free-running decode needs a positive cap")
        buf = BufferCursor.free(free_cap)
    else:
        if len(target_ids) == 0:
            raise ContractViolation("empty target")
        buf = BufferCursor.teacher(target_ids)
    if limits is None:
        limits = PassLimits.for_text(buf.limit)
    stack = StackState(binding.zero_state(),
                       lambda st, x: _spine_step(binding, st, x))
    matrix = AttentionMatrix()
    traj = Trajectory("dec", binding.tape)
    gen_count = 0
    while not (traj.records and stack.depth == 0):
        k = len(traj.records)
        if not free_running and k >= limits.max_actions:
            raise TrajectoryAbandoned("dec", k, limits.max_actions)
        s = stack_summary(stack)
        mask = legal_transitions(stack, buf, limits)
        scores = action_scores(binding, s)
        idx, p, dist = _choose(scores, mask, mode, rng,
                               forced[k] if forced is not None else None)
        rec = ActionRecord(idx, mask.copy(), p, dist,
                           _log_prob(scores, mask, idx), s)
        if idx == NT:
            # query with the pre-push summary; one attention event per NT
            alphas, x_dec = structural_attention(s, table)
            matrix.add_column(alphas, k)
            apply_nt(stack, buf, limits, x_dec,
                     attn_index=matrix.n_columns - 1)
        elif idx == GEN:
            if free_running:
                emit = int(np.argmax(output_distribution(binding, s).value))
            else:
                emit = buf.peek()
            rec.lm_loss = _record_gen(binding, s, emit, lm_detach)
            rec.char_id = emit
            gen_count += 1
            apply_gen(stack, buf, limits, binding.char_embedding(emit))
        else:
            _, _, stats = apply_reduce(
                stack, buf, limits, lambda ch: bilstm_compose(binding, ch))
            rec.child_stats = stats
        rec.gen_count = gen_count
        traj.records.append(rec)
    traj.truncated = free_running and buf.exhausted
    if not free_running:
        assert buf.exhausted
    return traj, matrix


def _spine_step(binding: ParamBinding, state, x):
    return lstm_step(binding.cell("stack"), state, x)


def reduce_spans(traj: Trajectory) -> list[tuple[int, int]]:
    """Character span of each constituent, in REDUCE order."""
    spans: list[tuple[int, int]] = []
    open_starts: list[int] = []
    cursor = 0
    for t in traj.transitions:
        if t == NT:
            open_starts.append(cursor)
        elif t == GEN:
            cursor += 1
        else:
            spans.append((open_starts.pop(), cursor))
    return spans
