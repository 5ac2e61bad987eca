"""Greedy translation, repeated-bigram cleanup, and corpus BLEU."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tape
from .data import CharVocabulary
from .errors import ContractViolation, TrajectoryAbandoned
from .model import ModelParameters, ParamBinding
from .stack import GEN, NT, REDUCE, PassLimits
from .transducer import decode_pass, encode_pass


@dataclass
class TreeNode:
    """Constituent over character offsets [start, end); children in order."""
    span: tuple[int, int]
    children: list["TreeNode"] = field(default_factory=list)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def tree_from_transitions(transitions: Sequence[int]) -> TreeNode:
    """Nested constituents implied by a balanced NT/GEN/REDUCE sequence."""
    open_nodes: list[tuple[int, list[TreeNode]]] = []
    cursor = 0
    root = None
    for a in transitions:
        if a == NT:
            open_nodes.append((cursor, []))
        elif a == GEN:
            cursor += 1
        elif a == REDUCE:
            start, children = open_nodes.pop()
            node = TreeNode((start, cursor), children)
            if open_nodes:
                open_nodes[-1][1].append(node)
            else:
                root = node
    if root is None or open_nodes:
        raise ContractViolation("transition sequence is not balanced")
    return root


def nt_spans(transitions: Sequence[int]) -> list[tuple[int, int]]:
    """Constituent spans listed in NT (opening) order."""
    spans: list[tuple[int, int] | None] = []
    stack: list[tuple[int, int]] = []
    cursor = 0
    for a in transitions:
        if a == NT:
            stack.append((len(spans), cursor))
            spans.append(None)
        elif a == GEN:
            cursor += 1
        else:
            slot, start = stack.pop()
            spans[slot] = (start, cursor)
    return spans


@dataclass
class TranslationResult:
    source: str
    output: str
    encoder_tree: TreeNode
    decoder_tree: TreeNode
    attention: np.ndarray               # encoder nodes x decoder NT events
    encoder_spans: list[tuple[int, int]]  # source spans, REDUCE order
    decoder_spans: list[tuple[int, int]]  # output spans, NT (column) order
    encoder_actions: list[int]
    decoder_actions: list[int]
    truncated: bool
    fallback_used: bool


def translate_greedy(source: str, params: ModelParameters,
                     vocab: CharVocabulary, max_depth: int = 40
                     ) -> TranslationResult:
    """Argmax encoder over the source, then free-running argmax decoding
    until the root constituent closes or the output cap (4x source length)
    cuts generation off."""
    if not source:
        raise ContractViolation("cannot translate an empty source")
    ids = vocab.encode(source)
    slack = 2 * max_depth
    tape = Tape()
    binding = ParamBinding(tape, params)
    fallback = False
    try:
        traj_e, table = encode_pass(
            binding, ids, mode="argmax",
            limits=PassLimits.for_text(len(ids), max_depth, slack))
    except TrajectoryAbandoned:
        # the greedy structural policy wandered past the action budget;
        # fall back to the flat single-constituent parse
        fallback = True
        tape = Tape()
        binding = ParamBinding(tape, params)
        flat = [NT] + [GEN] * len(ids) + [REDUCE]
        traj_e, table = encode_pass(
            binding, ids, limits=PassLimits.for_text(len(ids), max_depth),
            forced=flat)
    traj_d, matrix = decode_pass(
        binding, table, None, mode="argmax",
        limits=PassLimits.for_text(0, max_depth),
        free_cap=4 * len(ids))
    return TranslationResult(
        source=source,
        output=vocab.decode(traj_d.gen_chars),
        encoder_tree=tree_from_transitions(traj_e.transitions),
        decoder_tree=tree_from_transitions(traj_d.transitions),
        attention=matrix.values,
        encoder_spans=[n.span for n in table],
        decoder_spans=nt_spans(traj_d.transitions),
        encoder_actions=traj_e.transitions,
        decoder_actions=traj_d.transitions,
        truncated=traj_d.truncated,
        fallback_used=fallback,
    )


def remove_repeated_bigrams(text: str) -> str:
    """Delete the second copy of any immediately repeated word bigram
    (w1 w2 w1 w2 -> w1 w2), left to right, until no repeats remain."""
    words = text.split()
    i = 0
    while i + 3 < len(words):
        if words[i] == words[i + 2] and words[i + 1] == words[i + 3]:
            del words[i + 2:i + 4]
        else:
            i += 1
    return " ".join(words)


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Corpus-level BLEU-4, case-sensitive, whitespace tokens, no smoothing.

    Orders whose corpus-wide denominator is zero (every sentence shorter
    than n) drop out of the geometric mean; a zero numerator at any
    remaining order zeroes the score.
    """
    if not hypotheses:
        raise ContractViolation("empty hypothesis list")
    if len(hypotheses) != len(references):
        raise ContractViolation(
            f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matched = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        ht = hyp.split()
        rt = ref.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, 5):
            hc = _ngram_counts(ht, n)
            if not hc:
                continue
            rc = _ngram_counts(rt, n)
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += len(ht) - n + 1
    if hyp_len == 0:
        return 0.0
    orders = [(m, t) for m, t in zip(matched, total) if t > 0]
    if not orders or any(m == 0 for m, _ in orders):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in orders) / len(orders)
    brevity = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return brevity * math.exp(log_precision)
