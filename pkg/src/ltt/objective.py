"""Training signals: tree rewards, baselines, returns, and the two losses.

The differentiable part is a weighted sum of per-character prediction losses
and a coverage penalty on the attention matrix. The non-differentiable part
shapes tree structure: constituent rewards, -1 penalties on degenerate
patterns, EMA-centered returns discounted per emitted character, and a
score-function (REINFORCE) weighting of each transition's log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ContractViolation
from .stack import GEN, NT, REDUCE
from .transducer import Trajectory


@dataclass(frozen=True)
class RewardConfig:
    penalty: float = -1.0             # unary REDUCE / repeated NT or REDUCE
    terminal_coefficient: float = 4.0
    nonterminal_coefficient: float = 9.0
    coverage_weight: float = 100.0
    lm_weight: float = 10.0
    gamma: float = 0.95


def constituent_reward(n: int, t: int,
                       config: RewardConfig = RewardConfig()) -> float:
    """Reward for closing a constituent with n nonterminal, t terminal kids."""
    if n + t < 1:
        raise ContractViolation("constituent with no children")
    if n == 0:
        return config.terminal_coefficient * t
    return config.nonterminal_coefficient * float(np.sqrt(n))


def transition_penalties(traj: Trajectory,
                         config: RewardConfig = RewardConfig()) -> np.ndarray:
    """-1 on unary REDUCE and on the second of two equal non-GEN transitions."""
    pen = np.zeros(len(traj.records))
    prev = None
    for k, rec in enumerate(traj.records):
        unary = (rec.transition == REDUCE
                 and sum(rec.child_stats) == 1)
        repeated = (prev is not None and rec.transition == prev
                    and rec.transition in (NT, REDUCE))
        if unary or repeated:
            pen[k] = config.penalty
        prev = rec.transition
    return pen


def assign_tree_rewards(traj: Trajectory,
                        config: RewardConfig = RewardConfig()) -> np.ndarray:
    """Total r_k per action: constituent rewards (root excluded) + penalties.

    The values are also written onto the trajectory records.
    """
    rewards = transition_penalties(traj, config)
    depth = 0
    for k, rec in enumerate(traj.records):
        if rec.transition == NT:
            depth += 1
        elif rec.transition == REDUCE:
            if depth > 1:
                rewards[k] += constituent_reward(*rec.child_stats, config)
            depth -= 1
    for rec, r in zip(traj.records, rewards):
        rec.reward = float(r)
    return rewards


def coverage_loss(values: np.ndarray) -> float:
    """Three MSE terms pushing attention toward a one-to-one node mapping."""
    if values.size == 0:
        return 0.0
    row_sums = values.sum(axis=1)
    row_max = values.max(axis=1)
    col_max = values.max(axis=0)
    return float(((1.0 - row_sums) ** 2).mean()
                 + ((1.0 - row_max) ** 2).mean()
                 + ((1.0 - col_max) ** 2).mean())


def coverage_loss_graph(tape: Tape, columns: Sequence[Var]) -> Var:
    """Differentiable twin of coverage_loss over attention column Vars."""
    if not columns:
        return tape.const(np.asarray(0.0))
    one = 1.0
    row_sum = columns[0]
    row_max = columns[0]
    for c in columns[1:]:
        row_sum = ad.add(row_sum, c)
        row_max = ad.maximum(row_max, c)
    t1 = ad.vmean(ad.square(ad.add_const(ad.scale(row_sum, -1.0), one)))
    t2 = ad.vmean(ad.square(ad.add_const(ad.scale(row_max, -1.0), one)))
    col_terms = [
        ad.square(ad.add_const(ad.scale(ad.vmax(c), -1.0), one))
        for c in columns
    ]
    t3 = ad.scale(ad.sum_scalars(col_terms), 1.0 / len(col_terms))
    return ad.add(ad.add(t1, t2), t3)


def combined_differentiable_loss(tape: Tape, lm_losses: Sequence[Var],
                                 L_c: Var | float,
                                 config: RewardConfig = RewardConfig()) -> Var:
    """coverage_weight * L_c + lm_weight * sum of LM losses, as a tape node."""
    lc_var = L_c if isinstance(L_c, Var) else tape.const(np.asarray(float(L_c)))
    parts: list[Var] = [lc_var]
    weights: list[float] = [config.coverage_weight]
    if lm_losses:
        parts.append(ad.sum_scalars(list(lm_losses)))
        weights.append(config.lm_weight)
    return ad.weighted_sum_scalars(parts, weights)


@dataclass
class BaselineState:
    """EMA control variates: one scalar for tree rewards, one LM entry per
    character (so frequent characters do not drown out rare ones)."""

    V: int
    decay: float = 0.95
    r_ema: float = 0.0
    r_seen: bool = False
    lm_ema: np.ndarray = field(default=None)
    lm_seen: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lm_ema is None:
            self.lm_ema = np.zeros(self.V)
        if self.lm_seen is None:
            self.lm_seen = np.zeros(self.V, dtype=bool)

    def center_reward(self, r: float) -> float:
        if not self.r_seen:
            self.r_ema = float(r)
            self.r_seen = True
            return 0.0
        centered = float(r) - self.r_ema
        self.r_ema = self.decay * self.r_ema + (1.0 - self.decay) * float(r)
        return centered

    def center_lm(self, char_id: int, loss: float) -> float:
        if not self.lm_seen[char_id]:
            self.lm_ema[char_id] = float(loss)
            self.lm_seen[char_id] = True
            return 0.0
        centered = float(loss) - float(self.lm_ema[char_id])
        self.lm_ema[char_id] = (self.decay * self.lm_ema[char_id]
                                + (1.0 - self.decay) * float(loss))
        return centered


def baseline_update_and_center(traj: Trajectory, baselines: BaselineState
                               ) -> tuple[np.ndarray, np.ndarray]:
    """Center rewards and LM losses in record order, updating EMAs as we go.

    An action with r_k == 0 carries no reward event, so it neither reads nor
    moves the reward baseline; likewise only GEN records touch the
    per-character LM baselines.
    """
    r_hats = np.zeros(len(traj.records))
    l_hats = np.zeros(len(traj.records))
    for k, rec in enumerate(traj.records):
        if rec.reward != 0.0:
            r_hats[k] = baselines.center_reward(rec.reward)
        if rec.transition == GEN:
            l_hats[k] = baselines.center_lm(rec.char_id,
                                            float(rec.lm_loss.value))
    return r_hats, l_hats


def returns(transitions: Sequence[int], r_hats: np.ndarray,
            l_hats: np.ndarray, L_c: float, decoder_lm_total: float,
            side: str, gamma: float) -> np.ndarray:
    """Per-action returns: discounted suffix sums of (r_hat - l_hat), where
    the discount exponent advances only across GEN transitions; every entry
    then pays the coverage loss, and encoder actions additionally pay the
    decoder's total uncentered LM loss."""
    K = len(transitions)
    out = np.zeros(K)
    suffix = 0.0
    for k in range(K - 1, -1, -1):
        if k + 1 < K and transitions[k + 1] == GEN:
            suffix *= gamma
        suffix += r_hats[k] - l_hats[k]
        out[k] = suffix
    out -= L_c
    if side == "enc":
        out -= decoder_lm_total
    return out


def reinforce_accumulate(traj: Trajectory, R_ks: Sequence[float],
                         grad_store) -> None:
    """Accumulate -R_k * grad(log p_k) for every action into the store."""
    if len(R_ks) != len(traj.records):
        raise ContractViolation("one return per action record required")
    if not traj.records:
        return
    for rec in traj.records:
        if rec.prob <= 0.0:
            raise ContractViolation("chosen action has non-positive probability")
    surrogate = ad.weighted_sum_scalars(
        [rec.log_prob for rec in traj.records],
        [-float(r) for r in R_ks],
    )
    traj.tape.backward(surrogate, into=grad_store)
