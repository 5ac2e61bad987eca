"""Batch training: coupled passes per pair, averaged gradients, Adam, epochs.

Per pair, one tape hosts the sampled encoder pass and the teacher-forced
decoder pass. The differentiable loss (character prediction + coverage) is
backpropagated first; tree rewards are then assigned, centered against the
EMA baselines, turned into per-action returns, and applied as REINFORCE
weights on the stored action log-probabilities. Both gradient streams merge
in one store, so each batch costs a single optimizer step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape
from .data import ParallelCorpus, build_vocab, save_checkpoint
from .errors import CheckpointError, ContractViolation, TrajectoryAbandoned
from .model import GradientStore, ModelParameters, ParamBinding, init_parameters
from .objective import (
    BaselineState, RewardConfig, assign_tree_rewards,
    baseline_update_and_center, combined_differentiable_loss, coverage_loss,
    coverage_loss_graph, reinforce_accumulate, returns,
)
from .optim import AdamState, adam_step
from .stack import GEN, NT, REDUCE, PassLimits
from .transducer import decode_pass, encode_pass

log = logging.getLogger(__name__)

IdPair = tuple[list[int], list[int]]


@dataclass
class TrainConfig:
    batch_size: int = 10
    max_epochs: int = 12
    gamma: float = 0.95
    ema_decay: float = 0.95
    seed: int = 0
    patience: int = 3
    checkpoint_dir: str = "checkpoints"
    resample_limit: int = 3
    hidden: int = 384
    lr: float = 1e-3
    init_scale: float = 0.08
    embedding_scale: float | None = None
    full_backprop: bool = False
    strict_sequential: bool = True
    early_stopping: bool = True
    max_depth: int = 40

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")

    def reward_config(self) -> RewardConfig:
        return RewardConfig(gamma=self.gamma)

    def limits_for(self, text_length: int, slack: int = 0) -> PassLimits:
        return PassLimits.for_text(text_length, self.max_depth, slack)


def flat_actions(length: int) -> list[int]:
    """The trivial single-constituent structure over `length` characters."""
    return [NT] + [GEN] * length + [REDUCE]


def train_pair(source_ids: Sequence[int], target_ids: Sequence[int],
               params: ModelParameters, baselines: BaselineState,
               rng: np.random.Generator, config: TrainConfig,
               grad_store: GradientStore,
               forced_enc: Sequence[int] | None = None,
               forced_dec: Sequence[int] | None = None,
               use_reinforce: bool = True,
               mode: str = "sample") -> dict | None:
    """One sentence pair's gradient contributions; None if the pair was
    skipped because sampling kept exhausting the action budget."""
    reward_cfg = config.reward_config()
    lm_detach = not config.full_backprop
    for attempt in range(config.resample_limit):
        tape = Tape()
        binding = ParamBinding(tape, params)
        try:
            traj_e, table = encode_pass(
                binding, source_ids, mode, rng,
                limits=config.limits_for(len(source_ids)),
                forced=forced_enc, lm_detach=lm_detach)
            traj_d, matrix = decode_pass(
                binding, table, target_ids, mode, rng,
                limits=config.limits_for(len(target_ids)),
                forced=forced_dec, lm_detach=lm_detach)
            break
        except TrajectoryAbandoned as e:
            log.warning("attempt %d abandoned on the %s side (%d of %d "
                        "actions)", attempt + 1, e.side, e.actions_taken,
                        e.budget)
    else:
        log.warning("skipping pair after %d abandoned attempts",
                    config.resample_limit)
        return None

    L_c = coverage_loss(matrix.values)
    lc_term = (coverage_loss_graph(tape, matrix.columns)
               if config.full_backprop else L_c)
    lm_vars = traj_e.lm_loss_vars() + traj_d.lm_loss_vars()
    combined = combined_differentiable_loss(tape, lm_vars, lc_term, reward_cfg)
    tape.backward(combined, into=grad_store)

    rewards_e = assign_tree_rewards(traj_e, reward_cfg)
    rewards_d = assign_tree_rewards(traj_d, reward_cfg)
    r_e, l_e = baseline_update_and_center(traj_e, baselines)
    r_d, l_d = baseline_update_and_center(traj_d, baselines)
    dec_lm_total = traj_d.lm_total
    R_e = returns(traj_e.transitions, r_e, l_e, L_c, dec_lm_total, "enc",
                  config.gamma)
    R_d = returns(traj_d.transitions, r_d, l_d, L_c, dec_lm_total, "dec",
                  config.gamma)
    if use_reinforce:
        reinforce_accumulate(traj_e, R_e, grad_store)
        reinforce_accumulate(traj_d, R_d, grad_store)

    n_chars = len(source_ids) + len(target_ids)
    return {
        "lm_enc": traj_e.lm_total,
        "lm_dec": dec_lm_total,
        "lm_per_char": (traj_e.lm_total + dec_lm_total) / n_chars,
        "lm_dec_per_char": dec_lm_total / len(target_ids),
        "coverage": L_c,
        "loss": float(combined.value),
        "mean_reward": float(np.concatenate([rewards_e, rewards_d]).mean()),
        "gen_count_enc": len(traj_e.gen_records),
        "gen_count_dec": len(traj_d.gen_records),
        "depth_enc": traj_e.max_depth_seen,
        "depth_dec": traj_d.max_depth_seen,
        "actions_enc": len(traj_e),
        "actions_dec": len(traj_d),
    }


def train_epoch(pairs: Sequence[IdPair], params: ModelParameters,
                config: TrainConfig, baselines: BaselineState,
                adam: AdamState, epoch_index: int,
                emit: Callable[[str], None] | None = None) -> dict:
    """One shuffled pass over the corpus with one Adam step per batch."""
    if not pairs:
        raise ContractViolation("empty training corpus")
    order = np.random.default_rng(
        [config.seed, epoch_index]).permutation(len(pairs))
    sums = {"lm_per_char": 0.0, "coverage": 0.0, "mean_reward": 0.0,
            "lm_dec_per_char": 0.0}
    used_total = 0
    skipped = 0
    for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
        batch = order[start:start + config.batch_size]
        store = GradientStore(params)
        batch_sums = dict.fromkeys(sums, 0.0)
        used = 0
        for pair_index in batch:
            rng = np.random.default_rng(
                [config.seed, epoch_index, int(pair_index)])
            src, tgt = pairs[pair_index]
            m = train_pair(src, tgt, params, baselines, rng, config, store)
            if m is None:
                skipped += 1
                continue
            used += 1
            for k in batch_sums:
                batch_sums[k] += m[k]
        if used == 0:
            continue
        store.scale(1.0 / used)
        adam_step(params, store, adam)
        used_total += used
        for k in sums:
            sums[k] += batch_sums[k]
        if emit is not None:
            emit(f"epoch={epoch_index} batch={batch_no} "
                 f"lm={batch_sums['lm_per_char'] / used:.6f} "
                 f"coverage={batch_sums['coverage'] / used:.6f} "
                 f"reward={batch_sums['mean_reward'] / used:.6f}")
    if used_total == 0:
        raise ContractViolation("every pair in the epoch was skipped")
    out = {k: v / used_total for k, v in sums.items()}
    out["pairs_used"] = used_total
    out["pairs_skipped"] = skipped
    return out


def evaluate_lm(pairs: Sequence[IdPair], params: ModelParameters,
                config: TrainConfig) -> float:
    """Teacher-forced decoder LM loss per target character, with greedy
    (argmax) structural decisions so the number is deterministic."""
    total = 0.0
    chars = 0
    for src, tgt in pairs:
        tape = Tape()
        binding = ParamBinding(tape, params)
        slack = 2 * config.max_depth
        try:
            traj_e, table = encode_pass(
                binding, src, mode="argmax",
                limits=config.limits_for(len(src), slack))
            traj_d, _ = decode_pass(
                binding, table, tgt, mode="argmax",
                limits=config.limits_for(len(tgt), slack))
        except TrajectoryAbandoned:
            # greedy roll-out wandered; score the trivial flat structure
            tape = Tape()
            binding = ParamBinding(tape, params)
            _, table = encode_pass(binding, src, forced=flat_actions(len(src)))
            traj_d, _ = decode_pass(binding, table, tgt,
                                    forced=flat_actions(len(tgt)))
        total += traj_d.lm_total
        chars += len(tgt)
    return total / chars


def fit(train_corpus: ParallelCorpus, dev_corpus: ParallelCorpus,
        config: TrainConfig,
        dev_eval_fn: Callable | None = None) -> Path:
    """Full training run; returns the path of the best-dev checkpoint."""
    vocab = build_vocab(train_corpus, "both")
    encode = lambda text: vocab.encode(text)
    train_pairs = [(encode(s), encode(t)) for s, t in train_corpus.pairs]
    dev_pairs = [(encode(s), encode(t)) for s, t in dev_corpus.pairs]
    params = init_parameters(config.hidden, len(vocab), config.seed,
                             config.init_scale, config.embedding_scale)
    adam = AdamState.for_params(params, config.lr)
    baselines = BaselineState(len(vocab), config.ema_decay)
    ckpt_dir = Path(config.checkpoint_dir)
    try:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        (ckpt_dir / ".write-probe").write_text("")
        (ckpt_dir / ".write-probe").unlink()
    except OSError as e:
        raise CheckpointError(
            f"checkpoint directory {ckpt_dir} is not writable: {e}") from e
    # checkpoint_dir is where the file lives, not part of the recipe; keeping
    # it out lets identical runs in different directories match byte-for-byte
    config_doc = {k: v for k, v in asdict(config).items()
                  if k != "checkpoint_dir"}
    metadata = {
        "config": config_doc,
        "model_vocab": vocab.id_to_char,
        "source_vocab": build_vocab(train_corpus, "source").id_to_char,
        "target_vocab": build_vocab(train_corpus, "target").id_to_char,
    }
    best_path = ckpt_dir / "best.ckpt"
    best = np.inf
    bad_streak = 0
    evaluate = dev_eval_fn or (
        lambda p: evaluate_lm(dev_pairs, p, config))
    with open(ckpt_dir / "metrics.log", "w") as metrics_file:
        emit = lambda line: print(line, file=metrics_file)
        for epoch in range(1, config.max_epochs + 1):
            em = train_epoch(train_pairs, params, config, baselines, adam,
                             epoch, emit)
            dev = float(evaluate(params))
            emit(f"epoch={epoch} train_lm={em['lm_per_char']:.6f} "
                 f"dev_lm={dev:.6f}")
            if dev < best:
                best = dev
                bad_streak = 0
                save_checkpoint(params, baselines, adam,
                                {**metadata, "epoch": epoch, "dev_lm": dev},
                                best_path)
            else:
                bad_streak += 1
                if config.early_stopping and bad_streak >= config.patience:
                    break
    if not best_path.exists():
        raise CheckpointError("no checkpoint was written")
    return best_path
