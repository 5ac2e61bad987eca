"""Character-level translation with latent constituency trees.

Both encoder and decoder are stack-only transition systems that build a
binaryish tree over the characters they read or emit.  Attention runs
between the constituents of the two trees rather than between tokens.
"""

from .data import (
    CharVocabulary, ParallelCorpus, build_vocab, load_checkpoint,
    load_corpus, save_checkpoint,
)
from .errors import (
    CheckpointError, ContractViolation, CorpusError, LttError,
    TrajectoryAbandoned,
)
from .inference import (
    TranslationResult, bleu, remove_repeated_bigrams, translate_greedy,
)
from .model import GradientStore, ModelParameters, init_parameters
from .objective import (
    BaselineState, RewardConfig, assign_tree_rewards, coverage_loss, returns,
)
from .training import TrainConfig, evaluate_lm, fit, train_epoch

__all__ = [
    "BaselineState",
    "CharVocabulary",
    "CheckpointError",
    "ContractViolation",
    "CorpusError",
    "GradientStore",
    "LttError",
    "ModelParameters",
    "ParallelCorpus",
    "RewardConfig",
    "TrainConfig",
    "TrajectoryAbandoned",
    "TranslationResult",
    "assign_tree_rewards",
    "bleu",
    "build_vocab",
    "coverage_loss",
    "evaluate_lm",
    "fit",
    "init_parameters",
    "load_checkpoint",
    "load_corpus",
    "remove_repeated_bigrams",
    "returns",
    "save_checkpoint",
    "train_epoch",
    "translate_greedy",
]
