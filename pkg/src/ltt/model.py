"""Model parameters and the dense building blocks of the transducer.

One LSTM cell drives the stack spine, two more form the bidirectional
composition function, a tanh perceptron scores the three transitions, and a
softmax perceptron reads the next-character distribution off the stack
summary. The transition policy sees only the stack summary; nothing here
accepts buffer contents or action history.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ContractViolation

OUTPUT_SOFTMAX_PARAMS = ("out_W", "out_b")
EMBEDDING_PARAMS = ("char_embeddings", "x_enc_embedding")


def parameter_shapes(d: int, V: int) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) enumeration; this order is the file format order."""
    return [
        ("char_embeddings", (V, d)),
        ("x_enc_embedding", (d,)),
        ("stack_Wx", (4 * d, d)),
        ("stack_Wh", (4 * d, d)),
        ("stack_b", (4 * d,)),
        ("comp_fwd_Wx", (4 * d, d)),
        ("comp_fwd_Wh", (4 * d, d)),
        ("comp_fwd_b", (4 * d,)),
        ("comp_bwd_Wx", (4 * d, d)),
        ("comp_bwd_Wh", (4 * d, d)),
        ("comp_bwd_b", (4 * d,)),
        ("comp_proj_W", (d, 2 * d)),
        ("comp_proj_b", (d,)),
        ("action_W1", (d, d)),
        ("action_b1", (d,)),
        ("action_W2", (3, d)),
        ("action_b2", (3,)),
        ("out_W", (V, d)),
        ("out_b", (V,)),
    ]


@dataclass
class ModelParameters:
    d: int
    V: int
    arrays: dict[str, np.ndarray]

    def check_finite(self):
        for name, a in self.arrays.items():
            if not np.isfinite(a).all():
                raise ContractViolation(f"parameter '{name}' contains NaN/Inf")

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            self.d, self.V, {n: a.copy() for n, a in self.arrays.items()}
        )


def init_parameters(d: int, V: int, seed: int, scale: float = 0.08,
                    embedding_scale: float | None = None) -> ModelParameters:
    """Uniform(-scale, scale) weights, zero biases, seeded and deterministic."""
    rng = np.random.default_rng(seed)
    emb_scale = scale if embedding_scale is None else embedding_scale
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(d, V):
        if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
            arrays[name] = np.zeros(shape)
        elif name in EMBEDDING_PARAMS:
            arrays[name] = rng.uniform(-emb_scale, emb_scale, shape)
        else:
            arrays[name] = rng.uniform(-scale, scale, shape)
    return ModelParameters(d, V, arrays)


class GradientStore:
    """Per-parameter accumulators, shape-congruent with the model."""

    def __init__(self, params: ModelParameters):
        self.grads: dict[str, np.ndarray] = {
            name: np.zeros_like(a) for name, a in params.arrays.items()
        }

    def add(self, name: str, g: np.ndarray):
        buf = self.grads[name]
        if buf.shape != g.shape:
            raise ContractViolation(
                f"gradient shape {g.shape} != parameter shape {buf.shape} "
                f"for '{name}'"
            )
        buf += g

    def merge(self, other: "GradientStore"):
        for name, g in other.grads.items():
            self.grads[name] += g

    def scale(self, k: float):
        for name in self.grads:
            self.grads[name] *= k

    def zero(self):
        for g in self.grads.values():
            g[:] = 0.0

    def max_abs(self) -> float:
        return max(float(np.abs(g).max()) for g in self.grads.values())


class LstmCell(NamedTuple):
    Wx: Var
    Wh: Var
    b: Var


class ParamBinding:
    """Parameters bound onto one tape as gradient-bearing leaves.

    Bind once per tape; every op in the pass then shares the same leaf Vars so
    gradients from all uses of a weight accumulate into one entry.
    """

    def __init__(self, tape: Tape, params: ModelParameters):
        self.tape = tape
        self.params = params
        self.d = params.d
        self.V = params.V
        self.vars: dict[str, Var] = {
            name: tape.param(a, name) for name, a in params.arrays.items()
        }

    def __getitem__(self, name: str) -> Var:
        return self.vars[name]

    def cell(self, prefix: str) -> LstmCell:
        return LstmCell(
            self.vars[f"{prefix}_Wx"],
            self.vars[f"{prefix}_Wh"],
            self.vars[f"{prefix}_b"],
        )

    def char_embedding(self, char_id: int) -> Var:
        if not 0 <= char_id < self.V:
            raise ContractViolation(f"character id {char_id} out of range")
        return ad.row(self.vars["char_embeddings"], char_id)

    def zero_state(self) -> tuple[Var, Var]:
        z = self.tape.const(np.zeros(self.d))
        return (z, z)


def lstm_step(cell: LstmCell, state: tuple[Var, Var], x: Var) -> tuple[Var, Var]:
    """One LSTM update; returns a fresh (h, c), leaving the inputs untouched."""
    h, c = state
    d = x.value.shape[0]
    if h.value.shape[0] != d or cell.Wx.value.shape[1] != d:
        raise ContractViolation("lstm_step shape mismatch")
    z = ad.add(ad.add(ad.matvec(cell.Wx, x), ad.matvec(cell.Wh, h)), cell.b)
    i = ad.sigmoid(ad.narrow(z, 0, d))
    f = ad.sigmoid(ad.narrow(z, d, 2 * d))
    o = ad.sigmoid(ad.narrow(z, 2 * d, 3 * d))
    g = ad.tanh(ad.narrow(z, 3 * d, 4 * d))
    c2 = ad.add(ad.mul(f, c), ad.mul(i, g))
    h2 = ad.mul(o, ad.tanh(c2))
    return (h2, c2)


def bilstm_compose(binding: ParamBinding, children: Sequence[Var]) -> Var:
    """Order-sensitive composition of a closed constituent's children.

    Forward LSTM over the children, backward LSTM over the reversed children,
    then tanh projection of the two concatenated final states down to d.
    """
    if len(children) == 0:
        raise ContractViolation("composition over an empty child list")
    fwd = binding.zero_state()
    for ch in children:
        fwd = lstm_step(binding.cell("comp_fwd"), fwd, ch)
    bwd = binding.zero_state()
    for ch in reversed(children):
        bwd = lstm_step(binding.cell("comp_bwd"), bwd, ch)
    both = ad.concat(fwd[0], bwd[0])
    return ad.tanh(ad.add(ad.matvec(binding["comp_proj_W"], both),
                          binding["comp_proj_b"]))


def action_scores(binding: ParamBinding, s: Var) -> Var:
    """Transition scores (NT, GEN, REDUCE) from the stack summary alone."""
    hidden = ad.tanh(ad.add(ad.matvec(binding["action_W1"], s),
                            binding["action_b1"]))
    return ad.add(ad.matvec(binding["action_W2"], hidden), binding["action_b2"])


def output_logits(binding: ParamBinding, s: Var) -> Var:
    return ad.add(ad.matvec(binding["out_W"], s), binding["out_b"])


def output_distribution(binding: ParamBinding, s: Var) -> Var:
    return ad.softmax(output_logits(binding, s))


def lm_loss(binding: ParamBinding, s: Var, char_id: int) -> Var:
    """-log p(char | stack summary), in log-space for stability."""
    logits = output_logits(binding, s)
    return ad.sub(ad.logsumexp(logits), ad.pick(logits, char_id))


def masked_softmax(scores: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Probabilities over legal entries only; illegal entries are exactly 0."""
    if not legal.any():
        raise ContractViolation("no legal action")
    z = np.full_like(scores, -np.inf)
    z[legal] = scores[legal] - scores[legal].max()
    dist = np.zeros_like(scores)
    e = np.exp(z[legal])
    dist[legal] = e / e.sum()
    return dist


def masked_categorical(scores: np.ndarray, legal: np.ndarray,
                       rng: np.random.Generator | int
                       ) -> tuple[int, float, np.ndarray]:
    """Sample an index from the legal-masked softmax, reproducibly."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    dist = masked_softmax(scores, legal)
    u = rng.random()
    acc = 0.0
    idx = int(np.flatnonzero(legal)[-1])
    for i in np.flatnonzero(legal):
        acc += dist[i]
        if u < acc:
            idx = int(i)
            break
    p = float(dist[idx])
    if p <= 0.0:
        raise ContractViolation("sampled an action with zero probability")
    return idx, p, dist


def argmax_legal(scores: np.ndarray, legal: np.ndarray
                 ) -> tuple[int, float, np.ndarray]:
    """Greedy pick among legal entries; ties go to the lowest index."""
    dist = masked_softmax(scores, legal)
    masked = np.where(legal, scores, -np.inf)
    idx = int(np.argmax(masked))
    return idx, float(dist[idx]), dist
