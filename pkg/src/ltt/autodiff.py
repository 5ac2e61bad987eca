"""Reverse-mode automatic differentiation over a fixed set of dense vector ops.

The computation graph is a flat tape: nodes are appended in evaluation order,
so list order is already a topological order and backward is a single reverse
sweep with no recursion. Values are float64 numpy arrays (0-, 1- or 2-d) and
are never mutated after creation; gradient accumulation builds new arrays
instead of writing in place, so a gradient buffer can never alias another
node's buffer.

The operator set is exactly what the model needs (LSTM gates, composition,
softmax heads, attention, the coverage penalty); this is not a generic
autodiff library.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Var:
    """One tape node: a value plus the recipe for its vector-Jacobian product."""

    __slots__ = ("value", "tape", "idx", "parents", "vjp", "param_name")

    def __init__(self, value, tape, idx, parents=(), vjp=None, param_name=None):
        self.value: Array = value
        self.tape: "Tape" = tape
        self.idx: int = idx
        self.parents: tuple[Var, ...] = parents
        # vjp(g) -> one gradient array per parent, same shapes as parent values
        self.vjp: Callable[[Array], tuple[Array, ...]] | None = vjp
        self.param_name: str | None = param_name

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __repr__(self):
        tag = f" param={self.param_name}" if self.param_name else ""
        return f"Var(idx={self.idx}, shape={self.value.shape}{tag})"


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._param_leaves: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, value: Array, parents: tuple[Var, ...] = (), vjp=None,
              param_name: str | None = None) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot combine Vars from different tapes")
        node = Var(value, self, len(self.nodes), parents, vjp, param_name)
        self.nodes.append(node)
        if param_name is not None:
            self._param_leaves.append(node)
        return node

    def const(self, value) -> Var:
        """Leaf with no gradient destination (inputs, detached values)."""
        return self._push(np.asarray(value, dtype=np.float64))

    def param(self, value: Array, name: str) -> Var:
        """Leaf whose gradient is harvested under `name` during backward."""
        return self._push(np.asarray(value, dtype=np.float64), param_name=name)

    def backward(self, root: Var, into=None, wrt: Sequence[Var] = ()):
        """Reverse sweep from a scalar `root`.

        Parameter-leaf gradients are returned as a dict name -> array and, if
        `into` is given, also accumulated via `into.add(name, grad)`. `wrt`
        requests gradients for additional nodes (zeros if unreached).
        """
        if root.tape is not self:
            raise ValueError("root Var belongs to a different tape")
        if root.value.size != 1:
            raise ValueError("backward root must be a scalar")
        grads: list[Array | None] = [None] * (root.idx + 1)
        grads[root.idx] = np.ones_like(root.value)
        param_grads: dict[str, Array] = {}
        keep = {v.idx for v in wrt}
        kept: dict[int, Array] = {}
        for i in range(root.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.param_name is not None:
                prev = param_grads.get(node.param_name)
                param_grads[node.param_name] = g if prev is None else prev + g
            if i in keep:
                kept[i] = g
            if node.vjp is not None:
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None:
                        continue
                    cur = grads[parent.idx]
                    # `+` builds a fresh array, so aliased vjps stay safe
                    grads[parent.idx] = pg if cur is None else cur + pg
            grads[i] = None
        if into is not None:
            for name, g in param_grads.items():
                into.add(name, g)
        wrt_grads = [
            kept.get(v.idx, np.zeros_like(v.value)) for v in wrt
        ]
        return param_grads, wrt_grads


def detach(x: Var) -> Var:
    """Copy a value onto the tape as a fresh leaf, cutting its gradient path."""
    return x.tape.const(x.value)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Var, b: Var) -> Var:
    assert a.shape == b.shape
    return a.tape._push(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    assert a.shape == b.shape
    return a.tape._push(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    assert a.shape == b.shape
    return a.tape._push(
        a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value)
    )


def scale(a: Var, k: float) -> Var:
    return a.tape._push(a.value * k, (a,), lambda g: (g * k,))


def add_const(a: Var, k: float) -> Var:
    return a.tape._push(a.value + k, (a,), lambda g: (g,))


def sigmoid(a: Var) -> Var:
    y = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape._push(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape._push(y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Var) -> Var:
    return a.tape._push(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a: Var) -> Var:
    return a.tape._push(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,))


def maximum(a: Var, b: Var) -> Var:
    """Elementwise max; on ties the gradient goes to the first argument."""
    assert a.shape == b.shape
    take_a = a.value >= b.value
    return a.tape._push(
        np.where(take_a, a.value, b.value),
        (a, b),
        lambda g: (g * take_a, g * ~take_a),
    )


# ---------------------------------------------------------------------------
# shape ops


def concat(a: Var, b: Var) -> Var:
    na = a.value.shape[0]
    return a.tape._push(
        np.concatenate([a.value, b.value]),
        (a, b),
        lambda g: (g[:na], g[na:]),
    )


def narrow(a: Var, lo: int, hi: int) -> Var:
    def vjp(g):
        out = np.zeros_like(a.value)
        out[lo:hi] = g
        return (out,)

    return a.tape._push(a.value[lo:hi], (a,), vjp)


def pick(a: Var, i: int) -> Var:
    """Scalar a[i] from a vector."""

    def vjp(g):
        out = np.zeros_like(a.value)
        out[i] = g
        return (out,)

    return a.tape._push(a.value[i], (a,), vjp)


def row(m: Var, i: int) -> Var:
    """Row m[i] from a matrix (embedding lookup)."""

    def vjp(g):
        out = np.zeros_like(m.value)
        out[i] = g
        return (out,)

    return m.tape._push(m.value[i], (m,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matvec(w: Var, x: Var) -> Var:
    return w.tape._push(
        w.value @ x.value,
        (w, x),
        lambda g: (np.outer(g, x.value), w.value.T @ g),
    )


def dot(a: Var, b: Var) -> Var:
    return a.tape._push(
        np.asarray(a.value @ b.value),
        (a, b),
        lambda g: (g * b.value, g * a.value),
    )


def dots(vs: Sequence[Var], q: Var) -> Var:
    """Vector of dot products [v_0 . q, ..., v_{n-1} . q]."""
    vals = np.array([v.value @ q.value for v in vs])

    def vjp(g):
        gq = np.zeros_like(q.value)
        for gi, v in zip(g, vs):
            gq = gq + gi * v.value
        return tuple(gi * q.value for gi, v in zip(g, vs)) + (gq,)

    return q.tape._push(vals, tuple(vs) + (q,), vjp)


def lincomb(coeffs: Var, vs: Sequence[Var]) -> Var:
    """Weighted sum sum_i coeffs[i] * vs[i] of equal-length vectors."""
    out = np.zeros_like(vs[0].value)
    for c, v in zip(coeffs.value, vs):
        out = out + c * v.value

    def vjp(g):
        gc = np.array([g @ v.value for v in vs])
        return (gc,) + tuple(c * g for c, v in zip(coeffs.value, vs))

    return coeffs.tape._push(out, (coeffs,) + tuple(vs), vjp)


# ---------------------------------------------------------------------------
# reductions / softmax


def vsum(a: Var) -> Var:
    return a.tape._push(
        np.asarray(a.value.sum()), (a,), lambda g: (g * np.ones_like(a.value),)
    )


def vmean(a: Var) -> Var:
    n = a.value.size
    return a.tape._push(
        np.asarray(a.value.mean()),
        (a,),
        lambda g: (g * np.full_like(a.value, 1.0 / n),),
    )


def vmax(a: Var) -> Var:
    """Max of a vector; gradient goes to the first argmax entry."""
    i = int(np.argmax(a.value))

    def vjp(g):
        out = np.zeros_like(a.value)
        out[i] = g
        return (out,)

    return a.tape._push(np.asarray(a.value[i]), (a,), vjp)


def sum_scalars(vs: Sequence[Var]) -> Var:
    total = np.asarray(sum(float(v.value) for v in vs))
    return vs[0].tape._push(total, tuple(vs), lambda g: tuple(g for _ in vs))


def weighted_sum_scalars(vs: Sequence[Var], weights: Sequence[float]) -> Var:
    ws = [float(w) for w in weights]
    total = np.asarray(sum(w * float(v.value) for v, w in zip(vs, ws)))
    return vs[0].tape._push(
        total, tuple(vs), lambda g: tuple(g * w for w in ws)
    )


def softmax(a: Var) -> Var:
    z = a.value - a.value.max()
    e = np.exp(z)
    y = e / e.sum()

    def vjp(g):
        return (y * (g - (g @ y)),)

    return a.tape._push(y, (a,), vjp)


def logsumexp(a: Var, legal: np.ndarray | None = None) -> Var:
    """log sum exp over entries where `legal` is True (all entries if None)."""
    if legal is None:
        legal = np.ones(a.value.shape, dtype=bool)
    if not legal.any():
        raise ValueError("logsumexp over an empty support")
    zs = a.value[legal]
    m = zs.max()
    val = np.asarray(m + np.log(np.exp(zs - m).sum()))

    def vjp(g):
        p = np.zeros_like(a.value)
        p[legal] = np.exp(a.value[legal] - val)
        return (g * p,)

    return a.tape._push(val, (a,), vjp)
