"""Minimal reverse-mode gradient tape over numpy arrays.

Nodes are appended in execution order, so the tape is already topologically
sorted; :func:`backward` walks it in reverse.  Only nodes that depend on a
trainable leaf carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor_core import InvalidAxisError, ShapeMismatchError, im2col


@dataclass(eq=False)
class Node:
    value: np.ndarray
    tag: str
    parents: tuple[int, ...] = ()
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
    requires_grad: bool = False
    name: str | None = None


class Var:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self):
        return self.node.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)
    leaves: dict[str, int] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None, trainable: bool = False) -> Var:
        if trainable:
            if name is None:
                raise ValueError("trainable leaves need a name")
            if name in self.leaves:
                raise ValueError(f"leaf {name!r} registered twice")
        node = Node(np.asarray(value, dtype=np.float64), "leaf", requires_grad=trainable, name=name)
        self.nodes.append(node)
        idx = len(self.nodes) - 1
        if trainable:
            self.leaves[name] = idx
        return Var(self, idx)

    def constant(self, value) -> Var:
        return self.leaf(value)

    def push(self, value: np.ndarray, tag: str, parents: Sequence[Var], vjp) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ValueError("cannot mix vars from different tapes")
        req = any(p.node.requires_grad for p in parents)
        self.nodes.append(Node(value, tag, tuple(p.index for p in parents), vjp if req else None, req))
        return Var(self, len(self.nodes) - 1)


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, loss: Var) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable leaf on ``tape``.

    Leaves that the loss does not depend on get zero gradients.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for idx in range(loss.index, -1, -1):
        g = grads.pop(idx, None) if tape.nodes[idx].tag != "leaf" else grads.get(idx)
        node = tape.nodes[idx]
        if g is None or node.vjp is None:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not tape.nodes[p].requires_grad:
                continue
            grads[p] = grads[p] + gp if p in grads else gp
    return {
        name: grads.get(idx, np.zeros_like(tape.nodes[idx].value))
        for name, idx in tape.leaves.items()
    }


# ---------------------------------------------------------------------------
# ops


def einsum(subscripts: str, *operands) -> Var:
    """Explicit-output einsum (``"ij,jk->ik"``); no repeated index per operand."""
    tape = next(o.tape for o in operands if isinstance(o, Var))
    vs = [_lift(tape, o) for o in operands]
    ins, out = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    if len(in_subs) != len(vs):
        raise ValueError(f"{len(in_subs)} operand subscripts for {len(vs)} operands")
    for s in in_subs:
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index in operand subscripts {s!r}")
    arrays = [v.value for v in vs]
    value = np.einsum(subscripts, *arrays, optimize=True)

    def vjp(g):
        res = []
        for k, (s, v) in enumerate(zip(in_subs, vs)):
            if not v.node.requires_grad:
                res.append(None)
                continue
            others = [in_subs[j] for j in range(len(vs)) if j != k]
            avail = set(out).union(*others) if others else set(out)
            target = "".join(ch for ch in s if ch in avail)
            expr = ",".join([out] + others) + "->" + target
            gk = np.einsum(expr, g, *[arrays[j] for j in range(len(vs)) if j != k], optimize=True)
            if target != s:
                # indices summed only within operand k: broadcast back
                sizes = dict(zip(s, v.value.shape))
                gk = gk.reshape([sizes[ch] if ch in target else 1 for ch in s])
                gk = np.broadcast_to(gk, v.value.shape).copy()
            res.append(gk)
        return res

    return tape.push(value, "einsum", vs, vjp)


def contract(a: Var, b, pairs) -> Var:
    """Tape version of :func:`metalora.tensor_core.contract`."""
    tape = a.tape
    b = _lift(tape, b)
    na, nb = a.value.ndim, b.value.ndim
    letters = iter("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ")
    sa = [next(letters) for _ in range(na)]
    sb = [next(letters) for _ in range(nb)]
    seen_a, seen_b = set(), set()
    for i, j in pairs:
        if not (0 <= i < na and 0 <= j < nb) or i in seen_a or j in seen_b:
            raise InvalidAxisError(f"invalid contraction pair ({i}, {j})")
        if a.shape[i] != b.shape[j]:
            raise ShapeMismatchError(f"pair ({i}, {j}): extent {a.shape[i]} != {b.shape[j]}")
        seen_a.add(i)
        seen_b.add(j)
        sb[j] = sa[i]
    out = [sa[i] for i in range(na) if i not in seen_a] + [sb[j] for j in range(nb) if j not in seen_b]
    return einsum("".join(sa) + "," + "".join(sb) + "->" + "".join(out), a, b)


def add(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape.push(a.value + b.value, "add", (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Var:
    tape = a.tape if isinstance(a, Var) else b.tape
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.push(av * bv, "mul", (a, b),
                     lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, s: float) -> Var:
    if s == 1.0:
        return a
    return a.tape.push(s * a.value, "scale", (a,), lambda g: (s * g,))


def reshape(a: Var, shape) -> Var:
    old = a.shape
    return a.tape.push(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def take(a: Var, indices, axis: int = 0) -> Var:
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return a.tape.push(np.take(a.value, indices, axis=axis), "take", (a,), vjp)


def mean(a: Var, axes) -> Var:
    axes = tuple(axes)
    shape = a.shape
    count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return a.tape.push(a.value.mean(axis=axes), "mean", (a,), vjp)


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.push(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.push(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def activate(a: Var, tag: str) -> Var:
    if tag == "tanh":
        return tanh(a)
    if tag == "relu":
        return relu(a)
    if tag == "identity":
        return a
    raise ValueError(f"unknown activation {tag!r}")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Var, labels) -> Var:
    """Mean cross-entropy over the batch of ``N x C`` logits."""
    labels = np.asarray(labels, dtype=np.intp)
    z = logits.value
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return logits.tape.push(np.asarray(loss), "softmax_xent", (logits,), vjp)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Var:
    """Batched cross-correlation of ``N x H x W x I`` inputs.

    ``w`` is ``K x K x I x O`` (shared) or ``N x K x K x I x O`` (one kernel
    per sample).  Forward is patch extraction plus matmul; the input
    gradient scatters back through the same patch geometry.
    """
    tape = w.tape if isinstance(w, Var) else x.tape
    x, w = _lift(tape, x), _lift(tape, w)
    X, Wt = x.value, w.value
    if X.ndim != 4 or Wt.ndim not in (4, 5):
        raise ShapeMismatchError(f"expected NxHxWxI input and 4/5-order kernel, got {X.shape}, {Wt.shape}")
    N, H, W_, I = X.shape
    K = Wt.shape[-4]
    if Wt.shape[-3] != K or Wt.shape[-2] != I:
        raise ShapeMismatchError(f"kernel {Wt.shape} does not match input channels {I}")
    O = Wt.shape[-1]
    cols = im2col(X, K, stride, padding)  # N, H', W', K, K, I
    Ho, Wo = cols.shape[1:3]
    flat = cols.reshape(N, Ho * Wo, K * K * I)
    shared = Wt.ndim == 4
    wm = Wt.reshape(K * K * I, O) if shared else Wt.reshape(N, K * K * I, O)
    out = (flat @ wm).reshape(N, Ho, Wo, O)

    def vjp(g):
        gm = g.reshape(N, Ho * Wo, O)
        gx = gw = None
        if w.node.requires_grad:
            if shared:
                gw = (flat.reshape(-1, K * K * I).T @ gm.reshape(-1, O)).reshape(Wt.shape)
            else:
                gw = (flat.transpose(0, 2, 1) @ gm).reshape(Wt.shape)
        if x.node.requires_grad:
            gcols = (gm @ (wm.T if shared else wm.transpose(0, 2, 1))).reshape(N, Ho, Wo, K, K, I)
            gpad = np.zeros((N, H + 2 * padding, W_ + 2 * padding, I))
            for a in range(K):
                for b in range(K):
                    gpad[:, a : a + stride * Ho : stride, b : b + stride * Wo : stride] += gcols[:, :, :, a, b]
            gx = gpad[:, padding : padding + H, padding : padding + W_]
        return gx, gw

    return tape.push(out, "conv2d", (x, w), vjp)
