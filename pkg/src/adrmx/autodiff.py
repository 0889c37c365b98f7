"""Small reverse-mode autodiff engine over float64 numpy arrays.

A :class:`Tape` records every op applied to tensors that live on it.
Tensors without a tape are constants: ops on constants only produce
constants and record nothing, which is how parameters get frozen for a
given step (they are simply never watched).

Shapes are strict. ``add``/``sub``/``mul`` require identical shapes; the only
broadcast is :func:`bias_add`, which adds a length-n vector to every row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, DivergenceError

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Parameter:
    """Trainable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"


@dataclass
class _Op:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered op record. Inputs of every op precede it by construction."""

    ops: list[_Op] = field(default_factory=list)
    _next_id: int = 0
    _watched: dict[int, Parameter] = field(default_factory=dict)
    _leaves: dict[int, Tensor] = field(default_factory=dict)

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def watch(self, param: Parameter) -> Tensor:
        """Leaf tensor for ``param``; repeated calls return the same leaf."""
        leaf = self._leaves.get(id(param))
        if leaf is not None:
            return leaf
        nid = self._new_id()
        self._watched[nid] = param
        leaf = Tensor(param.value, tape=self, node_id=nid)
        self._leaves[id(param)] = leaf
        return leaf

    def watched(self) -> list[Parameter]:
        return list(self._watched.values())

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: BackwardFn) -> Tensor:
        nid = self._new_id()
        self.ops.append(_Op(kind, tuple(t.node_id if t.tape is self else None for t in inputs),
                            nid, backward))
        return Tensor(out, tape=self, node_id=nid)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Every watched parameter gets its ``grad`` overwritten; parameters not
        reachable from ``loss`` get zeros. Returns the gradients by name.
        """
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for op in reversed(self.ops):
            g = adj.pop(op.output, None)
            if g is None:
                continue
            grads = op.backward(g)
            for nid, gi in zip(op.inputs, grads):
                if nid is None or gi is None:
                    continue
                if nid in adj:
                    adj[nid] = adj[nid] + gi
                else:
                    adj[nid] = gi
        out = {}
        for nid, param in self._watched.items():
            g = adj.get(nid)
            param.grad = np.zeros_like(param.value) if g is None else np.array(g, dtype=np.float64)
            out[param.name] = param.grad
        return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    tape = tape if tape is not None else loss.tape
    if tape is None:
        raise ContractError("loss is a constant; nothing to differentiate")
    return tape.backward(loss)


def _tape_of(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ContractError("operands live on different tapes")
    return tape


def _finite(kind: str, out: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise DivergenceError(f"non-finite values produced by {kind}", term=kind)
    return out


def emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    out = _finite(kind, out)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(kind, inputs, out, backward)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def constant(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None
    return emit("matmul", (a, b), A @ B,
                 lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return emit("scale", (a,), a.data * c, lambda g: (g * c,))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add vector ``b`` (n,) to every row of ``x`` (m, n)."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"bias_add: rows of {x.shape} vs bias {b.shape}")
    return emit("bias_add", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.shape
    return emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows ``a[index]``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got {a.shape}")
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return emit("gather_rows", (a,), a.data[index], bw)


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of scalar tensors, left to right."""
    if not terms:
        return constant(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by its Euclidean norm."""
    if a.data.ndim != 2:
        raise DimensionError(f"l2_normalize needs a matrix, got {a.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", a.data, a.data))
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateInputError(f"l2_normalize: row {int(bad[0])} has norm {norms[bad[0]]:.3e}")
    z = a.data / norms[:, None]

    def bw(g):
        # (I - z z^T) g / |x| per row
        proj = g - z * np.einsum("ij,ij->i", g, z)[:, None]
        return (proj / norms[:, None],)

    return emit("l2_normalize", (a,), z, bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy needs (batch, C) logits, got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise DimensionError(f"softmax_cross_entropy needs at least 2 classes, got {c}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"softmax_cross_entropy: {n} logit rows but {targets.shape[0]} targets")
    if n == 0:
        raise DimensionError("softmax_cross_entropy: empty batch")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target out of range [0, {c}): min {targets.min()}, max {targets.max()}")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        return (d * (float(g) / n),)

    return emit("softmax_cross_entropy", (logits,), np.array(loss), bw)
