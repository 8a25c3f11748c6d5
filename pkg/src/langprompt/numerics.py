"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the transformer needs are provided. Every op
works on numpy arrays in row-major order; the last axis is the feature axis and
the second-to-last is the row (sequence) axis. Leading axes, when present, are
batch/head axes and must match exactly between operands.

Usage::

    with GradTape() as tape:
        loss = cross_entropy(logits(params), targets)
    grads = backward(tape, loss)
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

MASK_VALUE = -1e9

_name_counter = itertools.count()
_active_tape: "GradTape | None" = None
_strict = False


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = "") -> None:
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None) -> None:
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError("Tensor", arr.shape, detail="every dimension must be >= 1")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name if name is not None else f"t{next(_name_counter)}"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor({self.name!r}, shape={self.shape}{flag})"


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Ordered record of ops executed while the tape is active.

    Nodes are appended in execution order, so inputs always precede the nodes
    that consume them. Tapes are not thread-safe.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._prev: GradTape | None = None

    def __enter__(self) -> "GradTape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._prev

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _active_tape
    prev, _active_tape = _active_tape, None
    try:
        yield
    finally:
        _active_tape = prev


@contextlib.contextmanager
def strict(enabled: bool = True) -> Iterator[None]:
    """Raise NonFiniteError whenever an op receives a non-finite input."""
    global _strict
    prev, _strict = _strict, enabled
    try:
        yield
    finally:
        _strict = prev


def _tracked(inputs: Sequence[Tensor]) -> bool:
    if _active_tape is None:
        return False
    return any(t.requires_grad for t in inputs)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    if _strict:
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(f"{op}: non-finite value in input {t.name!r}")
    track = _tracked(inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _active_tape.nodes.append(_Node(op, tuple(inputs), out, backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (..., m, k) @ b (k, n) or b (..., k, n) with identical leading axes."""
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ShapeError("matmul", A.shape, B.shape)
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise ShapeError("matmul", A.shape, B.shape, detail="leading axes differ")

    def bwd(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if B.ndim == 2 and g.ndim > 2:
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit("matmul", (a, b), A @ B, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add `bias` to every leading slice of `x`; bias.shape must equal x's trailing dims."""
    k = bias.data.ndim
    if x.data.ndim < k or x.shape[-k:] != bias.shape:
        raise ShapeError("add_bias", x.shape, bias.shape)
    return _emit("add_bias", (x, bias), x.data + bias.data,
                 lambda g: (g, _sum_to(g, bias.shape) if bias.requires_grad else None))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the row axis (second to last)."""
    if not parts:
        raise ShapeError("concat_rows", detail="no inputs")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.data.ndim != len(ref) or p.shape[:-2] != ref[:-2] or p.shape[-1] != ref[-1]:
            raise ShapeError("concat_rows", *(q.shape for q in parts))
    if len(ref) < 2:
        raise ShapeError("concat_rows", *(q.shape for q in parts), detail="need rank >= 2")
    bounds = np.cumsum([0] + [p.shape[-2] for p in parts])

    def bwd(g):
        # each input receives exactly its own row range of the upstream gradient
        return [g[..., bounds[i]:bounds[i + 1], :] for i in range(len(parts))]

    out = np.concatenate([p.data for p in parts], axis=-2)
    return _emit("concat_rows", tuple(parts), out, bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    rows = x.shape[-2]
    if not 0 <= start < stop <= rows:
        raise ShapeError("slice_rows", x.shape, detail=f"rows [{start}, {stop})")

    def bwd(g):
        full = np.zeros_like(x.data)
        full[..., start:stop, :] = g
        return (full,)

    return _emit("slice_rows", (x,), x.data[..., start:stop, :], bwd)


def tile_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat x along a new leading batch axis."""
    out = np.broadcast_to(x.data, (batch, *x.shape)).copy()
    return _emit("tile_batch", (x,), out, lambda g: (g.sum(axis=0),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != x.size:
        raise ShapeError("reshape", x.shape, shape)
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"axes {axes}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inv),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; output shape is ids.shape + (dim,)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if table.data.ndim != 2 or ids.size == 0 or ids.min() < 0 or ids.max() >= V:
        raise ShapeError("embedding", table.shape, ids.shape, detail="ids out of range")

    def bwd(g):
        if not table.requires_grad:
            return (None,)
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit("embedding", (table,), table.data[ids], bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bwd(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if not gamma.requires_grad and not beta.requires_grad:
            return gx, None, None
        return gx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return _emit("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, bwd)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), p, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    v2 = v * v
    t = np.tanh(_GELU_C * (v + 0.044715 * v2 * v))
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du),)

    return _emit("gelu", (x,), out, bwd)


def mask_fill(x: Tensor, mask: np.ndarray) -> Tensor:
    """Replace entries where `mask` is True with a large negative constant.

    `mask` must broadcast to x's shape. Masked positions receive zero gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError("mask_fill", x.shape, mask.shape) from None
    out = np.where(mask, MASK_VALUE, x.data)
    return _emit("mask_fill", (x,), out, lambda g: (np.where(mask, 0.0, g),))


def causal_mask(rows: int) -> np.ndarray:
    """True above the diagonal: position i may not see j > i."""
    return np.triu(np.ones((rows, rows), dtype=bool), k=1)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean token cross-entropy.

    logits (..., V); targets int array of shape logits.shape[:-1]; weights
    (same shape as targets, default all ones) select supervised positions.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ShapeError("cross_entropy", logits.shape, targets.shape,
                         detail="target index outside vocabulary")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: no supervised positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum() / total

    def bwd(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return ((p - onehot) * (w / total)[..., None] * g.reshape(()),)

    return _emit("cross_entropy", (logits,), np.array([loss], dtype=logits.data.dtype), bwd)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(tape: GradTape, loss: Tensor) -> dict[str, Tensor]:
    """Gradients of a scalar `loss` for every requires_grad leaf on the tape.

    Returns a map from tensor name to gradient. Leaves are tensors that were
    fed into recorded ops without being produced by one. Frozen tensors never
    appear in the map.
    """
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not tape.nodes:
        raise ValueError("backward: tape is empty")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(n.output) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    out: dict[str, Tensor] = {}
    for key, leaf in leaves.items():
        if leaf.name in out:
            raise ValueError(f"backward: duplicate leaf name {leaf.name!r}")
        out[leaf.name] = Tensor(grads[key].reshape(leaf.shape), name=leaf.name)
    return dict(sorted(out.items()))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` recomputes the scalar loss from the current contents of `params`.
    When `max_entries` is set, that many coordinates per parameter are probed
    (chosen with `seed`); otherwise every coordinate is.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name!r} is {p.data.dtype}")
    with GradTape() as tape:
        loss = f()
    analytic = backward(tape, loss) if tape.nodes else {}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            ga = analytic.get(p.name)
            ga = np.zeros(p.size) if ga is None else ga.data.reshape(-1)
            idx = np.arange(p.size)
            if max_entries is not None and p.size > max_entries:
                idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                err = abs(ga[i] - num) / max(1e-8, abs(ga[i]) + abs(num))
                worst = max(worst, err)
    return worst
