"""Dense float64 tensors with a reverse-mode tape and an Adam optimizer.

Every op works on 1-D or 2-D row-major arrays. Broadcasting happens only
where an op says so (``linear`` bias, ``add_row``/``mul_row``).

Recording is opt-in: ops are taped only while a :class:`Tape` is active on
the current thread and at least one input requires a gradient. Outside a
tape every op is a plain numpy evaluation.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateRowError(ValueError):
    """A softmax row has no allowed column."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: int | None = None

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(dims={self.dims}, requires_grad={self.requires_grad})"

    # operator sugar for the common elementwise cases
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Tape:
    """Records differentiable ops in insertion order for one thread."""

    nodes: list[_Node] = field(default_factory=list)
    _prev: "Tape | None" = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes.clear()


_local = threading.local()


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError("non-finite value produced by forward op")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    result._node = None
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._node = len(tape.nodes)
        tape.nodes.append(_Node(result, parents, backward))
    else:
        result.requires_grad = False
    return result


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into the ``grad`` slot of every tape leaf.

    Leaves are tensors with ``requires_grad`` that were not produced by a
    taped op (parameters, inputs). Accumulation follows reverse insertion
    order, so repeated runs are bitwise reproducible. Returns a map from
    ``id(leaf)`` to its accumulated gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got dims {loss.dims}")
    tape = tape or active_tape()
    if tape is None or loss._node is None:
        raise ValueError("loss was not produced on an active tape")
    nodes = tape.nodes
    if loss._node >= len(nodes) or nodes[loss._node].out is not loss:
        raise ValueError("loss does not belong to this tape")

    inner: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for idx in range(loss._node, -1, -1):
        g = inner.pop(idx, None)
        if g is None:
            continue
        node = nodes[idx]
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pidx = parent._node
            if pidx is not None and pidx < len(nodes) and nodes[pidx].out is parent:
                if pidx in inner:
                    inner[pidx] = inner[pidx] + pg
                else:
                    inner[pidx] = pg
            else:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=DTYPE, copy=True)
                else:
                    parent.grad = parent.grad + pg
                leaves[id(parent)] = parent
    return {k: t.grad for k, t in leaves.items()}


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got dims {t.dims}")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {a.dims} vs {b.dims}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree ({a.dims} @ {b.dims})")
    A, B = a.data, b.data

    def bwd(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _record(A @ B, (a, b), bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x [n×in], weight [out×in], bias [out]."""
    _need_2d(x, "linear")
    _need_2d(weight, "linear")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[1]} vs weight {weight.dims}")
    X, W = x.data, weight.data
    out = X @ W.T
    if bias is not None:
        if bias.shape != (W.shape[0],):
            raise ShapeError(f"linear: bias dims {bias.dims} vs out width {W.shape[0]}")
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def bwd(g):
        gx = g @ W if x.requires_grad else None
        gw = g.T @ X if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0) if bias.requires_grad else None

    return _record(out, parents, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def _row_vector(r: Tensor, width: int, op: str) -> np.ndarray:
    if r.data.size != width or r.data.ndim > 2 or (r.data.ndim == 2 and r.shape[0] != 1):
        raise ShapeError(f"{op}: row operand dims {r.dims} vs width {width}")
    return r.data.reshape(width)


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """x [n×d] plus one row [d] (or [1×d]) added to every row."""
    _need_2d(x, "add_row")
    R = _row_vector(row, x.shape[1], "add_row")
    rshape = row.shape
    return _record(x.data + R, (x, row), lambda g: (g, g.sum(axis=0).reshape(rshape)))


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """x [n×d] times one row [d] (or [1×d]), elementwise per row."""
    _need_2d(x, "mul_row")
    R = _row_vector(row, x.shape[1], "mul_row")
    X = x.data
    rshape = row.shape

    def bwd(g):
        return g * R, (g * X).sum(axis=0).reshape(rshape)

    return _record(X * R, (x, row), bwd)


def transpose(a: Tensor) -> Tensor:
    _need_2d(a, "transpose")
    return _record(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if math.prod(dims) != a.data.size:
        raise ShapeError(f"reshape {a.dims} -> {list(dims)}")
    shape = a.shape
    return _record(a.data.reshape(dims).copy(), (a,), lambda g: (g.reshape(shape),))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    _need_2d(a, "slice_rows")
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows [{start}:{stop}] of {n} rows")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _need_2d(a, "slice_cols")
    n = a.shape[1]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_cols [{start}:{stop}] of {n} cols")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[:, start:stop] = g
        return (full,)

    return _record(np.ascontiguousarray(a.data[:, start:stop]), (a,), bwd)


def take_rows(a: Tensor, index: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows by index; repeated indices accumulate in the backward pass."""
    _need_2d(a, "take_rows")
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"take_rows index out of range for {a.shape[0]} rows")
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_rows of nothing")
    for p in parts:
        _need_2d(p, "concat_rows")
    width = parts[0].shape[1]
    if any(p.shape[1] != width for p in parts):
        raise ShapeError("concat_rows: widths differ")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_cols of nothing")
    for p in parts:
        _need_2d(p, "concat_cols")
    height = parts[0].shape[0]
    if any(p.shape[0] != height for p in parts):
        raise ShapeError("concat_cols: heights differ")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bwd)


def layer_norm(x: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise normalization to zero mean / unit variance, no affine part."""
    _need_2d(x, "layer_norm")
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd

    def bwd(g):
        gm = g.mean(axis=1, keepdims=True)
        gxm = (g * xhat).mean(axis=1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return _record(xhat, (x,), bwd)


def silu(x: Tensor) -> Tensor:
    X = x.data
    sig = 1.0 / (1.0 + np.exp(-X))

    def bwd(g):
        return (g * (sig * (1.0 + X * (1.0 - sig))),)

    return _record(X * sig, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    X = x.data
    inner = _GELU_C * (X + 0.044715 * (X * X * X))
    th = np.tanh(inner)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * X * X)
        return (g * (0.5 * (1.0 + th) + 0.5 * X * (1.0 - th * th) * dinner),)

    return _record(0.5 * X * (1.0 + th), (x,), bwd)


def _mask_bias(mask, shape: tuple[int, int]) -> np.ndarray:
    """Additive 0/-inf bias for a boolean mask, cached on mask objects."""
    cached = getattr(mask, "_bias", None)
    if cached is not None and cached.shape == shape:
        return cached
    allowed = np.asarray(getattr(mask, "allowed", mask), dtype=bool)
    if allowed.shape != shape:
        raise ShapeError(f"mask dims {list(allowed.shape)} vs logits {list(shape)}")
    if not allowed.any(axis=1).all():
        bad = int(np.flatnonzero(~allowed.any(axis=1))[0])
        raise DegenerateRowError(f"row {bad} has no allowed column")
    bias = np.where(allowed, 0.0, -np.inf)
    bias.setflags(write=False)
    if hasattr(mask, "allowed"):
        try:
            object.__setattr__(mask, "_bias", bias)
        except AttributeError:
            pass
    return bias


def softmax_rows(logits: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Row softmax; ``bias`` is an additive 0/-inf mask. Blocked entries are
    exactly 0."""
    shifted = logits if bias is None else logits + bias
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted, out=shifted)
    e /= e.sum(axis=1, keepdims=True)
    return e


def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Row softmax restricted to allowed columns.

    ``mask`` is a boolean matrix (or anything with an ``allowed`` attribute);
    ``None`` means every column is allowed. Disallowed entries are exactly 0
    and a row with no allowed column raises :class:`DegenerateRowError`.
    """
    _need_2d(logits, "masked_softmax")
    bias = None if mask is None else _mask_bias(mask, logits.shape)
    P = softmax_rows(logits.data, bias)

    def bwd(g):
        gp = g * P
        gp -= P * gp.sum(axis=1, keepdims=True)
        return (gp,)

    return _record(P, (logits,), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean_all(a: Tensor) -> Tensor:
    shape = a.shape
    n = a.data.size
    return _record(np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


def sum_squares(a: Tensor) -> Tensor:
    A = a.data
    return _record(np.array([np.dot(A.reshape(-1), A.reshape(-1))]), (a,), lambda g: (2.0 * g[0] * A,))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place.

    Parameters whose gradient is ``None`` are skipped (frozen); their moments
    are left untouched.
    """
    if state.step_count < 0:
        raise ValueError("negative step_count")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad dims {list(g.shape)} vs param {name} {list(p.shape)}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: moment dims disagree for {name}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


class Adam:
    """Adam over a name→Tensor map; only trainable tensors are updated."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        arrays = {}
        grads = {}
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            arrays[name] = p.data
            grads[name] = p.grad
        adam_step(arrays, grads, self.state)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
