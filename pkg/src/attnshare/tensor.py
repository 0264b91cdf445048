"""Dense float tensors with matrix-level reverse-mode automatic differentiation.

Operations are recorded at matrix granularity (matmul, pointwise maps, masked
row softmax, ...) onto an explicit Tape; gradients are replayed in reverse
execution order, which is a valid topological order by construction. Tensors
are float64 by default; float32 is accepted for inference/bench paths. Every
operation validates that its output is finite: overflow raises instead of
propagating inf/NaN.

A tape is confined to the thread that opened it. Independent tapes in
different threads do not share state.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericDomainError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_tls = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    """One executed operation: output, inputs, and the adjoint rule."""

    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...],
                 backward: Callable[[np.ndarray], tuple]):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed operations, replayable for adjoints.

    Execution order is a topological order (inputs always exist before the
    op that consumes them), so `backward` walks the record once, in reverse.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - structural bug guard
            raise ContractError("tape stack corrupted: unbalanced enter/exit")

    def record(self, node: _Node) -> None:
        self._nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        """Populate `.grad` of every requires_grad leaf reachable from `loss`.

        Grades accumulate (+=) across repeated backward calls, so per-item
        losses of a batch can be replayed one by one.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        pending: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self._nodes):
            got = pending.pop(id(node.out), None)
            if got is None:
                continue  # not on a path to the loss
            _, out_grad = got
            for parent, grad in zip(node.parents, node.backward(out_grad)):
                if grad is None or not parent.requires_grad:
                    continue
                prev = pending.get(id(parent))
                if prev is None:
                    pending[id(parent)] = (parent, grad)
                else:
                    pending[id(parent)] = (parent, prev[1] + grad)
        for tensor, grad in pending.values():
            if tensor.requires_grad:
                tensor.grad = grad if tensor.grad is None else tensor.grad + grad


class Tensor:
    """A dense real array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        _check_finite(self.data, "tensor construction")

    # -- shape and value introspection ------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor_like(other, self))

    def __radd__(self, other):
        return add(_as_tensor_like(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor_like(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise ShapeError("tensor/tensor division is not a recorded operation")

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def silu(self):
        return silu(self)


def _as_tensor_like(value, ref: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=ref.dtype))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericDomainError(f"{op} produced a non-finite value")


def _make_op(out_data: np.ndarray, parents: tuple[Tensor, ...],
             backward: Callable[[np.ndarray], tuple], op: str) -> Tensor:
    _check_finite(out_data, op)
    tape = active_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs_grad
    out.grad = None
    if needs_grad:
        tape.record(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# pointwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_op(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_op(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_op(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * c

    def backward(g):
        return (g * c,)

    return _make_op(out, (a,), backward, "scale")


def relu(a: Tensor) -> Tensor:
    """max(x, 0); the subgradient at 0 is taken as 0."""
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0),)

    return _make_op(out, (a,), backward, "relu")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x) with the exact derivative."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _make_op(out, (a,), backward, "silu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            out = np.exp(a.data)
        except FloatingPointError as e:
            raise NumericDomainError("exp overflow") from e

    def backward(g):
        return (g * out,)

    return _make_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericDomainError("log requires strictly positive input")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make_op(out, (a,), backward, "log")


def rsqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericDomainError("rsqrt requires strictly positive input")
    out = 1.0 / np.sqrt(a.data)

    def backward(g):
        return (g * (-0.5) * out / a.data,)

    return _make_op(out, (a,), backward, "rsqrt")


def huber_elem(a: Tensor, b: Tensor, delta: float) -> Tensor:
    """Elementwise Huber penalty of (a - b): quadratic inside |diff| <= delta,
    linear outside; the derivative is continuous across the seam."""
    if a.shape != b.shape:
        raise ShapeError(f"huber operands differ in shape: {a.shape} vs {b.shape}")
    if delta <= 0:
        raise ContractError("huber delta must be positive")
    diff = a.data - b.data
    absd = np.abs(diff)
    inside = absd <= delta
    out = np.where(inside, 0.5 * diff * diff, delta * (absd - 0.5 * delta))

    def backward(g):
        d = np.where(inside, diff, delta * np.sign(diff))
        return g * d, -(g * d)

    return _make_op(out, (a, b), backward, "huber")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacks of matrices broadcast over leading axes.

    Accumulation order is delegated to the BLAS backing numpy, which is
    deterministic for a fixed build and thread count.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make_op(out, (a, b), backward, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make_op(out, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [t.data for t in tensors]
    out = np.concatenate(parts, axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make_op(out, tuple(tensors), backward, "concat")


def repeat(a: Tensor, times: int, axis: int = 0) -> Tensor:
    """Tile each slice along `axis` `times` times consecutively (GQA head fan-out)."""
    out = np.repeat(a.data, times, axis=axis)

    def backward(g):
        shape = list(a.shape)
        shape[axis:axis + 1] = [shape[axis], times]
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make_op(out, (a,), backward, "repeat")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_op(out, (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row gather (embedding lookup); adjoint scatter-adds into the table."""
    idx = np.asarray(indices)
    out = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make_op(out, (table,), backward, "take_rows")


# ---------------------------------------------------------------------------
# attention-specific primitives
# ---------------------------------------------------------------------------

def row_softmax_masked(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to mask-true positions.

    Masked entries are exactly 0 in the output ("exclude then normalize"),
    and each row is stabilized by subtracting its max over the valid prefix.
    """
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not m.any(axis=-1).all():
        raise ContractError("softmax row with no unmasked entries")
    shifted = np.where(m, x.data, -np.inf)
    rowmax = shifted.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(np.where(m, x.data - rowmax, 0.0)), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    p = e / denom

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _make_op(p, (x,), backward, "row_softmax_masked")


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive coordinate pairs of the last axis by given angles.

    cos/sin have shape broadcastable to x[..., ::2]; the rotation is an
    isometry of each pair, so the adjoint is the inverse rotation of the
    output gradient.
    """
    if x.shape[-1] % 2 != 0:
        raise ShapeError("rotate_pairs needs an even last dimension")
    xe = x.data[..., 0::2]
    xo = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make_op(out, (x,), backward, "rotate_pairs")


def mask_fill_zero(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero out entries where mask is False; gradient is blocked there too."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(m, x.data, 0.0)

    def backward(g):
        return (np.where(m, g, 0.0),)

    return _make_op(out, (x,), backward, "mask_fill_zero")


def cross_entropy_next_token(logits: Tensor, tokens: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of each token given its prefix.

    logits has one row per position; row t scores the token at t+1. The last
    position has no successor and is excluded. Log-softmax is stabilized by
    row-max subtraction.
    """
    ids = np.asarray(tokens)
    if logits.ndim != 2 or ids.ndim != 1 or logits.shape[0] != ids.shape[0]:
        raise ShapeError(
            f"expected [l, vocab] logits with l tokens, got {logits.shape} and {ids.shape}")
    if ids.shape[0] < 2:
        raise ContractError("need at least 2 tokens for a next-token loss")
    z = logits.data[:-1]
    targets = ids[1:]
    n = z.shape[0]
    rowmax = z.max(axis=-1, keepdims=True)
    zs = z - rowmax
    lse = np.log(np.exp(zs).sum(axis=-1)) + rowmax[:, 0]
    picked = z[np.arange(n), targets]
    loss = np.asarray((lse - picked).mean())

    def backward(g):
        soft = np.exp(zs)
        soft /= soft.sum(axis=-1, keepdims=True)
        soft[np.arange(n), targets] -= 1.0
        gl = np.zeros_like(logits.data)
        gl[:-1] = soft * (float(g) / n)
        return (gl,)

    return _make_op(loss, (logits,), backward, "cross_entropy_next_token")


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               eps: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between taped adjoints and central differences.

    `f` must be deterministic (it is evaluated twice to verify this) and is
    re-evaluated with single coordinates of each param perturbed by +-eps.
    The relative error denominator is |central difference| + 1e-12.
    """
    if eps <= 0:
        raise ContractError("grad_check eps must be positive")
    params = list(params)

    first = float(f().item())
    if float(f().item()) != first:
        raise ContractError("grad_check requires a deterministic function")

    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    tape.backward(out)

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        if max_coords is not None and p.size > max_coords:
            coords = rng.choice(p.size, size=max_coords, replace=False)
        else:
            coords = range(p.size)
        for i in coords:
            idx = np.unravel_index(i, p.data.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = float(f().item())
            p.data[idx] = orig - eps
            f_minus = float(f().item())
            p.data[idx] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(analytic[i] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
