"""Dense float64 tensors with a dynamic reverse-mode autodiff graph.

Every op records its inputs and a closure that maps the output gradient to
input gradients. ``backward`` walks the recorded graph once in reverse
topological order. Leading batch extents broadcast the numpy way; gradients
are summed back down to the operand shape.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an API precondition other than shape is violated."""


# Test hook: when non-zero, matmul's gradient w.r.t. its right operand is
# scaled by (1 + _FAULT). Used as a negative control for gradient checks.
_FAULT = 0.0


@contextlib.contextmanager
def injected_fault(scale: float = 1e-2):
    """Temporarily corrupt matmul backward so gradient checks must fail."""
    global _FAULT
    prev, _FAULT = _FAULT, scale
    try:
        yield
    finally:
        _FAULT = prev


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Build results without recording the graph (inference-only forwards)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = False
        if _GRAD_ENABLED:
            for p in parents:
                if p.requires_grad:
                    needs = True
                    break
        out.requires_grad = needs
        if needs:
            out._parents, out._backward = parents, backward
        else:
            out._parents, out._backward = (), None
        return out

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False) -> Tensor:
        # wrap the fresh buffer directly; copying it would touch every page
        out = cls._from_op(np.zeros(shape), (), None, "leaf")
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis: int | None = None) -> Tensor:
        return sum_all(self) if axis is None else sum_axis(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return mean_all(self) if axis is None else mean_axis(self, axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose2d(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa != sb:
        _broadcast_shape(a, b, "add")
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa != sb:
        _broadcast_shape(a, b, "sub")
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if need_a else None,
            _unbroadcast(g * ad, bd.shape) if need_b else None,
        )

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    # relu'(0) is taken as 0
    mask = a.data > 0
    return Tensor._from_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu."""
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu}
    if op not in table:
        raise ContractError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    sa, sb = ad.shape, bd.shape
    if len(sa) < 2 or len(sb) < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: inner extents differ, {sa} @ {sb}")
    if sa[:-2] != sb[:-2]:
        try:
            np.broadcast_shapes(sa[:-2], sb[:-2])
        except ValueError:
            raise DimensionError(f"matmul: batch extents differ, {sa} @ {sb}") from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = gb = None
        if need_a:
            ga = g @ bd.swapaxes(-1, -2)
            if ga.shape != sa:
                ga = _unbroadcast(ga, sa)
        if need_b:
            gb = ad.swapaxes(-1, -2) @ g
            if gb.shape != sb:
                gb = _unbroadcast(gb, sb)
            if _FAULT:
                gb = gb * (1.0 + _FAULT)
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), backward, "matmul")


# -- normalization / softmax -----------------------------------------------
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis with population variance, then affine."""
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm: last extent must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"layer_norm: gamma/beta {gamma.shape}/{beta.shape} vs last extent {c}")
    if eps < 0:
        raise ContractError("layer_norm: eps must be non-negative")
    # Row reductions go through matrix-vector products, which beat
    # small-axis ufunc reductions by a wide margin on short rows.
    shape = x.shape
    w = np.full(c, 1.0 / c)
    x2 = x.data.reshape(-1, c)
    xc = x2 - (x2 @ w)[:, None]
    inv = (1.0 / np.sqrt((xc * xc) @ w + eps))[:, None]
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd
    out += beta.data

    def backward(g):
        g2 = g.reshape(-1, c)
        dxhat = g2 * gd
        dx = dxhat - (dxhat @ w)[:, None]
        dx -= xhat * ((dxhat * xhat) @ w)[:, None]
        dx *= inv
        ones = np.ones(g2.shape[0])
        return dx.reshape(shape), ones @ (g2 * xhat), ones @ g2

    return Tensor._from_op(out.reshape(shape), (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


# -- reductions -------------------------------------------------------------
def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def sum_axis(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    shape = x.shape
    return Tensor._from_op(
        x.data.sum(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
        "sum_axis",
    )


def mean_axis(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    shape, n = x.shape, x.shape[axis]
    return Tensor._from_op(
        x.data.mean(axis=axis),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),),
        "mean_axis",
    )


def reduce(op: str, x: Tensor, axis: int) -> Tensor:
    if op == "sum_axis":
        return sum_axis(x, axis)
    if op == "mean_axis":
        return mean_axis(x, axis)
    raise ContractError(f"unknown reduction {op!r}")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(
        np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum"
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._from_op(
        np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean"
    )


# -- shape ops --------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    try:
        out = x.data.reshape(shape)
        # leaves are mutated in place by optimizers; never alias them
        if x.op == "leaf":
            out = out.copy()
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.size,))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def transpose2d(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise DimensionError(f"transpose2d needs rank >= 2, got {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    ref = tensors[0]
    axis = _check_axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def take(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradient scatters back with accumulation."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._from_op(np.array(x.data[index]), (x,), backward, "take")


# -- losses -----------------------------------------------------------------
def mse_loss(pred: Tensor, target) -> Tensor:
    diff = sub(pred, as_tensor(target))
    return mean_all(mul(diff, diff))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over rows of a [batch, classes] tensor."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return Tensor._from_op(np.array(loss), (logits,), backward, "cross_entropy")


# -- graph traversal --------------------------------------------------------
def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, inputs before outputs, each exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# -- gradient checking ------------------------------------------------------
@dataclass
class ParamCheck:
    name: str
    max_rel_error: float
    max_abs_error: float


@dataclass
class CheckReport:
    rows: list[ParamCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    @property
    def worst(self) -> ParamCheck | None:
        return max(self.rows, key=lambda r: r.max_rel_error, default=None)

    def format(self) -> str:
        lines = [f"{r.name:<40s} rel={r.max_rel_error:.3e} abs={r.max_abs_error:.3e}" for r in self.rows]
        lines.append(f"{'PASS' if self.passed else 'FAIL'} max_rel={self.max_rel_error:.3e}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[tuple[str, Tensor]] | Iterable[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> CheckReport:
    """Compare backward() gradients of ``f()`` against central differences.

    The error for a parameter is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    with both maxima taken over the parameter's entries. ``max_entries``
    subsamples large parameters (entries chosen with a seeded RNG).
    """
    named = [(p if isinstance(p, tuple) else (f"param{i}", p)) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    loss = f()
    backward(loss)
    rng = np.random.default_rng(seed)
    report = CheckReport(tolerance=tolerance)
    for name, p in named:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[idx]
        abs_err = float(np.max(np.abs(a - numeric))) if idx.size else 0.0
        denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
        rel = abs_err / denom if denom > 0 else 0.0
        report.rows.append(ParamCheck(name, rel, abs_err))
    for _, p in named:
        p.grad = None
    return report
