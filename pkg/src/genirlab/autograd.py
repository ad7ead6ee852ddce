"""Minimal dense-tensor numerics with reverse-mode automatic differentiation.

Everything runs in 64-bit floats on top of numpy. A computation graph is
recorded eagerly whenever an input requires gradients (and grad mode is on),
and is freed again once `backward` has consumed it. The op set is exactly
what the retrieval models in this package need: matmul, elementwise
add/mul, row gather/scatter, softmax / log-softmax, relu, concat, slicing,
reshape/permute, reductions, and rsqrt for normalization layers.

Any op that produces a NaN/Inf raises `NumericError`; masking therefore uses
large finite negatives (see `MASK_VALUE`) instead of -inf.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

# Additive attention-mask value: large enough that exp() underflows to zero
# after max-subtraction, small enough to stay finite through sums.
MASK_VALUE = -1e30


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NumericError(ArithmeticError):
    """An op produced a non-finite value."""


class ContractError(ValueError):
    """An op was called outside its contract (non-scalar loss, bad index...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping.

    Tensors are treated as immutable once created; training code mutates
    only the `.data` of parameters between forward passes (optimizer steps).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _as_array(data)
        _check_finite(self.data, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    # -- graph plumbing --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: closures may hand out views or aliased buffers
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def relu(a) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    return _make(data, "relu", (a,), backward)


def rsqrt(a, eps: float = 0.0) -> Tensor:
    """(a + eps) ** -0.5, elementwise. `a + eps` must be strictly positive."""
    a = _wrap(a)
    base = a.data + eps
    if np.any(base <= 0.0):
        raise NumericError("rsqrt: non-positive input")
    data = base ** -0.5

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (-0.5) * base ** -1.5)

    return _make(data, "rsqrt", (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; batched when both operands share leading dims."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or (a.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul batch dims must match: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate_grad(a.data.swapaxes(-1, -2) @ g)

    return _make(data, "matmul", (a, b), backward)


# -- indexing ----------------------------------------------------------------


def take_rows(table, index) -> Tensor:
    """Gather along the first axis: out[i...] = table[index[i...]].

    Covers embedding lookup (2-d table, integer array index of any shape)
    and score gathers on 1-d vectors. Gradient scatter-adds.
    """
    table = _wrap(table)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take_rows: index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("take_rows: index out of range")
    data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table.accumulate_grad(acc)

    return _make(data, "take_rows", (table,), backward)


def scatter_add(base, flat_index, values) -> Tensor:
    """out = base with values[i] added at flat position flat_index[i].

    `flat_index` addresses `base` as if flattened row-major; `values` is 1-d.
    """
    base, values = _wrap(base), _wrap(values)
    idx = np.asarray(flat_index)
    if values.ndim != 1 or idx.shape != values.shape:
        raise DimensionError("scatter_add: values/index must be matching 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= base.data.size):
        raise ContractError("scatter_add: index out of range")
    data = base.data.copy()
    np.add.at(data.reshape(-1), idx, values.data)

    def backward(g):
        if base.requires_grad:
            base.accumulate_grad(g)
        if values.requires_grad:
            values.accumulate_grad(g.reshape(-1)[idx])

    return _make(data, "scatter_add", (base, values), backward)


def slice_(a, key) -> Tensor:
    """Basic slicing/int indexing; gradient is zero outside the slice."""
    a = _wrap(a)
    data = a.data[key]
    if isinstance(data, np.ndarray):
        data = data.copy()
    else:
        data = np.asarray(data, dtype=np.float64)

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            acc[key] = g
            a.accumulate_grad(acc)

    return _make(data, "slice", (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ContractError("concat: empty input list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(sl)])

    return _make(data, "concat", tuple(parts), backward)


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {a.shape} -> {shape}") from exc
    data = np.ascontiguousarray(data)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _make(data, "reshape", (a,), backward)


def permute(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _make(data, "permute", (a,), backward)


def transpose2d(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise DimensionError("transpose2d expects a matrix")
    return permute(a, (1, 0))


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=np.float64)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy())
        else:
            g_exp = g if keepdims else np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g_exp, a.shape).copy())

    return _make(data, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- normalized exponentials ---------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate_grad(data * (g - dot))

    return _make(data, "softmax", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - logsum
    probs = np.exp(data)

    def backward(g):
        if a.requires_grad:
            gsum = g.sum(axis=axis, keepdims=True)
            a.accumulate_grad(g - probs * gsum)

    return _make(data, "log_softmax", (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError("layer_norm gain/bias must match last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = (var + eps) ** -0.5
    normed = centered * inv
    data = normed * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, g.shape[-1]).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * normed).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            d_normed = g * gain.data
            m1 = d_normed.mean(axis=-1, keepdims=True)
            m2 = (d_normed * normed).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (d_normed - m1 - normed * m2))

    return _make(data, "layer_norm", (x, gain, bias), backward)


def cross_entropy_rows(logits, targets, weights) -> Tensor:
    """Weighted mean NLL over rows: sum_i w_i * (-log softmax(logits_i)[t_i]) / sum_i w_i.

    Fused softmax + gather; equivalent to log_softmax followed by target
    selection but with one pass in each direction.
    """
    logits = _wrap(logits)
    if logits.ndim != 2:
        raise DimensionError("cross_entropy_rows expects (N, V) logits")
    tgt = np.asarray(targets)
    w = np.asarray(weights, dtype=np.float64)
    n = logits.shape[0]
    if tgt.shape != (n,) or w.shape != (n,):
        raise DimensionError("targets/weights must be (N,)")
    w_total = w.sum()
    if w_total <= 0:
        raise ContractError("cross_entropy_rows: no weighted rows")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    rows = np.arange(n)
    nll = np.log(denom) - shifted[rows, tgt]
    data = np.asarray((nll * w).sum() / w_total)

    def backward(g):
        if logits.requires_grad:
            grad = exp / denom[:, None]
            grad[rows, tgt] -= 1.0
            grad *= (g * w / w_total)[:, None]
            logits.accumulate_grad(grad)

    return _make(data, "cross_entropy_rows", (logits,), backward)


# -- backward pass -------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; frees the graph afterwards.

    Gradients accumulate into every reachable tensor with requires_grad;
    leaf tensors (parameters) keep their `.grad`, interior nodes are freed.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # Iterative post-order over interior nodes (leaves have no closure to run).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._parents and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node is not loss:
            node.grad = None
        node._parents = ()
        node._backward = None
