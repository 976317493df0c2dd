"""Minimal reverse-mode differentiation over numpy arrays.

Every operation returns a new immutable :class:`Tensor` carrying a closure
that pushes the output adjoint back onto its inputs. Composite layers
(convolution, batch normalization) are built from these primitives, so their
adjoints follow by composition.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_PRECISIONS = {32: np.float32, 64: np.float64}
_dtype_override: list = []


def default_dtype():
    """Float dtype for new tensors (``DURALIGN_PRECISION`` env var, else 32-bit)."""
    if _dtype_override:
        return _dtype_override[-1]
    bits = os.environ.get("DURALIGN_PRECISION", "32").strip()
    try:
        return _PRECISIONS[int(bits)]
    except (ValueError, KeyError):
        raise ValueError(f"DURALIGN_PRECISION must be 32 or 64, got {bits!r}") from None


@contextmanager
def precision(bits: int):
    """Temporarily switch the default float precision (32 or 64)."""
    if bits not in _PRECISIONS:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _dtype_override.append(_PRECISIONS[bits])
    try:
        yield
    finally:
        _dtype_override.pop()


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "op", "_param")

    def __init__(self, data, _parents: tuple = (), op: str = "leaf", dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.op = op
        self._param = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype if dtype is not None else default_dtype())


def _node(data, parents, op, backward) -> Tensor:
    out = Tensor(data, parents, op)
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op}: non-finite input")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), "div", backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        x._accum(g * out_data)

    return _node(out_data, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(g / x.data)

    return _node(np.log(x.data), (x,), "log", backward)


def square(x: Tensor) -> Tensor:
    def backward(g):
        x._accum(2.0 * g * x.data)

    return _node(x.data * x.data, (x,), "square", backward)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def backward(g):
        x._accum(0.5 * g / out_data)

    return _node(out_data, (x,), "sqrt", backward)


def absolute(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    def backward(g):
        x._accum(g * np.sign(x.data))

    return _node(np.abs(x.data), (x,), "abs", backward)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        x._accum(g * s * (1.0 - s))

    return _node(s, (x,), "sigmoid", backward)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    out_data = x.data * s

    def backward(g):
        x._accum(g * (s + out_data * (1.0 - s)))

    return _node(out_data, (x,), "swish", backward)


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out_data = np.maximum(v, 0) + np.log1p(np.exp(-np.abs(v)))

    def backward(g):
        x._accum(g * _sigmoid(v))

    return _node(out_data, (x,), "softplus", backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if axis >= x.ndim or axis < -x.ndim:
        raise ValueError(f"softmax axis {axis} out of range for shape {x.shape}")
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), "softmax", backward)


# ---------------------------------------------------------------- reductions / shape

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / float(n))


def cumsum(x: Tensor, axis: int = 0) -> Tensor:
    def backward(g):
        x._accum(np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis))

    return _node(np.cumsum(x.data, axis=axis), (x,), "cumsum", backward)


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(g.reshape(x.shape))

    return _node(x.data.reshape(shape), (x,), "reshape", backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accum(np.transpose(g, inv))

    return _node(np.transpose(x.data, axes), (x,), "transpose", backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    def backward(g):
        x._accum(_unbroadcast(g, x.shape))

    return _node(np.broadcast_to(x.data, shape).copy(), (x,), "broadcast", backward)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    return reshape(x, np.expand_dims(x.data, axis).shape)


def getitem(x: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)

    return _node(x.data[idx], (x,), "getitem", backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % xs[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, bounds, axis=ax)):
            t._accum(piece)

    return _node(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), "concat", backward)


def pad_rows(x: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the leading axis."""
    widths = [(before, after)] + [(0, 0)] * (x.ndim - 1)
    n = x.shape[0]

    def backward(g):
        x._accum(g[before:before + n])

    return _node(np.pad(x.data, widths), (x,), "pad", backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dims")

    def backward(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; every input index must appear in the other operand or the output."""
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out), (sb, sa + out)):
        if any(c not in other for c in s):
            raise ValueError(f"einsum {subscripts!r}: index summed within one operand is unsupported")
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        a._accum(np.einsum(f"{out},{sb}->{sa}", g, b.data))
        b._accum(np.einsum(f"{out},{sa}->{sb}", g, a.data))

    return _node(np.einsum(subscripts, a.data, b.data), (a, b), "einsum", backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) over the last axis; x may have any number of leading axes."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[-1],))


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-length 1-D convolution along axis 0.

    x is (K, Din), kernel is (width, Din, Dout) with an odd width; the input is
    zero-padded by ``width // 2`` on each side.
    """
    width, din, dout = kernel.shape
    if width % 2 == 0:
        raise ValueError(f"conv1d kernel width must be odd, got {width}")
    if x.shape[-1] != din:
        raise ValueError(f"conv1d expects {din} input channels, got {x.shape[-1]}")
    half = width // 2
    n = x.shape[0]
    xp = pad_rows(x, half, half)
    cols = concat([xp[j:j + n] for j in range(width)], axis=1) if width > 1 else x
    y = matmul(cols, reshape(kernel, (width * din, dout)))
    if bias is not None:
        y = add(y, bias)
    return y


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel same-length convolution; kernel is (width, channels)."""
    width = kernel.shape[0]
    if width % 2 == 0:
        raise ValueError(f"depthwise kernel width must be odd, got {width}")
    half = width // 2
    n = x.shape[0]
    xp = pad_rows(x, half, half)
    out = None
    for j in range(width):
        term = mul(xp[j:j + n], kernel[j])
        out = term if out is None else add(out, term)
    return out


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running: dict | None,
    mode: str = "train",
    momentum: float = 0.99,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each feature over axis 0.

    ``running`` holds ``mean`` and ``var`` arrays updated in place during
    training (``new = momentum * old + (1 - momentum) * batch``); infer mode
    reads them and fails if they were never initialized.
    """
    if mode == "train":
        mu = mean(x, axis=0, keepdims=True)
        centered = sub(x, mu)
        var = mean(square(centered), axis=0, keepdims=True)
        normed = div(centered, sqrt(add(var, eps)))
        if running is not None:
            bm = mu.data.reshape(-1)
            bv = var.data.reshape(-1)
            if running.get("mean") is None:
                running["mean"] = bm.copy()
                running["var"] = bv.copy()
            else:
                running["mean"][...] = momentum * running["mean"] + (1.0 - momentum) * bm
                running["var"][...] = momentum * running["var"] + (1.0 - momentum) * bv
    elif mode == "infer":
        if running is None or running.get("mean") is None:
            raise RuntimeError("batch_norm: running statistics are uninitialized")
        rm = running["mean"].astype(x.dtype)
        rv = running["var"].astype(x.dtype)
        normed = mul(sub(x, rm), 1.0 / np.sqrt(rv + eps))
    else:
        raise ValueError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    return add(mul(normed, scale), shift)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    return tsum(absolute(sub(a, b)))


# ---------------------------------------------------------------- graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, sink: dict | None = None) -> None:
    """Propagate d(root)/d(node) to every node.

    Parameter leaves flush into their store's accumulator, or into ``sink``
    (keyed by ``id(Parameter)``) so callers can reduce several graphs in a
    fixed order.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._backward is not None:
            node._backward(node.grad)
        elif node._param is not None:
            if sink is None:
                node._param.grad += node.grad
            else:
                key = id(node._param)
                if key in sink:
                    sink[key] += node.grad
                else:
                    sink[key] = node.grad.copy()


# ---------------------------------------------------------------- parameters

@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray
    trainable: bool = True


@dataclass
class ParameterStore:
    """Named parameters with gradient accumulators and Adam moments.

    Non-trainable entries (batch-norm running statistics) ride along so a
    checkpoint captures the full model state.
    """

    entries: "OrderedDict[str, Parameter]" = field(default_factory=OrderedDict)

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.asarray(value)
        value = np.array(value, dtype=value.dtype if np.issubdtype(value.dtype, np.floating) else default_dtype())
        self.entries[name] = Parameter(value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value), trainable)
        return self.entries[name].value

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> Parameter:
        return self.entries[name]

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def trainable(self):
        return [(n, p) for n, p in self.entries.items() if p.trainable]

    def tensor(self, name: str) -> Tensor:
        entry = self.entries[name]
        t = Tensor(entry.value)
        t._param = entry
        return t

    def zero_grad(self):
        for p in self.entries.values():
            p.grad[...] = 0.0

    def astype(self, dtype) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.entries.items():
            out.add(name, p.value.astype(dtype), trainable=p.trainable)
        return out

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for name, p in self.entries.items():
            out.add(name, p.value.copy(), trainable=p.trainable)
        return out


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype or default_dtype())


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, store: ParameterStore, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for _, p in store.trainable():
            p.m[...] = self.beta1 * p.m + (1.0 - self.beta1) * p.grad
            p.v[...] = self.beta2 * p.v + (1.0 - self.beta2) * p.grad * p.grad
            p.value[...] -= (lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)).astype(p.value.dtype)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    checked: int
    size: int


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def failures(self):
        return [e for e in self.entries if not e.max_rel_err <= self.tolerance]

    @property
    def ok(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':40s} {'checked':>8s} {'max_rel_err':>12s}"]
        for e in self.entries:
            flag = "" if e.max_rel_err <= self.tolerance else "  FAIL"
            lines.append(f"{e.name:40s} {e.checked:>4d}/{e.size:<4d} {e.max_rel_err:12.3e}{flag}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 0.0) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, 1e-3 * max|n|, abs_floor).

    ``abs_floor`` keeps entries whose true gradient is zero (a bias feeding
    batch norm) from comparing finite-difference round-off against itself.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    floor = max(1e-3 * float(np.max(np.abs(numeric))), abs_floor, 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(
    loss_fn: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    seed: int = 0,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    max_elements: int | None = 24,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare backward() against central finite differences for each parameter.

    ``loss_fn`` must rebuild the graph from ``store`` on every call and be
    deterministic. Parameters with more than ``max_elements`` entries are
    probed at a seeded random subset of positions.
    """
    report = GradCheckReport(tolerance=tolerance)
    names = [n for n, _ in store.trainable()] if names is None else list(names)
    if not names:
        return report
    for n in names:
        if store[n].value.dtype != np.float64:
            raise TypeError("check_gradients requires 64-bit parameters")
    rng = np.random.default_rng(seed)
    store.zero_grad()
    root = loss_fn(store)
    backward(root)
    # gradients below this are indistinguishable from zero at this loss scale
    abs_floor = 1e-6 * max(1.0, abs(float(root.data)))
    for name in names:
        p = store[name]
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(idx.size)
        for n_i, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(store).data)
            flat[i] = orig - step
            down = float(loss_fn(store).data)
            flat[i] = orig
            numeric[n_i] = (up - down) / (2.0 * step)
        err = relative_error(analytic.reshape(-1)[idx], numeric, abs_floor)
        report.entries.append(GradCheckEntry(name, err, int(idx.size), int(flat.size)))
    store.zero_grad()
    return report
