"""Dense-tensor engine with reverse-mode automatic differentiation.

Row-major numpy storage, a tape recorded per forward pass (closure graph),
first-order gradients only.  Broadcasting is limited to scalars and
trailing-axis affine patterns; anything fancier raises.  All math that the
encoder/decoder stack needs lives here: elementwise ops, matmul, softmax
family, layer norm, depthwise convolution, attention, plus a
finite-difference gradient checker used throughout the test suite.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class DimensionError(ValueError):
    """Shapes do not line up for the requested operation."""


class ConfigError(ValueError):
    """Structurally invalid configuration (head counts, kernel sizes, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, optimizer steps)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """N-d array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss through the recorded tape."""
        if self.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        # Iterative topo sort: CTC recursions chain past Python's recursion limit.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()
        # Release the tape: closures hold their own outputs (a cycle), so
        # without this a big graph lingers until the gc runs.
        for node in topo:
            node._backward = None
            node._parents = ()

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g is self.data else g
        else:
            self.grad = self.grad + g

    # -- convenience arithmetic ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable (or frozen) leaf tensor with a hierarchical name."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.name = name
        self.frozen = frozen


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward = backward
    return out


def _wants_grad(*ts: Tensor) -> bool:
    return _grad_enabled and any(t.requires_grad for t in ts)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(-out.grad)

    return _record(out, (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes follow numpy matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if a.ndim > 2 and b.ndim == 2:
        return _matmul_stacked(a, b)
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _record(out, (a, b), backward)


def _matmul_stacked(a: Tensor, b: Tensor) -> Tensor:
    # [..., T, d] @ [d, k] as one flat GEMM: beats a stack of small ones.
    a_flat = a.data.reshape(-1, a.shape[-1])
    d_out = b.shape[-1]
    out = Tensor((a_flat @ b.data).reshape(a.shape[:-1] + (d_out,)),
                 requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad.reshape(-1, d_out)
        if a.requires_grad:
            a._accumulate((g @ b.data.T).reshape(a.shape))
        if b.requires_grad:
            b._accumulate(a_flat.T @ g)

    return _record(out, (a, b), backward)


# -- shape manipulation ----------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out
    orig = a.shape

    def backward():
        a._accumulate(out.grad.reshape(orig))

    return _record(out, (a,), backward)


def swapaxes(a: Tensor, ax0: int, ax1: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax0, ax1), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(np.swapaxes(out.grad, ax0, ax1))

    return _record(out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_grad_enabled and any(t.requires_grad for t in tensors))
    if not out.requires_grad:
        return out
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward():
        g = out.grad
        idx = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _record(out, tensors, backward)


def take(a: Tensor, key) -> Tensor:
    """Basic and integer-array indexing with scatter-add backward."""
    out = Tensor(a.data[key], requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        ga = np.zeros_like(a.data)
        np.add.at(ga, key, out.grad)
        a._accumulate(ga)

    return _record(out, (a,), backward)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(a.data, widths), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out
    n = a.shape[axis]

    def backward():
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(before, before + n)
        a._accumulate(out.grad[tuple(idx)])

    return _record(out, (a,), backward)


# -- reductions ------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return _record(out, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise nonlinearities ------------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * out.data)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad / a.data)

    return _record(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.data), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * 0.5 / out.data)

    return _record(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * out.data * (1.0 - out.data))

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * (1.0 - out.data * out.data))

    return _record(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * (a.data > 0))

    return _record(out, (a,), backward)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x), fused."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s, requires_grad=_wants_grad(a))
    if not out.requires_grad:
        return out

    def backward():
        a._accumulate(out.grad * (s + a.data * s * (1.0 - s)))

    return _record(out, (a,), backward)


def logaddexp(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    with np.errstate(invalid="ignore"):
        data = np.logaddexp(a.data, b.data)
    out = Tensor(data, requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        # exp(x - out) is the softmax weight; -inf vs -inf cells get weight 0.
        with np.errstate(invalid="ignore"):
            wa = np.where(np.isneginf(out.data), 0.0, np.exp(a.data - out.data))
            wb = np.where(np.isneginf(out.data), 0.0, np.exp(b.data - out.data))
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * wa, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * wb, b.shape))

    return _record(out, (a, b), backward)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask; gradients route to the taken branch."""
    cond = np.asarray(cond, dtype=bool)
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(np.where(cond, a.data, b.data), requires_grad=_wants_grad(a, b))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _record(out, (a, b), backward)


# -- softmax family ----------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along `axis`; outputs sum to one there."""
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, requires_grad=_wants_grad(x))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        y = out.data
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _record(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Computed directly in the log domain."""
    if x.shape[axis if axis >= 0 else x.ndim + axis] < 1:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse, requires_grad=_wants_grad(x))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        x._accumulate(g - np.exp(out.data) * g.sum(axis=axis, keepdims=True))

    return _record(out, (x,), backward)


# -- normalization ------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = Tensor(xhat * gain.data + bias.data, requires_grad=_wants_grad(x, gain, bias))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if x.requires_grad:
            dxhat = g * gain.data
            # Standard fused layer-norm backward over the last axis.
            dx = (ivar / d) * (d * dxhat
                               - dxhat.sum(axis=-1, keepdims=True)
                               - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)
        red = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=red))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=red))

    return _record(out, (x, gain, bias), backward)


# -- convolution ----------------------------------------------------------------------


def conv1d_depthwise(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Per-channel temporal convolution, x[..., T, d] with kernel [k, d]."""
    if padding != "same":
        raise ConfigError(f"unsupported padding mode {padding!r}")
    k, d = kernel.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd for same padding, got {k}")
    if x.shape[-1] != d:
        raise DimensionError(f"conv1d_depthwise channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    half = k // 2
    t = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (half, half)
    xpad = np.pad(x.data, widths)
    y = np.zeros_like(x.data)
    for j in range(k):
        y += xpad[..., j:j + t, :] * kernel.data[j]
    out = Tensor(y, requires_grad=_wants_grad(x, kernel))
    if not out.requires_grad:
        return out

    def backward():
        g = out.grad
        if x.requires_grad:
            gpad = np.zeros_like(xpad)
            for j in range(k):
                gpad[..., j:j + t, :] += g * kernel.data[j]
            x._accumulate(gpad[..., half:half + t, :])
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            red = tuple(range(g.ndim - 1))
            for j in range(k):
                gk[j] = (g * xpad[..., j:j + t, :]).sum(axis=red)
            kernel._accumulate(gk)

    return _record(out, (x, kernel), backward)


# -- modules --------------------------------------------------------------------------


class Module:
    """Minimal container: attributes holding Parameters or Modules are tracked."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, prefix + key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        value.name = path
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


class Linear(Module):
    """Affine map over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float64):
        bound = math.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6, dtype=np.float64):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head split and output projection.

    Accepts [T, d] or [B, T, d] inputs.  `mask` is a constant boolean array,
    broadcastable to [..., T_q, T_k], True where attention is allowed.  A row
    with every key masked out is rejected.
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by heads {heads}")
        self.d = d
        self.heads = heads
        self.wq = Linear(d, d, rng, dtype=dtype)
        self.wk = Linear(d, d, rng, dtype=dtype)
        self.wv = Linear(d, d, rng, dtype=dtype)
        self.wo = Linear(d, d, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        # [..., T, d] -> [..., h, T, e]
        shape = x.shape[:-1] + (self.heads, self.d // self.heads)
        return swapaxes(reshape(x, shape), -2, -3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor,
                mask: Optional[np.ndarray] = None) -> Tensor:
        if q.shape[-1] != self.d:
            raise DimensionError(f"attention expects feature dim {self.d}, got {q.shape}")
        e = self.d // self.heads
        qh = self._split(self.wq(q))
        kh = self._split(self.wk(k))
        vh = self._split(self.wv(v))
        scores = mul(matmul(qh, swapaxes(kh, -1, -2)), 1.0 / math.sqrt(e))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if not mask.any(axis=-1).all():
                raise DimensionError("attention mask has a fully-masked query row")
            scores = where(mask, scores, -np.inf)
        att = softmax(scores, axis=-1)
        ctx = matmul(att, vh)                       # [..., h, T, e]
        ctx = swapaxes(ctx, -2, -3)                 # [..., T, h, e]
        ctx = reshape(ctx, ctx.shape[:-2] + (self.d,))
        return self.wo(ctx)


# -- gradient checking -------------------------------------------------------------


class GradCheckReport:
    """Per-parameter max relative error between autodiff and central differences."""

    def __init__(self, eps: float, tol: float):
        self.eps = eps
        self.tol = tol
        self.per_param: dict[str, float] = {}

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def __repr__(self) -> str:
        worst = sorted(self.per_param.items(), key=lambda kv: -kv[1])[:5]
        lines = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        return f"GradCheckReport(max={self.max_rel_err:.3g}, tol={self.tol}, worst: {lines})"


def grad_check(f: Callable[[], Tensor], params: Iterable[Parameter],
               eps: float = 1e-5, tol: float = 1e-4,
               samples_per_param: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare autodiff gradients of the scalar f() against central differences.

    Per-element error is |ad - fd| / max(|ad|, |fd|, 1), i.e. relative for
    large gradients and absolute for near-zero ones.  Frozen parameters are
    excluded.  With `samples_per_param` set, only a random subset of elements
    per parameter is probed (for larger models).
    """
    params = [p for p in params if not p.frozen]
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    auto = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    report = GradCheckReport(eps, tol)
    rng = rng or np.random.default_rng(0)
    for idx, p in enumerate(params):
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            positions = np.arange(n)
        else:
            positions = rng.choice(n, size=samples_per_param, replace=False)
        fd = np.zeros(len(positions))
        with no_grad():
            for j, pos in enumerate(positions):
                orig = flat[pos]
                flat[pos] = orig + eps
                hi = f().item()
                flat[pos] = orig - eps
                lo = f().item()
                flat[pos] = orig
                fd[j] = (hi - lo) / (2.0 * eps)
        ad = auto[id(p)].reshape(-1)[positions]
        # Relative where gradients are O(1)+, absolute below: FD noise makes a
        # pure ratio meaningless for analytically-zero gradients.
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1.0)
        rel = float((np.abs(ad - fd) / denom).max(initial=0.0))
        report.per_param[p.name or f"param{idx}"] = rel
    return report
