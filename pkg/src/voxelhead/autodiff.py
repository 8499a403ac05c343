"""Minimal reverse-mode autodiff over dense numpy tensors.

Provides exactly the operation set the head model and renderer need:
dense elementwise math, affine layers, 2D (transposed) convolutions,
concatenation/slicing/reshaping, reductions, the Gaussian
reparameterization trick, and an Adam optimizer. Everything runs on
numpy arrays; float32 is the working precision and float64 is used for
gradient checking.

Tensors are immutable after construction. Operations executed while any
input has ``requires_grad`` record themselves on the implicit graph
(each output keeps references to its parents and a backward closure);
``backward`` walks that graph once in reverse topological order and
accumulates gradients into the leaves. A ``detach`` edge propagates
exactly zero gradient.
"""

from __future__ import annotations

import logging
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operation inputs have incompatible shapes."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (inference fast path)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense real-valued tensor with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_opname")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._opname = "leaf"

    # -- basic introspection -------------------------------------------------

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
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self._opname})"

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self.dtype))

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def detach(self):
        return detach(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, opname: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
        out._opname = opname
    else:
        out._parents = ()
        out._backward = None
        out._opname = opname
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- graph ---------------------------------------------------------------------


class Graph:
    """Reverse topological view of the computation reaching a tensor.

    ``nodes`` is ordered so every node's parents precede it; ``leaves``
    are the requires-grad tensors with no recorded parents.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._backward is None:
                if node.requires_grad:
                    self.leaves.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``loss`` must be scalar unless an explicit upstream ``grad`` is given.
    Gradients accumulate across calls until ``zero_grad``.
    """
    if grad is None:
        if loss.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    graph = Graph(loss)
    adjoint: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.dtype != parent.dtype:
                pg = pg.astype(parent.dtype)
            if parent._backward is None:
                # leaf: accumulate into the persistent grad slot
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype)
                else:
                    parent.grad = parent.grad + pg
            else:
                acc = adjoint.get(id(parent))
                # fresh allocation on the second contribution: pg may be a
                # view into another node's adjoint, never mutate in place
                adjoint[id(parent)] = pg if acc is None else acc + pg


# -- elementwise ops -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    data = a.data**e

    def bw(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(data, (a,), bw, "pow")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def bw(g):
        return (g * (0.5 / data),)

    return _make(data, (a,), bw, "sqrt")


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bw(g):
        return (g * data,)

    return _make(data, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bw(g):
        return (g / a.data,)

    return _make(data, (a,), bw, "log")


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)

    def bw(g):
        return (g * np.sign(a.data),)

    return _make(data, (a,), bw, "abs")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # left subgradient at 0: treat x == 0 as the negative branch
    mask = a.data > 0
    data = np.where(mask, a.data, a.data * slope)

    def bw(g):
        return (np.where(mask, g, g * slope),)

    return _make(data.astype(a.dtype), (a,), bw, "leaky_relu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30)))).astype(a.dtype)

    def bw(g):
        return (g / (1.0 + np.exp(-x)),)

    return _make(data, (a,), bw, "softplus")


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), bw, "tanh")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * mask,)

    return _make(data, (a,), bw, "clamp")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    mask = a.data >= b.data  # ties route to the first argument
    data = np.where(mask, a.data, b.data)

    def bw(g):
        return _unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)

    return _make(data, (a, b), bw, "maximum")


# -- structure ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    data = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bw, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        return (g.transpose(inv),)

    return _make(data, (a,), bw, "transpose")


def slice_(a: Tensor, idx) -> Tensor:
    data = a.data[idx]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data, dtype=a.dtype)

    def bw(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(data, (a,), bw, "slice")


def gather(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Take rows along ``axis`` by a fixed integer index array."""
    indices = np.asarray(indices)
    data = np.take(a.data, indices, axis=axis)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, _axis_index(indices, axis, a.ndim), g)
        return (out,)

    return _make(data, (a,), bw, "gather")


def _axis_index(indices, axis, ndim):
    idx = [slice(None)] * ndim
    idx[axis] = indices
    return tuple(idx)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(data, tensors, bw, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW feature maps along the channel axis."""
    shapes = {t.shape[2:] for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"concat_channels: spatial sizes differ: {sorted(shapes)}")
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ------------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data, dtype=a.dtype)

    def bw(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).astype(a.dtype),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(x % a.ndim for x in ax)
        if not keepdims:
            for x in sorted(ax):
                g = np.expand_dims(g, x)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(data, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[x % a.ndim] for x in ax]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports batched operands via numpy semantics."""
    data = a.data @ b.data

    def bw(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if b.ndim == 1:
            ga = np.einsum("...i,j->...ij", g, b.data)
            gb = np.einsum("...ij,...i->j", a.data, g)
            return _unbroadcast(ga, a.shape), gb.astype(b.dtype)
        if a.ndim == 1:
            ga = np.einsum("...n,...kn->k", g, b.data).astype(a.dtype)
            gb = np.einsum("k,...n->...kn", a.data, g)
            return ga, _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), bw, "matmul")


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight^T + bias, with x of shape (..., in) and weight (out, in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"affine: input last dim {x.shape[-1]} != weight in-dim {weight.shape[1]}"
        )
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


# -- convolutions -----------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2D convolution, x: (B, Cin, H, W), weight: (Cout, Cin, kh, kw).

    im2col + one BLAS matmul; the column matrix is kept for the backward
    weight product.
    """
    B, Cin, H, W = x.shape
    Cout, Cin_w, kh, kw = weight.shape
    if Cin != Cin_w:
        raise ShapeError(f"conv2d: input channels {Cin} != weight channels {Cin_w}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {H}x{W} (pad={pad})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, Cin, Ho, Wo, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B * Ho * Wo, Cin * kh * kw)
    wmat = weight.data.reshape(Cout, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, Cout)
        gw = (gflat.T @ cols).reshape(weight.shape)
        gcols = (gflat @ wmat).reshape(B, Ho, Wo, Cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def transposed_conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 2, pad: int = 0
) -> Tensor:
    """Transposed 2D convolution, x: (B, Cin, H, W), weight: (Cin, Cout, kh, kw).

    Output spatial size: (H - 1) * stride + kh - 2 * pad. One BLAS
    matmul plus a k^2 overlap-add scatter.
    """
    B, Cin, H, W = x.shape
    Cin_w, Cout, kh, kw = weight.shape
    if Cin != Cin_w:
        raise ShapeError(f"transposed_conv2d: input channels {Cin} != weight channels {Cin_w}")
    Hf = (H - 1) * stride + kh
    Wf = (W - 1) * stride + kw
    Ho, Wo = Hf - 2 * pad, Wf - 2 * pad
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"transposed_conv2d: output collapses for input {H}x{W}, pad={pad}")
    xflat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(B * H * W, Cin)
    wmat = weight.data.reshape(Cin, -1)
    y = (xflat @ wmat).reshape(B, H, W, Cout, kh, kw)
    full = np.zeros((B, Cout, Hf, Wf), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + stride * H : stride, j : j + stride * W : stride] += (
                y[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    out = full[:, :, pad : pad + Ho, pad : pad + Wo] if pad else full
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    out = np.ascontiguousarray(out)

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        gf = np.zeros((B, Cout, Hf, Wf), dtype=g.dtype)
        gf[:, :, pad : pad + Ho, pad : pad + Wo] = g
        gy = np.empty((B, H, W, Cout, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gy[:, :, :, :, i, j] = gf[
                    :, :, i : i + stride * H : stride, j : j + stride * W : stride
                ].transpose(0, 2, 3, 1)
        gyflat = gy.reshape(B * H * W, -1)
        gx = (gyflat @ wmat.T).reshape(B, H, W, Cin).transpose(0, 3, 1, 2)
        gw = (xflat.T @ gyflat).reshape(weight.shape)
        grads = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, bw, "transposed_conv2d")


# -- graph-semantics ops -----------------------------------------------------------


def detach(a: Tensor) -> Tensor:
    """Identical values; the backward pass propagates exactly zero through here."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out._opname = "detach"
    return out


def reparameterize(mu: Tensor, log_var: Tensor, noise: Tensor) -> Tensor:
    """mu + exp(0.5 * log_var) * noise; gradients reach mu and log_var only."""
    if mu.shape != log_var.shape or mu.shape != noise.shape:
        raise ShapeError(
            f"reparameterize: shapes differ mu={mu.shape} log_var={log_var.shape} noise={noise.shape}"
        )
    return add(mu, mul(exp(mul(log_var, _as_tensor(0.5, mu.dtype))), detach(noise)))


def kld_gaussian(mu: Tensor, log_var: Tensor) -> Tensor:
    """KL(N(mu, exp(log_var)) || N(0, I)), averaged over the batch axis.

    1D inputs are treated as a single sample.
    """
    if mu.shape != log_var.shape:
        raise ShapeError(f"kld_gaussian: shapes differ {mu.shape} vs {log_var.shape}")
    per_elem = add(sub(add(mul(mu, mu), exp(log_var)), log_var), _as_tensor(-1.0, mu.dtype))
    total = mul(sum_(per_elem), _as_tensor(0.5, mu.dtype))
    batch = mu.shape[0] if mu.ndim > 1 else 1
    return mul(total, _as_tensor(1.0 / batch, mu.dtype))


# -- the generic dispatcher (the registered forward-op surface) ---------------------

_OP_TABLE = {
    "affine": lambda inputs, attrs: affine(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(
        inputs[0], inputs[1], inputs[2] if len(inputs) > 2 else None,
        stride=attrs.get("stride", 1), pad=attrs.get("pad", 0)),
    "transposed_conv2d": lambda inputs, attrs: transposed_conv2d(
        inputs[0], inputs[1], inputs[2] if len(inputs) > 2 else None,
        stride=attrs.get("stride", 2), pad=attrs.get("pad", 0)),
    "leaky_relu": lambda inputs, attrs: leaky_relu(inputs[0], attrs.get("slope", 0.2)),
    "concat_channels": lambda inputs, attrs: concat_channels(inputs),
    "elementwise_add": lambda inputs, attrs: add(*inputs),
    "elementwise_mul": lambda inputs, attrs: mul(*inputs),
    "slice": lambda inputs, attrs: slice_(inputs[0], attrs["index"]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "softplus": lambda inputs, attrs: softplus(inputs[0]),
    "sum": lambda inputs, attrs: sum_(
        inputs[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
}


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch one recorded operation by name. See _OP_TABLE for the kinds."""
    if kind not in _OP_TABLE:
        raise ValueError(f"unknown op kind: {kind!r}")
    return _OP_TABLE[kind](list(inputs), attrs or {})


# -- custom ops ---------------------------------------------------------------------


def custom_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    name: str = "custom",
) -> Tensor:
    """Wrap an externally computed forward result (e.g. the ray-march kernel)."""
    return _make(np.asarray(data), tuple(parents), backward_fn, name)


# -- parameters & optimizer -----------------------------------------------------------


class AdamState:
    """Per-tensor first/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    lr_overrides: dict[str, float] | None = None,
) -> None:
    """One Adam update over ``params`` using their accumulated ``.grad``.

    Tensors with a non-finite gradient are skipped for this step (logged).
    Gradients are consumed (reset to None).
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            log.warning("adam_step: non-finite gradient for %r, step skipped", name)
            p.grad = None
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_lr = lr_overrides.get(name, lr) if lr_overrides else lr
        p.data = p.data - (step_lr * (m / bias1) / (np.sqrt(v / bias2) + eps)).astype(p.dtype)
        p.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking ----------------------------------------------------------------


def finite_difference_check(
    fn: Callable[[], Tensor],
    probes: list[tuple[Tensor, tuple]],
    h: float = 1e-4,
    rel_tol: float = 1e-3,
) -> tuple[int, int, list]:
    """Compare analytic gradients against central finite differences.

    ``fn`` rebuilds the scalar loss from the probed tensors' current data
    (double precision expected). Returns (passed, total, failures).
    """
    loss = fn()
    for p, _ in probes:
        p.zero_grad()
    backward(loss)
    analytic = []
    for p, idx in probes:
        g = p.grad[idx] if p.grad is not None else 0.0
        analytic.append(float(g))
    passed = 0
    failures = []
    for (p, idx), ga in zip(probes, analytic):
        orig = p.data[idx]
        p.data[idx] = orig + h
        lp = fn().item()
        p.data[idx] = orig - h
        lm = fn().item()
        p.data[idx] = orig
        gn = (lp - lm) / (2 * h)
        denom = max(abs(ga), abs(gn), 1e-6)
        rel = abs(ga - gn) / denom
        if rel <= rel_tol:
            passed += 1
        else:
            failures.append((idx, ga, gn, rel))
    return passed, len(probes), failures
