"""Minimal reverse-mode autodiff over dense numpy arrays, plus Adam.

Graphs are recorded define-by-run: every kernel called on a :class:`Tensor`
that requires a gradient returns a new node holding its parents and a
closure that pushes the output gradient back. Kernels preserve the dtype of
their inputs, so the same code runs as a float32 production path or as a
float64 shadow path for finite-difference checks.
"""

from __future__ import annotations

import contextlib
import itertools
import logging
import warnings
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

COS_EPS = 1e-8
DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Suspend graph recording; kernels return plain constant nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class GraphError(ValueError):
    """Raised for shape violations or non-finite values inside a graph."""

    def __init__(self, message: str, node: "Tensor | None" = None):
        if node is not None:
            message = f"node #{node.id} ({node.op}): {message}"
        super().__init__(message)
        self.node = node


class Tensor:
    """A node in the computation graph.

    ``data`` is the cached forward value; ``grad`` is filled in by
    :meth:`backward` for every node that requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 op: str = "leaf", parents: tuple = (), dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backprop(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    node = Tensor(out, requires_grad=needs, op=op, parents=tuple(parents) if needs else ())
    if not np.all(np.isfinite(node.data)):
        raise GraphError("non-finite value in output", node)
    if needs:
        node._backward = backward
    return node


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    g = g.astype(t.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.id not in seen:
                stack.append((p, False))
    return order


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every upstream node."""
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}", loss)
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node.parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{op}: incompatible shapes {a.shape} and {b.shape}", a) from None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)
    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, -g)
    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)
    return _make(a.data * b.data, "mul", (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1 - y * y))
    return _make(y, "tanh", (x,), bw)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise GraphError("log of non-positive value", x)

    def bw(g):
        _accumulate(x, g / x.data)
    return _make(np.log(x.data), "log", (x,), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    def bw(g):
        _accumulate(x, g * exponent * np.power(x.data, exponent - 1))
    return _make(np.power(x.data, exponent), "pow", (x,), bw)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accumulate(x, g * inside)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), bw)


def maximum(x: Tensor, floor) -> Tensor:
    """Elementwise max(x, floor) where ``floor`` is a constant (no gradient)."""
    floor = np.asarray(floor.data if isinstance(floor, Tensor) else floor, dtype=x.dtype)
    _check_broadcast(x, Tensor(floor), "maximum")
    passes = x.data > floor

    def bw(g):
        _accumulate(x, g * passes)
    return _make(np.maximum(x.data, floor), "maximum", (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return _make(y, "softmax", (x,), bw)


# ----------------------------------------------------------------------------
# reductions and structure
# ----------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))
    return _make(np.asarray(out, dtype=x.dtype), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise GraphError(f"cannot reshape {x.shape} to {shape}", x) from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))
    return _make(out, "reshape", (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)

    def bw(g):
        _accumulate(x, np.transpose(g, inverse))
    return _make(np.ascontiguousarray(np.transpose(x.data, axes)), "transpose", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise GraphError(f"concat: {exc}", xs[0]) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accumulate(x, np.take(g, np.arange(lo, hi), axis=axis))
    return _make(out, "concat", xs, bw)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (indices may repeat)."""
    index = np.asarray(index, dtype=np.intp)
    unique = np.unique(index).size == index.size

    def bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        moved = np.moveaxis(full, axis, 0)
        if unique:
            moved[index] = np.moveaxis(g, axis, 0)
        else:
            np.add.at(moved, index, np.moveaxis(g, axis, 0))
        _accumulate(x, full)
    return _make(np.take(x.data, index, axis=axis), "take", (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: shapes {a.shape} @ {b.shape}", a)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)
    return _make(a.data @ b.data, "matmul", (a, b), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = COS_EPS) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    clamped = np.maximum(norm, eps)
    y = x.data / clamped
    active = norm > eps

    def bw(g):
        radial = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - np.where(active, y * radial, 0)) / clamped)
    return _make(y, "l2_normalize", (x,), bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine similarity along ``axis`` with the norm guard max(||.||, 1e-8)."""
    a, b = _pair(a, b)
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)


def pairwise_cosine(a, b) -> Tensor:
    """(N, C) x (M, C) -> (N, M) matrix of cosine similarities."""
    a, b = _pair(a, b)
    return matmul(l2_normalize(a, 1), transpose(l2_normalize(b, 1), (1, 0)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ----------------------------------------------------------------------------
# convolution and resampling
# ----------------------------------------------------------------------------

def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same-style' convolution on (N, C, H, W) input.

    Kernels are square with odd size k and padding (k - 1) // 2.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise GraphError(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}", x)
    n, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise GraphError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}", x)
    if stride not in (1, 2):
        raise GraphError(f"conv2d: unsupported stride {stride}", x)
    pad = (k - 1) // 2
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    offsets = [(i, j) for i in range(k) for j in range(k)]
    # cols: (N, C, k*k, Ho*Wo) -> (N, C*k*k, Ho*Wo), ordered to match weight.reshape(O, C*k*k)
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for idx, (i, j) in enumerate(offsets):
        cols[:, :, idx] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = weight.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (o,):
            raise GraphError(f"conv2d: bias shape {bias.shape} != ({o},)", bias)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            gw = np.einsum("nop,nqp->oq", gm, cols, optimize=True)
            _accumulate(weight, gw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm).reshape(n, c, k * k, ho, wo)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for idx, (i, j) in enumerate(offsets):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, idx]
            _accumulate(x, gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp)
    return _make(out.astype(x.dtype, copy=False), "conv2d", parents, bw)


def bilinear_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, align_corners=False (half-pixel centres)."""
    if n_out < n_in:
        raise ValueError(f"bilinear upsample cannot downscale ({n_in} -> {n_out})")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Upsample the trailing two axes of ``x`` to ``size``."""
    h, w = x.shape[-2:]
    th, tw = size
    if th < h or tw < w:
        raise GraphError(f"bilinear_upsample cannot downscale {(h, w)} -> {(th, tw)}", x)
    if (th, tw) == (h, w):
        return _make(x.data.copy(), "upsample", (x,), lambda g: _accumulate(x, g))
    uh = bilinear_weights(h, th, x.dtype)
    uw = bilinear_weights(w, tw, x.dtype)
    out = np.matmul(np.matmul(uh, x.data), uw.T)

    def bw(g):
        _accumulate(x, np.matmul(np.matmul(uh.T, g), uw))
    return _make(out, "upsample", (x,), bw)


# ----------------------------------------------------------------------------
# graph-level helpers
# ----------------------------------------------------------------------------

GraphFn = Callable[..., "Tensor | Mapping[str, Tensor]"]


def _bind(bindings: Mapping[str, np.ndarray], dtype, requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=requires_grad, name=k)
            for k, v in bindings.items()}


def evaluate(graph: GraphFn, bindings: Mapping[str, np.ndarray], dtype=DEFAULT_DTYPE) -> dict[str, np.ndarray]:
    """Run ``graph(**inputs)`` and return its outputs as arrays.

    A graph returning a single tensor yields ``{"out": ...}``.
    """
    out = graph(**_bind(bindings, dtype, False))
    if isinstance(out, Tensor):
        out = {"out": out}
    return {k: v.data for k, v in out.items()}


def gradients(graph: GraphFn, bindings: Mapping[str, np.ndarray], wrt: Iterable[str] | None = None,
              dtype=DEFAULT_DTYPE, loss_key: str = "out") -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradients of a scalar graph with respect to named inputs."""
    wrt = list(bindings) if wrt is None else list(wrt)
    inputs = _bind(bindings, dtype, False)
    for name in wrt:
        inputs[name].requires_grad = True
    out = graph(**inputs)
    loss = out if isinstance(out, Tensor) else out[loss_key]
    backprop(loss)
    grads = {}
    for name in wrt:
        g = inputs[name].grad
        if g is None:
            warnings.warn(f"input {name!r} is detached from the loss; gradient is zero", stacklevel=2)
            g = np.zeros_like(inputs[name].data)
        grads[name] = g
    return float(loss.data), grads


def finite_difference(graph: GraphFn, bindings: Mapping[str, np.ndarray], name: str,
                      h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar graph, evaluated in float64."""
    base = {k: np.asarray(v, dtype=np.float64) for k, v in bindings.items()}
    x = base[name].copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def f() -> float:
        out = graph(**_bind({**base, name: x}, np.float64, False))
        loss = out if isinstance(out, Tensor) else out["out"]
        return float(loss.data)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ||a - n|| / max(||a||, ||n||, 1e-12)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(graph: GraphFn, bindings: Mapping[str, np.ndarray], wrt: Iterable[str] | None = None,
                    h: float = 1e-3, dtype=DEFAULT_DTYPE) -> dict[str, float]:
    """Relative error of analytic gradients (in ``dtype``) against float64 central differences."""
    wrt = list(bindings) if wrt is None else list(wrt)
    _, grads = gradients(graph, bindings, wrt, dtype=dtype)
    return {name: relative_error(grads[name], finite_difference(graph, bindings, name, h)) for name in wrt}


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam over a name -> parameter mapping.

    State (moments and step counter) lives in plain arrays so it can be
    checkpointed alongside the parameters.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 0.005,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        zero_grad(self.params.values())

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise GraphError(f"non-finite gradient for parameter {name!r}; step aborted")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam/step": np.array([self.step_count], dtype=np.float32)}
        for name in self.params:
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adam/step"][0])
        for name in self.params:
            self.m[name] = np.array(arrays[f"adam/m/{name}"], dtype=self.params[name].dtype)
            self.v[name] = np.array(arrays[f"adam/v/{name}"], dtype=self.params[name].dtype)
