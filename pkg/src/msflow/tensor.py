"""Minimal dense tensor with reverse-mode automatic differentiation.

Every op records a closure that maps the upstream gradient to gradients
for its inputs. ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates into ``.grad`` of leaves that require
gradients.

Storage is float32 by default. Float64 tensors are accepted everywhere so
finite-difference oracles can evaluate the very same code paths at higher
precision.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float32

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes disagree; names the offending dimension."""

    def __init__(self, op: str, dim: str, got, expected):
        self.op = op
        self.dim = dim
        self.got = got
        self.expected = expected
        super().__init__(f"{op}: dimension '{dim}' is {got}, expected {expected}")


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f", op={self.op}" if self.op != "leaf" else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        out = Tensor(data)
        out.op = op
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.astype(node.data.dtype, copy=True) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=p.data.dtype)
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    def graph(self) -> Graph:
        return Graph.trace(self)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = _lift(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = _lift(other, self)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other):
        return _lift(other, self) - self

    def __mul__(self, other):
        other = _lift(other, self)
        x, y = self.data, other.data

        def bw(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

        return Tensor._make(x * y, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self)
        x, y = self.data, other.data

        def bw(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._make(x / y, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return _lift(other, self) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return Tensor._make(x ** p, (self,), lambda g: (g * p * x ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        x = self.data
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.intp)

        def bw(g):
            z = np.zeros_like(x)
            np.add.at(z, idx, g)
            return (z,)

        return Tensor._make(x[idx], (self,), bw, "index")

    # -- shape / reductions ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)), (self,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    # -- elementwise -------------------------------------------------------
    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        x = self.data
        return Tensor._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (np.where(y > 0, g / (2 * np.where(y > 0, y, 1)), 0),), "sqrt")

    def clamp(self, lo=None, hi=None):
        x = self.data
        y = np.clip(x, lo, hi)
        mask = np.ones_like(x)
        if lo is not None:
            mask = mask * (x >= lo)
        if hi is not None:
            mask = mask * (x <= hi)
        return Tensor._make(y, (self,), lambda g: (g * mask,), "clamp")

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


@dataclass
class GraphNode:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class Graph:
    """Topologically ordered record of the ops that produced a tensor."""

    nodes: list[GraphNode] = field(default_factory=list)
    leaves: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order = _topo_order(root)
        ids = {id(t): i for i, t in enumerate(order)}
        g = cls()
        for t in order:
            if t._backward is None:
                if t.requires_grad:
                    g.leaves.append(t)
                continue
            g.nodes.append(GraphNode(t.op, tuple(ids[id(p)] for p in t._parents), ids[id(t)]))
        return g


# ---------------------------------------------------------------------------
# functional primitives
# ---------------------------------------------------------------------------

def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return Tensor._make(np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    return Tensor._make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), bw, "softmax")


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as zero."""
    d = x.data
    n = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.where(n > 0, g * d / safe, 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._make(out, (x,), bw, "norm")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    return Tensor._make(x @ y, (a, b), lambda g: (g @ y.T, x.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` of shape (N, in) and ``weight`` (out, in)."""
    out = matmul(x, weight.transpose(1, 0))
    return out + bias if bias is not None else out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [t.data for t in tensors]
    splits = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate(arrs, axis=axis), tuple(tensors), bw, "concat")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    base = tensors[0].shape
    for t in tensors[1:]:
        for ax, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[ax] != base[ax]:
                raise ShapeError("concat_channels", name, t.shape[ax], base[ax])
    return concat(tensors, axis=1)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    axis = axis % (tensors[0].ndim + 1)
    return concat([t.reshape(t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors], axis=axis)


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximum in raster order.
    """
    d = x.data
    n, c, h, w = d.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeError("max_pool2", "height" if h2 == 0 else "width", min(h, w), ">= 2")
    blocks = d[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h2, w2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        z = np.zeros((n, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(z, arg[..., None], g[..., None], axis=-1)
        z = z.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        full = np.zeros_like(d, dtype=g.dtype)
        full[:, :, : 2 * h2, : 2 * w2] = z
        return (full,)

    return Tensor._make(out, (x,), bw, "max_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW map."""
    d = x.data
    out = d.repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        n, c, h, w = d.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), bw, "upsample2")


def l2_pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows: (n, d) x (m, d) -> (n, m)."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("l2_pairwise_distance", "feature", b.shape[-1], a.shape[-1])
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    safe = np.where(dist > 0, dist, 1)

    def bw(g):
        unit = np.where(dist[..., None] > 0, diff / safe[..., None], 0)
        ga = (g[..., None] * unit).sum(axis=1)
        gb = -(g[..., None] * unit).sum(axis=0)
        return ga, gb

    return Tensor._make(dist, (a, b), bw, "l2_pairwise_distance")


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    n = (x * x).sum(axis=axis, keepdims=True) + eps
    return x / n.sqrt()


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, dilation: int, padding: int, stride: int) -> int:
    span = n + 2 * padding - dilation * (k - 1) - 1
    if span < 0:
        return 0
    return span // stride + 1


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, k: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, (n, c, k, k, ho, wo),
                      (s0, s1, s2 * dilation, s3 * dilation, s2 * stride, s3 * stride),
                      writeable=False)


def _tap(xp: np.ndarray, i: int, j: int, dilation: int, stride: int, ho: int, wo: int) -> np.ndarray:
    y0, x0 = i * dilation, j * dilation
    return xp[:, :, y0: y0 + stride * (ho - 1) + 1: stride, x0: x0 + stride * (wo - 1) + 1: stride]


def _conv_forward_im2col(xp, k64, ho, wo, dilation, stride):
    k = k64.shape[-1]
    cols = _windows(xp, k, dilation, stride, ho, wo).astype(np.float64)
    out = np.tensordot(k64, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O, N, ho, wo)
    return out.transpose(1, 0, 2, 3)


def _conv_forward_direct(xp, k64, ho, wo, dilation, stride):
    n = xp.shape[0]
    o, _, k, _ = k64.shape
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            patch = _tap(xp, i, j, dilation, stride, ho, wo).astype(np.float64)
            out += np.tensordot(k64[:, :, i, j], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1,
           padding: int = 0, stride: int = 1, impl: str = "im2col") -> Tensor:
    """Dilated 2-D cross-correlation on NCHW input.

    Products are accumulated in float64 and rounded once to the storage
    type, so ``impl="direct"`` (per-tap loop) and ``impl="im2col"`` give the
    same values.
    """
    if int(dilation) != dilation or dilation < 1:
        raise ValueError(f"conv2d: dilation must be a positive int, got {dilation}")
    if int(stride) != stride or stride < 1:
        raise ValueError(f"conv2d: stride must be a positive int, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", x.ndim, 4)
    if kernel.ndim != 4:
        raise ShapeError("conv2d", "kernel rank", kernel.ndim, 4)
    n, cin, h, w = x.shape
    cout, kcin, k, k2 = kernel.shape
    if kcin != cin:
        raise ShapeError("conv2d", "in_channels", cin, kcin)
    if k != k2:
        raise ShapeError("conv2d", "kernel width", k2, k)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError("conv2d", "bias", bias.shape, (cout,))
    ho = conv_output_size(h, k, dilation, padding, stride)
    wo = conv_output_size(w, k, dilation, padding, stride)
    if ho <= 0:
        raise ShapeError("conv2d", "height", h, f">= {dilation * (k - 1) + 1 - 2 * padding}")
    if wo <= 0:
        raise ShapeError("conv2d", "width", w, f">= {dilation * (k - 1) + 1 - 2 * padding}")

    out_dtype = np.result_type(x.dtype, kernel.dtype)
    xp = _pad(x.data, padding)
    k64 = kernel.data.astype(np.float64)
    if impl == "im2col":
        acc = _conv_forward_im2col(xp, k64, ho, wo, dilation, stride)
    elif impl == "direct":
        acc = _conv_forward_direct(xp, k64, ho, wo, dilation, stride)
    else:
        raise ValueError(f"conv2d: unknown impl {impl!r}")
    if bias is not None:
        acc = acc + bias.data.astype(np.float64)[None, :, None, None]
    out = acc.astype(out_dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        gk = gx = gb = None
        if kernel.requires_grad:
            cols = _windows(xp, k, dilation, stride, ho, wo).astype(np.float64)
            gk = np.tensordot(g64, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g64.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=np.float64)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(k64[:, :, i, j], g64, axes=([0], [1])).transpose(1, 0, 2, 3)
                    y0, x0 = i * dilation, j * dilation
                    gxp[:, :, y0: y0 + stride * (ho - 1) + 1: stride,
                        x0: x0 + stride * (wo - 1) + 1: stride] += contrib
            gx = gxp[:, :, padding: padding + h, padding: padding + w] if padding else gxp
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# bilinear grid sampling
# ---------------------------------------------------------------------------

def identity_grid(n: int, h: int, w: int, dtype=DTYPE) -> np.ndarray:
    """Normalized mesh in [-1, 1] (x first), corners on the corner pixel centers."""
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.stack([gx, gy], axis=-1).astype(dtype)
    return np.broadcast_to(grid, (n, h, w, 2)).copy()


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling of NCHW ``x`` at normalized ``grid`` (N, H', W', 2).

    Grid value -1/+1 maps to the first/last pixel center; samples that fall
    outside the input read zero.
    """
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ValueError(f"grid_sample: grid must have shape (N, H', W', 2), got {grid.shape}")
    if x.ndim != 4:
        raise ShapeError("grid_sample", "input rank", x.ndim, 4)
    if grid.shape[0] != x.shape[0]:
        raise ShapeError("grid_sample", "batch", grid.shape[0], x.shape[0])
    d = x.data
    n, c, h, w = d.shape
    out_dtype = np.result_type(d.dtype, grid.dtype)
    gd = grid.data.astype(np.float64)
    px = (gd[..., 0] + 1.0) * 0.5 * (w - 1)
    py = (gd[..., 1] + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    # non-finite coordinates read as out of range; NaN still propagates via fx, fy
    x0 = np.nan_to_num(x0, nan=-2, posinf=-2, neginf=-2).astype(np.intp)
    y0 = np.nan_to_num(y0, nan=-2, posinf=-2, neginf=-2).astype(np.intp)
    nidx = np.arange(n)[:, None, None]
    dl = d.transpose(0, 2, 3, 1).astype(np.float64)  # N, H, W, C

    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            xc, yc = np.clip(xi, 0, w - 1), np.clip(yi, 0, h - 1)
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            val = dl[nidx, yc, xc] * valid[..., None]  # N, H', W', C
            corners.append((dx, dy, xc, yc, valid, wx, wy, val))

    acc = sum((wx * wy)[..., None] * val for _, _, _, _, _, wx, wy, val in corners)
    out = acc.transpose(0, 3, 1, 2).astype(out_dtype)

    def bw(g):
        gl = g.astype(np.float64).transpose(0, 2, 3, 1)  # N, H', W', C
        gx_in = ggrid = None
        if x.requires_grad:
            buf = np.zeros((n * h * w, c), dtype=np.float64)
            for _, _, xc, yc, valid, wx, wy, _ in corners:
                flat = ((nidx * h + yc) * w + xc).ravel()
                contrib = (gl * (wx * wy * valid)[..., None]).reshape(-1, c)
                np.add.at(buf, flat, contrib)
            gx_in = buf.reshape(n, h, w, c).transpose(0, 3, 1, 2)
        if grid.requires_grad:
            dpx = np.zeros(px.shape)
            dpy = np.zeros(py.shape)
            for dx, dy, _, _, _, wx, wy, val in corners:
                s = (gl * val).sum(-1)
                dpx += s * wy * (1.0 if dx else -1.0)
                dpy += s * wx * (1.0 if dy else -1.0)
            ggrid = np.stack([dpx * 0.5 * (w - 1), dpy * 0.5 * (h - 1)], axis=-1)
        return gx_in, ggrid

    return Tensor._make(out, (x, grid), bw, "grid_sample")


# ---------------------------------------------------------------------------
# modules and optimisation
# ---------------------------------------------------------------------------

class Module:
    """Parameter container; parameters are discovered from attributes."""

    training = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            out.extend(_collect(val, f"{prefix}{key}"))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if p.shape != state[k].shape:
                raise ShapeError("load_state_dict", k, state[k].shape, p.shape)
            p.data = np.asarray(state[k], dtype=p.dtype).copy()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(val, name: str) -> list[tuple[str, Tensor]]:
    if isinstance(val, Tensor):
        return [(name, val)] if val.requires_grad or val.name == "param" else []
    if isinstance(val, Module):
        return val.named_parameters(prefix=name + ".")
    if isinstance(val, (list, tuple)):
        out = []
        for i, v in enumerate(val):
            out.extend(_collect(v, f"{name}.{i}"))
        return out
    return []


def parameter(data, trainable: bool = True) -> Tensor:
    t = Tensor(np.asarray(data, dtype=DTYPE), requires_grad=trainable)
    t.name = "param"
    return t


class SGD:
    """Stochastic gradient descent with heavy-ball momentum.

    Parameters whose ``requires_grad`` is False are left untouched, which is
    how individual parameter groups are frozen.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        sgd_step(self.params, grads, self.lr, self.momentum, self.buffers, self.weight_decay)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"v.{i}": b for i, b in enumerate(self.buffers) if b is not None}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.buffers = [state.get(f"v.{i}") for i in range(len(self.params))]


class Adam:
    """Adam with bias correction; frozen parameters are skipped."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray | None] = [None] * len(self.params)
        self.v: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            if p.grad is None or not p.requires_grad:
                continue
            # moments stay float32 so a checkpoint round trip is lossless
            g = p.grad.astype(np.float32)
            m = np.zeros_like(g) if self.m[i] is None else self.m[i]
            v = np.zeros_like(g) if self.v[i] is None else self.v[i]
            self.m[i] = (b1 * m + (1 - b1) * g).astype(np.float32)
            self.v[i] = (b2 * v + (1 - b2) * g * g).astype(np.float32)
            mh = self.m[i] / np.float32(1 - b1 ** self.t)
            vh = self.v[i] / np.float32(1 - b2 ** self.t)
            p.data = (p.data - np.float32(self.lr) * mh / (np.sqrt(vh) + np.float32(self.eps))).astype(p.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            if m is not None:
                out[f"m.{i}"], out[f"v.{i}"] = m, v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])
        self.m = [state.get(f"m.{i}") for i in range(len(self.params))]
        self.v = [state.get(f"v.{i}") for i in range(len(self.params))]


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], lr: float,
             momentum: float = 0.0, buffers: list | None = None, weight_decay: float = 0.0):
    """In-place update ``p -= lr * v`` with ``v = momentum * v + g``.

    ``buffers`` holds the velocity per parameter and is updated in place so
    it persists across calls.
    """
    if buffers is None:
        buffers = [None] * len(params)
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None or not p.requires_grad:
            continue
        g = g.astype(p.dtype, copy=False)
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            v = buffers[i]
            v = g.copy() if v is None else momentum * v + g
            buffers[i] = v
            g = v
        p.data = (p.data - lr * g).astype(p.dtype)
    return params
