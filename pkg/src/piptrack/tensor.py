"""Dense float tensors with reverse-mode automatic differentiation.

Every op records a closure that maps the output gradient to gradients for
its inputs. ``Tensor.backward`` walks the recorded graph once in reverse
topological order and sums gradients into the ``grad`` field of leaf
tensors created with ``requires_grad=True``.

Storage is float32 by default. ``precision(np.float64)`` switches newly
created tensors to float64, which is how the finite-difference checks run.
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.dtype = np.float32
        self.check_finite = True


_state = _State()


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Create tensors with ``dtype`` inside the block."""
    prev = _state.dtype
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def default_dtype():
    return _state.dtype


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_state.dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() called on a tensor that does not require grad")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # free the graph as we go
            node._parents = ()
            node._backward = None

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _state.check_finite and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: produced non-finite values")
    t = Tensor.__new__(Tensor)
    t.data = out if out.dtype == _state.dtype else out.astype(_state.dtype)
    t.grad = None
    t._op = op
    needs = _state.grad_enabled and any(p.requires_grad for p in parents)
    t.requires_grad = needs
    if needs:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):  # _make reports non-finite output
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make(out, (x,), lambda g: (g / x.data,), "log")


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return _make(out, (x,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# pointwise nonlinearities

_GELU_C = math.sqrt(2.0 / math.pi)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner),)

    return _make(out, (x,), bw, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def normalize(x: Tensor, axes: int | tuple[int, ...] = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance over ``axes`` (no affine part)."""
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _make(y, (x,), bw, "normalize")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    return normalize(x, -1, eps) * weight + bias


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the two spatial axes."""
    return normalize(x, (-2, -1), eps)


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)
    return _make(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def getitem(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index])

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return _make(out, (x,), bw, "getitem")


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tensors, bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner axes differ ({a.shape[-1]} vs {b.shape[-2]})")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map on the last axis: ``x @ weight.T + bias``; weight is [Dout, Din]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"dense: input last axis has {x.shape[-1]} but weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias shape {bias.shape} does not match output size {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out.reshape(*lead, weight.shape[0]), parents, bw, "dense")


# ---------------------------------------------------------------------------
# convolution, pooling, sampling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input and [Cout, Cin, kh, kw] kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-axis input and kernel, got {x.shape} and {kernel.shape}")
    B, Cin, H, W = x.shape
    Cout, Ck, kh, kw = kernel.shape
    if Ck != Cin:
        raise ShapeError(f"conv2d: input channel axis (1) has {Cin} but kernel axis 1 has {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial axes (2, 3) must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ValueError("conv2d: padding must be >= 0 and stride >= 1")
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: spatial axes (2, 3) of size {H}x{W} too small for kernel {kh}x{kw}")
    # channels-last internally; column order is (ki, kj, cin)
    xh = x.data.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * Cin)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(Cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Cout).transpose(0, 3, 1, 2)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Cout)
        gk = None
        if kernel.requires_grad:
            gk = (g2.T @ cols).reshape(Cout, kh, kw, Cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, kh, kw, Cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += (
                        dcols[:, :, :, i, j]
                    )
            if padding:
                gxp = gxp[:, padding : padding + H, padding : padding + W]
            gx = gxp.transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """Mean over 2x2 blocks of the last two axes; odd sizes are edge-padded first."""
    H, W = x.shape[-2:]
    ph, pw = H % 2, W % 2
    v = x.data
    if ph or pw:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
        v = np.pad(v, pad, mode="edge")
    Hp, Wp = v.shape[-2:]
    lead = v.shape[:-2]
    out = v.reshape(*lead, Hp // 2, 2, Wp // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        gp = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        if pw:
            gp[..., :, W - 1] += gp[..., :, W]
            gp = gp[..., :, :W]
        if ph:
            gp[..., H - 1, :] += gp[..., H, :]
            gp = gp[..., :H, :]
        return (gp,)

    return _make(out, (x,), bw, "avg_pool2")


def bilinear_sample(fmap: Tensor, coords: Tensor) -> Tensor:
    """Sample ``fmap`` [G, C, H, W] at pixel coords [G, M, 2] (x, y) -> [G, M, C].

    Coordinates outside [0, W-1] x [0, H-1] are clamped to the border first.
    Integer in-range coordinates return the grid value exactly.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    if fmap.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: expected [G,C,H,W] and [G,M,2], got {fmap.shape} and {coords.shape}")
    if fmap.shape[0] != coords.shape[0]:
        raise ShapeError(f"bilinear_sample: group axis 0 differs ({fmap.shape[0]} vs {coords.shape[0]})")
    G, C, H, W = fmap.shape
    M = coords.shape[1]
    cx, cy = coords.data[..., 0], coords.data[..., 1]
    x = np.clip(cx, 0, W - 1)
    y = np.clip(cy, 0, H - 1)
    x0 = np.minimum(np.floor(x), max(W - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (x - x0).astype(fmap.data.dtype)[..., None]
    wy = (y - y0).astype(fmap.data.dtype)[..., None]
    base = (np.arange(G) * (H * W))[:, None]
    i00, i01 = base + y0 * W + x0, base + y0 * W + x1
    i10, i11 = base + y1 * W + x0, base + y1 * W + x1
    flat = fmap.data.reshape(G, C, H * W).transpose(0, 2, 1).reshape(G * H * W, C) if C > 1 else fmap.data.reshape(-1, 1)
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    out = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        gmap = None
        if fmap.requires_grad:
            idx = np.concatenate([i00.ravel(), i01.ravel(), i10.ravel(), i11.ravel()])
            vals = np.concatenate([(w00 * g).reshape(-1, C), (w01 * g).reshape(-1, C),
                                   (w10 * g).reshape(-1, C), (w11 * g).reshape(-1, C)])
            if C == 1:
                acc = np.bincount(idx, weights=vals[:, 0], minlength=G * H * W).astype(g.dtype)
                gmap = acc.reshape(G, 1, H, W)
            else:
                acc = np.zeros((G * H * W, C), dtype=g.dtype)
                np.add.at(acc, idx, vals)
                gmap = acc.reshape(G, H * W, C).transpose(0, 2, 1).reshape(G, C, H, W)
        gcoords = None
        if coords.requires_grad:
            dx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            inx = ((cx >= 0) & (cx <= W - 1)).astype(g.dtype)
            iny = ((cy >= 0) & (cy <= H - 1)).astype(g.dtype)
            gcoords = np.stack([(g * dx).sum(-1) * inx, (g * dy).sum(-1) * iny], axis=-1)
        return gmap, gcoords

    return _make(out.reshape(G, M, C), (fmap, coords), bw, "bilinear_sample")


def sample_points(fmap: Tensor, points) -> Tensor:
    """Single-map form: ``fmap`` [C, H, W], points [N, 2] -> [N, C]."""
    fmap = as_tensor(fmap)
    pts = as_tensor(points)
    out = bilinear_sample(reshape(fmap, (1, *fmap.shape)), reshape(pts, (1, *pts.shape)))
    return reshape(out, out.shape[1:])
