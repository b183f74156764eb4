"""Reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` orders
the recorded graph topologically and runs each closure exactly once, in
reverse. The graph is rebuilt on every forward pass.

Arrays keep whatever dtype they were created with: float32 for training,
float64 for gradient checking.
"""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "track_kinks",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "log",
    "exp",
    "tanh",
    "sigmoid",
    "relu",
    "leaky_relu",
    "gelu",
    "clip",
    "abs",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "conv_output_size",
    "conv_transpose_output_size",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "transpose_last_two",
    "flatten_spatial",
    "softmax",
    "concat",
    "normalize",
    "GradCheckReport",
    "grad_check",
    "grad_check_params",
]

LOG_FLOOR = 1e-12
_DEBUG = os.environ.get("FUNDUSGAN_DEBUG", "") not in ("", "0")
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


_kink_log: list[float] | None = None


@contextlib.contextmanager
def track_kinks():
    """Collect, per kinked op call, the smallest distance of an input to a kink.

    Yields the list being filled; relu, leaky_relu, abs and clip report.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _note_kink(dist: np.ndarray) -> None:
    if _kink_log is not None and dist.size:
        _kink_log.append(float(np.min(dist)))


class Tensor:
    """An n-dimensional array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # -- operators --------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        if not order:
            raise RuntimeError("nothing to differentiate: loss does not require grad")
        self.grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        g = _unbroadcast(g, t.shape)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(p.data)) for p in parents):
            raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


# -- elementwise ----------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), backward, "scale")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward, "neg")


def log(a: Tensor) -> Tensor:
    """Natural log with the input clamped to at least 1e-12."""
    x = np.maximum(a.data, LOG_FLOOR)

    def backward(g):
        _accumulate(a, np.where(a.data > LOG_FLOOR, g / x, 0.0).astype(a.dtype))

    return _make(np.log(x), (a,), backward, "log")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _make(y, (a,), backward, "exp")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1 - y * y))

    return _make(y, (a,), backward, "tanh")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * y * (1 - y))

    return _make(y, (a,), backward, "sigmoid")


def relu(a: Tensor) -> Tensor:
    _note_kink(np.abs(a.data))
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _make(a.data * mask, (a,), backward, "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    _note_kink(np.abs(a.data))
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)

    def backward(g):
        _accumulate(a, g * factor)

    return _make(a.data * factor, (a,), backward, "leaky_relu")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    cdf = cdf.astype(x.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)
        _accumulate(a, (g * (cdf + x * pdf)).astype(a.dtype))

    return _make(x * cdf, (a,), backward, "gelu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero wherever clamping is active."""
    _note_kink(np.minimum(np.abs(a.data - lo), np.abs(a.data - hi)))
    y = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(y, (a,), backward, "clip")


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _note_kink(np.abs(a.data))
    sign = np.sign(a.data)

    def backward(g):
        _accumulate(a, g * sign)

    return _make(np.abs(a.data), (a,), backward, "abs")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


# -- convolutions -----------------------------------------------------------

def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv_transpose_output_size(n: int, k: int, s: int, p: int, op: int) -> int:
    return (n - 1) * s - 2 * p + k + op


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*k*k, N*ho*wo)."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    # win: (N, C, ho, wo, k, k)
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, out: np.ndarray, k: int, s: int, ho: int, wo: int) -> None:
    """Scatter-add (C*k*k, N*ho*wo) columns into ``out`` of shape (N, C, H, W)."""
    n, c = out.shape[:2]
    cols = cols.reshape(c, k, k, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols[:, :, i, j]


def _as4d(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"expected C×H×W or N×C×H×W input, got {x.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation. ``w`` is (C_out, C_in, k, k)."""
    xd, squeeze = _as4d(x)
    n, c, h, wd = xd.shape
    co, ci, k, k2 = w.shape
    if k != k2:
        raise ShapeError(f"conv2d: only square kernels supported, got {w.shape}")
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight {w.shape} expects {ci}")
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(
            f"conv2d: kernel {k} larger than padded input {h + 2 * padding}x{wd + 2 * padding}"
        )
    s, p = stride, padding
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(wd, k, s, p)
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    cols = _im2col(xp, k, s, ho, wo)
    w2 = w.data.reshape(co, -1)
    y = (w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)
    if squeeze:
        y = y[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(co, n * ho * wo)
        if w.requires_grad:
            _accumulate(w, (g2 @ cols.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            _col2im(w2.T @ g2, dxp, k, s, ho, wo)
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
            _accumulate(x, dx[0] if squeeze else dx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(y, parents, backward, "conv2d")


def conv_transpose2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed convolution, the adjoint of :func:`conv2d`. ``w`` is (C_in, C_out, k, k)."""
    s, p, op = stride, padding, output_padding
    if op >= s:
        raise ShapeError(f"conv_transpose2d: output_padding {op} must be smaller than stride {s}")
    xd, squeeze = _as4d(x)
    n, c, h, wd = xd.shape
    ci, co, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"conv_transpose2d: input has {c} channels but weight {w.shape} expects {ci}")
    ho = conv_transpose_output_size(h, k, s, p, op)
    wo = conv_transpose_output_size(wd, k, s, p, op)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: empty output for input {x.shape}")
    hf, wf = (h - 1) * s + k + op, (wd - 1) * s + k + op
    x2 = xd.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    w2 = w.data.reshape(ci, co * k * k)
    full = np.zeros((n, co, hf, wf), dtype=np.result_type(xd, w.data))
    _col2im(w2.T @ x2, full, k, s, h, wd)
    y = full[:, :, p : p + ho, p : p + wo]
    if bias is not None:
        y = y + bias.data[None, :, None, None]
    y = np.ascontiguousarray(y)
    if squeeze:
        y = y[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        gfull = np.zeros((n, co, hf, wf), dtype=g4.dtype)
        gfull[:, :, p : p + ho, p : p + wo] = g4
        gcols = _im2col(gfull, k, s, h, wd)
        if w.requires_grad:
            _accumulate(w, (x2 @ gcols.T).reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dx = (w2 @ gcols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            _accumulate(x, dx[0] if squeeze else dx)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(y, parents, backward, "conv_transpose2d")


# -- reductions and shape ---------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        _accumulate(x, _expand_reduced(g, x.shape, axis, keepdims))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.size(y), 1)

    def backward(g):
        _accumulate(x, _expand_reduced(g, x.shape, axis, keepdims) / count)

    return _make(np.asarray(y, dtype=x.dtype), (x,), backward, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    known = int(np.prod([d for d in shape if d != -1]))
    if shape.count(-1) > 1 or (-1 not in shape and known != x.size) or (
        -1 in shape and (known == 0 or x.size % known)
    ):
        raise ShapeError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _make(x.data.transpose(axes), (x,), backward, "transpose")


def transpose_last_two(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def flatten_spatial(x: Tensor) -> Tensor:
    """(..., C, H, W) -> (..., C, H*W)."""
    return reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _make(y, (x,), backward, "softmax")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty list")
    ax = axis % xs[0].ndim
    for t in xs[1:]:
        if t.ndim != xs[0].ndim or any(
            d0 != d1 for i, (d0, d1) in enumerate(zip(xs[0].shape, t.shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {xs[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def backward(g):
        for t, piece in zip(xs, np.split(g, bounds, axis=ax)):
            _accumulate(t, piece)

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, backward, "concat")


def normalize(x: Tensor, axes: tuple[int, ...], eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` (biased variance)."""
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (xc * inv).astype(x.dtype)

    def backward(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        _accumulate(x, (inv * (g - gm - y * gym)).astype(x.dtype))

    return _make(y, (x,), backward, "normalize")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int
    metric: str = "max rel err"

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def __str__(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: {self.metric} {self.max_rel_err:.3e} (tol {self.tol:g}, n={self.n_checked})"


def _rel_err(ad: np.ndarray, fd: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(ad - fd) / denom)) if ad.size else 0.0


def _check_tensors(
    loss_fn: Callable[[], Tensor],
    targets: Sequence[Tensor],
    eps: float,
    tol: float,
    max_elements: int | None,
    seed: int,
    name: str,
) -> GradCheckReport:
    for t in targets:
        t.grad = None
        t.requires_grad = True
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]

    # Flat index list over all targets; optionally subsampled.
    index = [(ti, j) for ti, t in enumerate(targets) for j in range(t.size)]
    if max_elements is not None and len(index) > max_elements:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(index), size=max_elements, replace=False)
        index = [index[i] for i in sorted(pick)]

    ad, fd = np.empty(len(index)), np.empty(len(index))
    with no_grad():
        for n, (ti, j) in enumerate(index):
            flat = targets[ti].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(loss_fn().data)
            flat[j] = orig - eps
            fm = float(loss_fn().data)
            flat[j] = orig
            fd[n] = (fp - fm) / (2 * eps)
            ad[n] = analytic[ti].reshape(-1)[j]
    return GradCheckReport(name, _rel_err(ad, fd), tol, len(index))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    name: str = "grad_check",
) -> GradCheckReport:
    """Compare backward against central differences of scalar ``f`` at ``x``.

    The per-element relative error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``; the report carries its
    maximum. Use float64 inputs.
    """
    return _check_tensors(lambda: f(x), [x], eps, tol, max_elements, seed, name)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-5,
    max_elements: int | None = None,
    seed: int = 0,
    name: str = "grad_check_params",
) -> GradCheckReport:
    """Like :func:`grad_check` but over a closure and a list of tensors."""
    return _check_tensors(loss_fn, list(params), eps, tol, max_elements, seed, name)
