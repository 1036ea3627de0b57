"""Dense float tensors with reverse-mode automatic differentiation.

Operations record onto an explicit :class:`Tape` in execution order.  Calling
``Tape.backward(loss)`` walks the recorded nodes in reverse and accumulates
gradients into every reachable tensor with ``requires_grad`` set.  Storage is
float32 by default; float64 is supported throughout so gradients can be
finite-difference checked at tight tolerances.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)

# Explicit reductions (sum, mean, logsumexp, softmax denominators) always
# accumulate in float64.  Matmul-family ops accumulate in the storage dtype:
# BLAS float32 products are stable at the contraction sizes used here, and
# gradient checks run on float64 tensors where accumulation is 64-bit anyway.
MATMUL_ACCUM_F64 = False


class ShapeError(ValueError):
    """Operand shapes do not conform to an op's contract."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " vs ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_TAPE_STACK: list["Tape"] = []
_GRAD_DISABLED = 0


class Tape:
    """Execution-order record of differentiable ops.

    Use as a context manager; ops executed inside record one node each.
    ``backward`` must be called with a scalar tensor that was recorded on
    this tape.  ``clear`` drops all nodes and their saved intermediates.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
        if not isinstance(loss, Tensor):
            raise TypeError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward on an empty tape")
        if loss._tape is not self:
            raise RuntimeError("loss was not recorded on this tape")
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            grads = node.backward(out_grad)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                g = np.asarray(g, dtype=t.data.dtype)
                if g.shape != t.data.shape:
                    raise RuntimeError(
                        f"{node.op}: gradient shape {g.shape} does not match input {t.data.shape}"
                    )
                t.grad = np.array(g) if t.grad is None else t.grad + g


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _GRAD_DISABLED
        _GRAD_DISABLED += 1
        return self

    def __exit__(self, exc_type, exc, tb):
        global _GRAD_DISABLED
        _GRAD_DISABLED -= 1
        return False


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def grad_enabled() -> bool:
    return bool(_TAPE_STACK) and _GRAD_DISABLED == 0


class Tensor:
    """A numpy-backed dense tensor, optionally tracked for gradients.

    ``data`` is float32 or float64 and must not be mutated in place while a
    live tape references it; the engine itself always allocates fresh arrays.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            # numpy inputs keep their float width; python lists and scalars
            # default to the float32 storage dtype
            if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _ALLOWED_DTYPES:
                dtype = data.dtype
            else:
                dtype = np.float32
        if np.dtype(dtype) not in _ALLOWED_DTYPES:
            raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on a live tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        head = np.array2string(self.data, threshold=6, precision=4)
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}, data={head})"

    # arithmetic sugar; implementations live at module level
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _const_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def constant(data, dtype=np.float32) -> Tensor:
    """A tensor that never requires gradients."""
    return Tensor(np.asarray(data), dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# op registry and recording plumbing

OPS: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        OPS[name] = fn
        return fn

    return deco


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        out._tape = tape
        tape.record(_Node(op, tuple(inputs), out, backward))
    return out


def _as_scalar(op: str, value) -> float:
    if isinstance(value, Tensor):
        if value.data.size != 1:
            raise ShapeError(op, value.shape, detail="expected a scalar operand")
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return float(value)
    raise TypeError(f"{op}: unsupported operand type {type(value).__name__}")


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


def _binary(op, a, b, fwd, bwd_a, bwd_b):
    """Elementwise binary op; operands must be same-shape or one a scalar.

    Broadcasting beyond scalar-with-tensor is rejected on purpose: the cost
    of a silent shape bug outweighs the convenience.
    """
    if not isinstance(a, Tensor):
        a = _as_scalar(op, a)
    if not isinstance(b, Tensor):
        b = _as_scalar(op, b)
    a_is_t = isinstance(a, Tensor)
    b_is_t = isinstance(b, Tensor)
    if a_is_t and b_is_t:
        _check_same_dtype(op, a, b)
        a_scalar = a.data.size == 1 and a.data.shape != b.data.shape
        b_scalar = b.data.size == 1 and b.data.shape != a.data.shape
        if a.data.shape != b.data.shape and not (a_scalar or b_scalar):
            raise ShapeError(op, a.shape, b.shape)
        ad, bd = a.data, b.data
        out = fwd(ad, bd)
        inputs = (a, b)

        def backward(g):
            ga = bwd_a(g, ad, bd)
            gb = bwd_b(g, ad, bd)
            if ga is not None and a_scalar:
                ga = np.asarray(ga, dtype=np.float64).sum().astype(ad.dtype).reshape(ad.shape)
            if gb is not None and b_scalar:
                gb = np.asarray(gb, dtype=np.float64).sum().astype(bd.dtype).reshape(bd.shape)
            return ga, gb

        return _record(op, inputs, out, backward)
    if a_is_t:
        ad = a.data
        bd = np.asarray(b, dtype=ad.dtype)
        out = fwd(ad, bd)

        def backward(g, ad=ad, bd=bd):
            return (bwd_a(g, ad, bd),)

        return _record(op, (a,), out, backward)
    # scalar op tensor
    bd = b.data
    ad = np.asarray(a, dtype=bd.dtype)
    out = fwd(ad, bd)

    def backward(g, ad=ad, bd=bd):
        return (bwd_b(g, ad, bd),)

    return _record(op, (b,), out, backward)


def _unary(op, t, fwd, bwd):
    if not isinstance(t, Tensor):
        raise TypeError(f"{op}: expected a Tensor")
    x = t.data
    out = fwd(x)

    def backward(g):
        return (bwd(g, x, out),)

    return _record(op, (t,), out, backward)


# ---------------------------------------------------------------------------
# elementwise and scalar ops


@_register("add")
def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


@_register("sub")
def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


@_register("mul")
def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


@_register("div")
def div(a, b):
    # division by zero propagates inf/nan silently; the trainer watches for it
    return _binary(
        "div",
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


@_register("neg")
def neg(t):
    return _unary("neg", t, lambda x: -x, lambda g, x, out: -g)


@_register("relu")
def relu(t):
    return _unary("relu", t, lambda x: np.maximum(x, 0), lambda g, x, out: g * (x > 0))


@_register("leaky_relu")
def leaky_relu(t, slope: float = 0.1):
    slope = float(slope)
    return _unary(
        "leaky_relu",
        t,
        lambda x: np.where(x > 0, x, x * np.asarray(slope, dtype=x.dtype)),
        lambda g, x, out: g * np.where(x > 0, np.asarray(1.0, dtype=x.dtype), np.asarray(slope, dtype=x.dtype)),
    )


def _sigmoid_stable(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_register("sigmoid")
def sigmoid(t):
    return _unary("sigmoid", t, _sigmoid_stable, lambda g, x, out: g * out * (1.0 - out))


@_register("tanh")
def tanh(t):
    return _unary("tanh", t, np.tanh, lambda g, x, out: g * (1.0 - out * out))


@_register("exp")
def exp(t):
    return _unary("exp", t, np.exp, lambda g, x, out: g * out)


@_register("log")
def log(t):
    return _unary("log", t, np.log, lambda g, x, out: g / x)


@_register("sqrt")
def sqrt(t):
    return _unary("sqrt", t, np.sqrt, lambda g, x, out: g / (2.0 * out))


@_register("abs")
def abs_(t):
    return _unary("abs", t, np.abs, lambda g, x, out: g * np.sign(x))


# ---------------------------------------------------------------------------
# reductions (64-bit accumulation)


def _reduce_axes(op, shape, axis):
    if axis is None:
        return tuple(range(len(shape)))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % len(shape) for a in axis)
    if len(set(axes)) != len(axes):
        raise ValueError(f"{op}: repeated axis in {axis}")
    return axes


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = list(in_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


@_register("sum")
def sum_(t, axis=None, keepdims: bool = False):
    x = t.data
    axes = _reduce_axes("sum", x.shape, axis)
    out = np.sum(x, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return (_expand_reduced(g, x.shape, axes, keepdims).astype(x.dtype),)

    return _record("sum", (t,), out, backward)


@_register("mean")
def mean(t, axis=None, keepdims: bool = False):
    x = t.data
    axes = _reduce_axes("mean", x.shape, axis)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ValueError("mean over zero elements")
    out = (np.sum(x, axis=axes, keepdims=keepdims, dtype=np.float64) / count).astype(x.dtype)

    def backward(g):
        return (_expand_reduced(g / count, x.shape, axes, keepdims).astype(x.dtype),)

    return _record("mean", (t,), out, backward)


@_register("logsumexp")
def logsumexp(t, axis=None, keepdims: bool = False):
    """log(sum(exp(x))) with the max-shift trick; shift-invariant by construction."""
    x = t.data
    axes = _reduce_axes("logsumexp", x.shape, axis)
    m = np.max(x, axis=axes, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp((x - m).astype(np.float64))
    s = np.sum(e, axis=axes, keepdims=True)
    out_keep = (np.log(s) + m).astype(x.dtype)
    out = out_keep if keepdims else out_keep.reshape(
        tuple(d for i, d in enumerate(x.shape) if i not in axes)
    )
    soft = (e / s).astype(x.dtype)

    def backward(g):
        gk = g if keepdims else g.reshape(tuple(1 if i in axes else d for i, d in enumerate(x.shape)))
        return (np.broadcast_to(gk, x.shape) * soft,)

    return _record("logsumexp", (t,), out, backward)


@_register("softmax")
def softmax(t, axis: int = -1):
    x = t.data
    ax = axis % x.ndim
    m = np.max(x, axis=ax, keepdims=True)
    e = np.exp((x - m).astype(np.float64))
    out = (e / np.sum(e, axis=ax, keepdims=True)).astype(x.dtype)

    def backward(g):
        inner = np.sum((g * out).astype(np.float64), axis=ax, keepdims=True).astype(x.dtype)
        return (out * (g - inner),)

    return _record("softmax", (t,), out, backward)


@_register("l2_normalize")
def l2_normalize(t, axis: int = -1, eps: float = 1e-12):
    """Scale slices along ``axis`` to unit Euclidean norm."""
    x = t.data
    ax = axis % x.ndim
    sq = np.sum((x.astype(np.float64)) ** 2, axis=ax, keepdims=True)
    norm = np.sqrt(np.maximum(sq, eps * eps)).astype(x.dtype)
    out = x / norm

    def backward(g):
        inner = np.sum((g * out).astype(np.float64), axis=ax, keepdims=True).astype(x.dtype)
        return ((g - out * inner) / norm,)

    return _record("l2_normalize", (t,), out, backward)


# ---------------------------------------------------------------------------
# shape ops


@_register("reshape")
def reshape(t, shape):
    x = t.data
    out = x.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (t,), out, backward)


@_register("transpose")
def transpose(t, axes=None):
    x = t.data
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)
    out = np.transpose(x, axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _record("transpose", (t,), out, backward)


@_register("slice")
def slice_(t, idx):
    """Basic indexing only (ints, slices, tuples thereof); no index arrays."""
    x = t.data
    out = x[idx]

    def backward(g):
        dx = np.zeros_like(x)
        dx[idx] = g
        return (dx,)

    return _record("slice", (t,), out, backward)


@_register("concat")
def concat(tensors: Iterable[Tensor], axis: int = 0):
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of an empty sequence")
    ax = axis % ts[0].data.ndim
    base = list(ts[0].data.shape)
    for t in ts[1:]:
        s = list(t.data.shape)
        if len(s) != len(base) or any(s[i] != base[i] for i in range(len(s)) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
        _check_same_dtype("concat", ts[0], t)
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.data.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(ts))
        )

    return _record("concat", tuple(ts), out, backward)


@_register("tile_rows")
def tile_rows(t, n: int):
    """Repeat a vector (D,) into (n, D) rows."""
    x = t.data
    if x.ndim != 1:
        raise ShapeError("tile_rows", x.shape, detail="expected a 1-d tensor")
    out = np.tile(x, (int(n), 1))

    def backward(g):
        return (np.sum(g.astype(np.float64), axis=0).astype(x.dtype),)

    return _record("tile_rows", (t,), out, backward)


@_register("gather_rows")
def gather_rows(t, index):
    """Pick one column per row: out[i] = t[i, index[i]]."""
    x = t.data
    idx = np.asarray(index)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError("gather_rows", x.shape, idx.shape)
    rows = np.arange(x.shape[0])
    out = x[rows, idx]

    def backward(g):
        dx = np.zeros_like(x)
        np.add.at(dx, (rows, idx), g)
        return (dx,)

    return _record("gather_rows", (t,), out, backward)


@_register("pixel_shuffle")
def pixel_shuffle(t, upscale: int = 2):
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r).

    Composed from reshape and transpose, so the gradient falls out of the
    recorded primitive nodes.
    """
    r = int(upscale)
    if t.ndim != 4:
        raise ShapeError("pixel_shuffle", t.shape, detail="expected (N, C, H, W)")
    n, c, h, w = t.shape
    if c % (r * r) != 0:
        raise ShapeError("pixel_shuffle", t.shape, detail=f"channels not divisible by {r * r}")
    co = c // (r * r)
    y = reshape(t, (n, co, r, r, h, w))
    y = transpose(y, (0, 1, 4, 2, 5, 3))
    return reshape(y, (n, co, h * r, w * r))


# ---------------------------------------------------------------------------
# matmul family


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if MATMUL_ACCUM_F64 and a.dtype == np.float32:
        return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    return a @ b


@_register("matmul")
def matmul(a: Tensor, b: Tensor):
    if not (isinstance(a, Tensor) and isinstance(b, Tensor)):
        raise TypeError("matmul expects two Tensors")
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    out = _mm(ad, bd)

    def backward(g):
        return _mm(g, bd.T), _mm(ad.T, g)

    return _record("matmul", (a, b), out, backward)


@_register("linear")
def linear(x: Tensor, w: Tensor, b: Tensor | None = None):
    """Affine map of row vectors: x (N, I) @ w (O, I)^T + b (O,)."""
    _check_same_dtype("linear", x, w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError("linear", xd.shape, wd.shape)
    out = _mm(xd, wd.T)
    if b is not None:
        _check_same_dtype("linear", x, b)
        if b.data.shape != (wd.shape[0],):
            raise ShapeError("linear", b.data.shape, (wd.shape[0],))
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        dx = _mm(g, wd)
        dw = _mm(g.T, xd)
        if b is None:
            return dx, dw
        db = np.sum(g.astype(np.float64), axis=0).astype(xd.dtype)
        return dx, dw, db

    return _record("linear", inputs, out, backward)


# ---------------------------------------------------------------------------
# convolution and pooling


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, oh, ow, c, kh, kw),
        strides=(s0, s2 * sh, s3 * sw, s1, s2, s3),
        writeable=False,
    )
    return win.reshape(n * oh * ow, c * kh * kw)


def _col2im(dcols, xp_shape, kh, kw, sh, sw, oh, ow):
    n, c, _, _ = xp_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dwin = dcols.reshape(n, oh, ow, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += (
                dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp


@_register("conv2d")
def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0):
    """2-d cross-correlation over (N, C, H, W) via patch gather plus matmul.

    The backward pass rebuilds the patch matrix from the saved input instead
    of keeping it alive, trading a re-gather for a large memory saving.
    """
    _check_same_dtype("conv2d", x, w)
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeError("conv2d", xd.shape, wd.shape)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wid = xd.shape
    f, _, kh, kw = wd.shape
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wid + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", xd.shape, wd.shape, detail="kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wmat = wd.reshape(f, c * kh * kw)
    out2 = _mm(cols, wmat.T)
    if b is not None:
        _check_same_dtype("conv2d", x, b)
        if b.data.shape != (f,):
            raise ShapeError("conv2d", b.data.shape, (f,))
        out2 = out2 + b.data
    out = out2.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        cols_b = _im2col(xp, kh, kw, sh, sw, oh, ow)
        dw = _mm(gmat.T, cols_b).reshape(wd.shape)
        dcols = _mm(gmat, wmat)
        dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, oh, ow)
        dx = dxp[:, :, ph : ph + h, pw : pw + wid] if (ph or pw) else dxp
        if b is None:
            return dx, dw
        db = np.sum(gmat.astype(np.float64), axis=0).astype(xd.dtype)
        return dx, dw, db

    return _record("conv2d", inputs, out, backward)


def _pool_windows(xd, kh, kw, sh, sw):
    n, c, h, w = xd.shape
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError("pool", xd.shape, detail=f"window ({kh},{kw}) larger than input")
    s0, s1, s2, s3 = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * sh, s3 * sw, s2, s3),
        writeable=False,
    )
    return win, oh, ow


@_register("maxpool2d")
def maxpool2d(x: Tensor, kernel, stride=None):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("maxpool2d", xd.shape, detail="expected (N, C, H, W)")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    win, oh, ow = _pool_windows(xd, kh, kw, sh, sw)
    flat = win.reshape(*win.shape[:4], kh * kw)
    am = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    n, c = xd.shape[:2]

    def backward(g):
        dx = np.zeros_like(xd)
        ni, ci, oi, oj = np.indices((n, c, oh, ow))
        rows = oi * sh + am // kw
        cols = oj * sw + am % kw
        np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return _record("maxpool2d", (x,), out, backward)


@_register("avgpool2d")
def avgpool2d(x: Tensor, kernel, stride=None):
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("avgpool2d", xd.shape, detail="expected (N, C, H, W)")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    win, oh, ow = _pool_windows(xd, kh, kw, sh, sw)
    out = np.mean(win.reshape(*win.shape[:4], kh * kw).astype(np.float64), axis=-1).astype(xd.dtype)
    inv = 1.0 / (kh * kw)

    def backward(g):
        dx = np.zeros_like(xd)
        gs = (g * np.asarray(inv, dtype=xd.dtype))
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += gs
        return (dx,)

    return _record("avgpool2d", (x,), out, backward)


@_register("scale_channels")
def scale_channels(x: Tensor, gain: Tensor, bias: Tensor):
    """Per-channel affine y = x * gain[c] + bias[c] on (N, C, H, W)."""
    _check_same_dtype("scale_channels", x, gain)
    _check_same_dtype("scale_channels", x, bias)
    xd = x.data
    if xd.ndim != 4 or gain.data.shape != (xd.shape[1],) or bias.data.shape != (xd.shape[1],):
        raise ShapeError("scale_channels", xd.shape, gain.data.shape, bias.data.shape)
    gd = gain.data.reshape(1, -1, 1, 1)
    out = xd * gd + bias.data.reshape(1, -1, 1, 1)

    def backward(g):
        dx = g * gd
        dgain = np.sum((g * xd).astype(np.float64), axis=(0, 2, 3)).astype(xd.dtype)
        dbias = np.sum(g.astype(np.float64), axis=(0, 2, 3)).astype(xd.dtype)
        return dx, dgain, dbias

    return _record("scale_channels", (x, gain, bias), out, backward)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[Tensor], Tensor], point: Tensor, eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must map one tensor to a scalar tensor and be deterministic.  The
    error at coordinate i is |a_i - n_i| / max(1, |a_i|, |n_i|); any NaN in
    either gradient makes the result inf.  Run on float64 points: float32
    rounding alone exceeds useful tolerances.
    """
    x = Tensor(np.array(point.data, copy=True), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("grad_check requires fn to return a scalar tensor")
        tape.backward(out)
    analytic = (
        x.grad.reshape(-1).astype(np.float64)
        if x.grad is not None
        else np.zeros(x.data.size, dtype=np.float64)
    )

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(analytic)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = float(fn(Tensor(x.data.copy())).data.reshape(()))
        flat[i] = saved - eps
        f_minus = float(fn(Tensor(x.data.copy())).data.reshape(()))
        flat[i] = saved
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    if np.any(np.isnan(analytic)) or np.any(np.isnan(numeric)):
        return float("inf")
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


# ---------------------------------------------------------------------------
# serialization: magic "ITNS", u8 rank, u32 little-endian dims, f32 payload

_MAGIC = b"ITNS"


def tensor_to_bytes(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank exceeds the u8 header field")
    header = _MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, bytes consumed)."""
    if buf[offset : offset + 4] != _MAGIC:
        raise ValueError(f"bad magic at offset {offset}: expected {_MAGIC!r}")
    rank = buf[offset + 4]
    pos = offset + 5
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    nbytes = 4 * count
    if pos + nbytes > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, (pos + nbytes) - offset


def save_tensor(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(arr))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        buf = f.read()
    arr, used = tensor_from_bytes(buf, 0)
    if used != len(buf):
        raise ValueError(f"{path}: trailing bytes after tensor record")
    return Tensor(arr)
