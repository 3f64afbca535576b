"""Dense float64 tensors with reverse-mode automatic differentiation.

Every backward rule is itself written in terms of differentiable tensor
operations, so gradients can be differentiated again (``create_graph=True``).
That is what the gradient penalty needs.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

LEAKY_SLOPE = 0.1

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def grad_mode(enabled: bool):
    prev = _grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return grad_mode(False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.base is not None or not arr.flags.c_contiguous:
            arr = arr.copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        self.data = arr
        self.grad: Optional[Tensor] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# -- broadcasting helpers --------------------------------------------------

def _reduced_axes(src_shape: tuple, dst_shape: tuple) -> tuple:
    lead = len(src_shape) - len(dst_shape)
    axes = list(range(lead))
    for i, d in enumerate(dst_shape):
        if d == 1 and src_shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum a broadcast tensor back down to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes = _reduced_axes(x.shape, shape)
    data = x.data.sum(axis=axes).reshape(shape)
    return _make(data, (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    return _make(data, (x,), lambda g: (sum_to(g, x.shape),), "broadcast_to")


def _bshape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def back(g):
        ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape(a, b)

    def back(g):
        ga = sum_to(div(g, b), a.shape) if a.requires_grad else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data / b.data, (a, b), back, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(p, power(a, p - 1.0))),), "pow")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (mul(g, mul(2.0, a)),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)

    def back(g):
        return (div(g, mul(2.0, out)),)

    out = _make(np.sqrt(a.data), (a,), back, "sqrt")
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, out),), "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


# -- nonlinearities ----------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(a.data * mask.data, (a,), lambda g: (mul(g, mask),), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = Tensor(np.where(a.data > 0, 1.0, slope))
    return _make(a.data * scale.data, (a,), lambda g: (mul(g, scale),), "leaky_relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), (a,), lambda g: (mul(g, sub(1.0, square(out))),), "tanh")
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(_sigmoid_np(a.data), (a,), lambda g: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    return _make(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    z = sub(a, shift)
    return sub(z, log(tsum(exp(z), axis=axis, keepdims=True)))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis))


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kshape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def back(g):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _make(data, (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table with {n} rows")
    return _make(table.data[idx], (table,), lambda g: (scatter_rows(g, idx, n),), "take_rows")


def scatter_rows(src, idx, num_rows: int) -> Tensor:
    """Adjoint of take_rows: add each row of ``src`` into row ``idx[i]``."""
    src = as_tensor(src)
    out = np.zeros((num_rows,) + src.shape[1:])
    np.add.at(out, idx, src.data)
    return _make(out, (src,), lambda g: (take_rows(g, idx),), "scatter_rows")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def back(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), back, "matmul")


# -- convolution ---------------------------------------------------------------

def _same_pads(size: int, k: int, stride: int) -> tuple:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _conv_geometry(shape, kh, kw, stride, padding):
    _, h, w, _ = shape
    if padding == "same":
        ph, pw = _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    elif padding == "valid":
        ph, pw = (0, 0), (0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    hp, wp = h + sum(ph), w + sum(pw)
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    return ph, pw, ho, wo


def im2col(x, kh: int, kw: int, stride: int, ph: tuple, pw: tuple) -> Tensor:
    """Patches of an NHWC tensor as (N, Ho, Wo, kh*kw*C), ordered (kh, kw, C)."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    xp = np.pad(x.data, ((0, 0), ph, pw, (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n, ho, wo, kh * kw * c)
    return _make(cols, (x,), lambda g: (col2im(g, x.shape, kh, kw, stride, ph, pw),), "im2col")


def col2im(cols, in_shape, kh: int, kw: int, stride: int, ph: tuple, pw: tuple) -> Tensor:
    """Adjoint of im2col: scatter-add patches back onto the input grid."""
    cols = as_tensor(cols)
    n, h, w, c = in_shape
    _, ho, wo, _ = cols.shape
    blocks = cols.data.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + sum(ph), w + sum(pw), c))
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += blocks[:, :, :, i, j, :]
    out = out[:, ph[0]:ph[0] + h, pw[0]:pw[0] + w, :]
    return _make(out, (cols,), lambda g: (im2col(g, kh, kw, stride, ph, pw),), "col2im")


def conv2d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of NHWC input with an (kh, kw, C, C') kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input and 4-d kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ph, pw, ho, wo = _conv_geometry(x.shape, kh, kw, stride, padding)
    n = x.shape[0]
    if kh == 1 and kw == 1 and stride == 1:
        cols = reshape(x, (n * ho * wo, cin))
    else:
        cols = reshape(im2col(x, kh, kw, stride, ph, pw), (n * ho * wo, kh * kw * cin))
    out = matmul(cols, reshape(kernel, (kh * kw * cin, cout)))
    return reshape(out, (n, ho, wo, cout))


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects NHWC input, got {x.shape}")
    if factor == 1:
        return x
    n, h, w, c = x.shape
    y = broadcast_to(reshape(x, (n, h, 1, w, 1, c)), (n, h, factor, w, factor, c))
    return reshape(y, (n, h * factor, w * factor, c))


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    return mean(reshape(x, (n, h // 2, 2, w // 2, 2, c)), axis=(2, 4))


def global_sum_pool(x) -> Tensor:
    return tsum(x, axis=(1, 2))


def batch_moments(x, axes) -> tuple:
    """Per-feature mean and biased variance over ``axes`` (kept as size-1 dims)."""
    x = as_tensor(x)
    axes = _norm_axes(axes, x.ndim)
    if not axes or any(x.shape[a] == 0 for a in axes):
        raise ValueError("batch_moments needs a non-empty reduction")
    mu = mean(x, axes, keepdims=True)
    var = mean(square(sub(x, mu)), axes, keepdims=True)
    return mu, var


# -- differentiation ---------------------------------------------------------

def _topo_order(roots: Iterable[Tensor]) -> list:
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(root: Tensor, seed: Tensor, create_graph: bool) -> tuple:
    order = _topo_order([root])
    grads = {id(root): seed}
    with grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    return order, grads


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list:
    """Gradients of ``output`` w.r.t. ``inputs`` without touching ``.grad``.

    Inputs that do not influence the output get zero gradients.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"grad of non-scalar output {output.shape} needs grad_output")
        grad_output = Tensor(np.ones(output.shape))
    seed = as_tensor(grad_output)
    if not output.requires_grad:
        return [Tensor(np.zeros(t.shape)) for t in inputs]
    _, grads = _propagate(output, seed, create_graph)
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(Tensor(np.zeros(t.shape)) if g is None else (g if create_graph else g.detach()))
    return result


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every reachable node."""
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order, grads = _propagate(root, Tensor(np.ones(root.shape)), False)
    for node in order:
        g = grads.get(id(node))
        if g is None:
            continue
        node.grad = g.detach() if node.grad is None else Tensor(node.grad.data + g.data)
