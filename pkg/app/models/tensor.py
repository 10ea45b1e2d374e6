"""
Tensor engine
Dense float64 tensors with a reverse-mode gradient tape.

Every op builds its output from numpy arrays and, when any input tracks
gradients, records its parents and a closure mapping the output gradient to
one gradient per parent. ``backward`` walks the recorded graph once in reverse
topological order, writes leaf ``grad`` arrays and then releases the graph; a
released graph cannot be differentiated or extended again, and a leaf still
holding a gradient from an earlier backward must be reset first.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import ContractError, DimensionError, NumericError

_state = threading.local()

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Run ops without recording them (inference)"""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._released = False
        self.op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Named learnable tensor"""

    __slots__ = ("name",)

    def __init__(self, name: str, data, requires_grad: bool = True):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.op = "param"

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_live(*tensors: Tensor):
    for t in tensors:
        if t._released:
            raise ContractError(f"tensor produced by '{t.op}' belongs to a released graph")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    _check_live(*parents)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.requires_grad = False
    out.grad = None
    out._parents = ()
    out._backward = None
    out._released = False
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(name: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{name} needs equal shapes", a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may be a bias vector matching ``a``'s last axis"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    raise DimensionError("add needs equal shapes or a row bias", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _make(a.data + float(value), (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = _stable_sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    return _make(out, (a,), lambda g: (g * _stable_sigmoid(-ad),), "log_sigmoid")


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    ad = a.data
    if exponent == 0.0:
        return _make(np.ones_like(ad), (a,), lambda g: (np.zeros_like(g),), "pow")
    return _make(ad ** exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),), "pow")


def smooth_l1(a: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style smooth L1 distance to a constant target"""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != a.shape:
        raise DimensionError("smooth_l1 target shape", a.shape, target.shape)
    diff = a.data - target
    absd = np.abs(diff)
    quad = absd < beta
    out = np.where(quad, 0.5 * diff * diff / beta, absd - 0.5 * beta)
    slope = np.where(quad, diff / beta, np.sign(diff))
    return _make(out, (a,), lambda g: (g * slope,), "smooth_l1")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner dimensions disagree", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def fc_layer(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map x @ w + b"""
    if b.data.ndim != 1 or w.data.ndim != 2 or b.shape[0] != w.shape[1]:
        raise DimensionError("fc_layer bias does not match weight", w.shape, b.shape)
    return add(matmul(x, w), b)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError("transpose needs a matrix", a.shape)
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("reshape changes element count", a.shape, shape)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis"""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of nothing")
    lead = tensors[0].shape[:-1]
    for t in tensors:
        if t.shape[:-1] != lead:
            raise DimensionError("concat leading dimensions disagree", tensors[0].shape, t.shape)
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + widths)

    def _backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=-1), tensors, _backward, "concat")


def gather_rows(a: Tensor, index: Sequence[int]) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    src_shape = a.shape

    def _backward(g):
        out = np.zeros(src_shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), _backward, "gather_rows")


def sum_all(a: Tensor) -> Tensor:
    src = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    src, n = a.shape, max(1, a.size)
    return _make(np.array(a.data.mean() if a.size else 0.0), (a,),
                 lambda g: (np.broadcast_to(g / n, src).copy(),), "mean")


def sum_rows(a: Tensor) -> Tensor:
    """Sum over the last axis of a matrix"""
    if a.data.ndim != 2:
        raise DimensionError("sum_rows needs a matrix", a.shape)
    cols = a.shape[1]
    return _make(a.data.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], cols, axis=1),), "sum_rows")


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("softmax_rows needs a matrix", x.shape)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows received NaN")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), _backward, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError("log_softmax_rows needs a matrix", x.shape)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax_rows received NaN")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), _backward, "log_softmax_rows")


def weighted_softmax_rows(a: Tensor, u: Tensor) -> Tensor:
    """
    Row-wise softmax of ``a`` reweighted by nonnegative ``u``:
    W_ij = u_ij exp(a_ij - max_i) / sum_k u_ik exp(a_ik - max_i).
    Rows whose weights are all zero produce a zero row.
    """
    _same_shape("weighted_softmax_rows", a, u)
    if a.data.ndim != 2:
        raise DimensionError("weighted_softmax_rows needs matrices", a.shape)
    if np.isnan(a.data).any() or np.isnan(u.data).any():
        raise NumericError("weighted_softmax_rows received NaN")
    if (u.data < 0).any():
        raise NumericError("weighted_softmax_rows needs nonnegative weights")
    base = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    e = u.data * base
    s = e.sum(axis=1, keepdims=True)
    live = s > 0
    safe = np.where(live, s, 1.0)
    out = np.where(live, e / safe, 0.0)

    def _backward(g):
        centred = (g - (g * out).sum(axis=1, keepdims=True)) * live
        return (out * centred, base / safe * centred)

    return _make(out, (a, u), _backward, "weighted_softmax_rows")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col_index(channels: int, height: int, width: int, kernel: int, stride: int, padding: int):
    out_h = (height + 2 * padding - kernel) // stride + 1
    out_w = (width + 2 * padding - kernel) // stride + 1
    i0 = np.tile(np.repeat(np.arange(kernel), kernel), channels)
    j0 = np.tile(np.arange(kernel), kernel * channels)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    rows = i0[:, None] + i1[None, :]
    cols = j0[:, None] + j1[None, :]
    chans = np.repeat(np.arange(channels), kernel * kernel)[:, None]
    return chans, rows, cols, out_h, out_w


def conv2d(x: Tensor, w: Tensor, b: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2D convolution of a (C, H, W) map.
    ``w`` is (C_out, C * kernel * kernel), ``b`` is (C_out,); output is (C_out, H', W').
    """
    if x.data.ndim != 3:
        raise DimensionError("conv2d needs a (C, H, W) input", x.shape)
    channels, height, width = x.shape
    c_out = w.shape[0]
    if w.data.ndim != 2 or w.shape[1] != channels * kernel * kernel:
        raise DimensionError("conv2d weight does not match input channels", x.shape, w.shape)
    if b.shape != (c_out,):
        raise DimensionError("conv2d bias does not match output channels", w.shape, b.shape)
    chans, rows, cols, out_h, out_w = _im2col_index(channels, height, width, kernel, stride, padding)
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    columns = padded[chans, rows, cols]
    wd = w.data
    out = (wd @ columns + b.data[:, None]).reshape(c_out, out_h, out_w)

    def _backward(g):
        g2 = g.reshape(c_out, -1)
        grad_cols = wd.T @ g2
        grad_padded = np.zeros_like(padded)
        np.add.at(grad_padded, (chans, rows, cols), grad_cols)
        grad_x = grad_padded[:, padding:padding + height, padding:padding + width]
        return grad_x, g2 @ columns.T, g2.sum(axis=1)

    return _make(out, (x, w, b), _backward, "conv2d")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> list:
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def tracked_leaves(root: Tensor) -> list:
    """Leaves reachable from ``root`` that accumulate gradients"""
    return [n for n in _topological_order(root) if n.is_leaf and n.requires_grad]


def backward(loss: Tensor):
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf that tracks gradients,
    then release the graph. Every reachable leaf must start with ``grad`` unset.
    """
    if loss._released:
        raise ContractError("backward called twice on the same graph; rebuild it after zero_grad")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tracked tensor")
    order = _topological_order(loss)
    stale = [n for n in order if n.is_leaf and n.requires_grad and n.grad is not None]
    if stale:
        names = ", ".join(getattr(n, "name", "tensor") for n in stale[:3])
        raise ContractError(f"backward without a grad reset: {len(stale)} leaves hold gradients ({names})")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad and g is not None:
                node.grad = g.copy()
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._released = True


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None
