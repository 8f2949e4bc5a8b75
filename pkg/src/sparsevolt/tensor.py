"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: float32 storage by default, explicit shapes with no
broadcasting beyond bias addition, and eager graphs recorded through
closure backward functions. Reductions accumulate in float64 regardless
of storage dtype. Graphs built from float64 leaves stay float64 end to
end, which is what the finite-difference checks rely on.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "add",
    "mul",
    "div",
    "scale",
    "matmul",
    "relu",
    "bias_add",
    "conv2d",
    "maxpool2d",
    "avgpool2d",
    "flatten",
    "sum_all",
    "mean_all",
    "cross_entropy",
    "topo_order",
    "sgd_step",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Invalid use of the differentiation graph (backward/step misuse)."""


class Tensor:
    """A dense float array plus its position in the differentiation graph.

    ``data`` is always a contiguous float32 or float64 ndarray with only
    finite values; building a tensor from non-finite data raises. ``grad``
    is allocated lazily by the backward pass and matches ``data``'s shape.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None, *, op: str = "leaf",
                 parents: tuple["Tensor", ...] = ()):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not (isinstance(data, np.ndarray) and data.dtype == np.float64):
            # Only explicit float64 arrays opt into double precision;
            # lists and other dtypes land in the float32 storage default.
            arr = arr.astype(np.float32, copy=False)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {arr.dtype} for op '{op}'")
        if any(extent == 0 for extent in arr.shape):
            raise ShapeError(f"op '{op}' produced an empty tensor with shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor produced by op '{op}'")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._backward_done = False

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
        if self.size != 1:
            raise ShapeError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Run reverse-mode differentiation from this scalar node.

        Visits every ancestor exactly once in reverse topological order.
        A second call from the same node is an error: rebuild the graph
        (re-run the forward pass) instead of reusing it.
        """
        if self.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_done:
            raise GraphError("backward was already run from this node; rebuild the graph before "
                             "differentiating again")
        order = topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.requires_grad and node.grad is not None:
                node._backward_fn(node.grad)
        self._backward_done = True

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_scalar(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return _add_scalar(self, -other)

    def __rsub__(self, other):
        return _add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, op={self.op!r}{flag})"


def topo_order(root: Tensor) -> list[Tensor]:
    """Ancestors of ``root`` (inclusive) with every node after its parents."""
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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


# -- elementwise ops ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data, op="add", parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g)
        out._backward_fn = backward
    return out


def _add_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(a.data + np.asarray(c, dtype=a.data.dtype), op="add_scalar", parents=(a,))
    if out.requires_grad:
        def backward(g):
            _accum(a, g)
        out._backward_fn = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data, op="mul", parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g * b.data)
            if b.requires_grad:
                _accum(b, g * a.data)
        out._backward_fn = backward
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("div", a, b)
    # Division by zero surfaces as the constructor's non-finite check,
    # not as a numpy warning.
    with np.errstate(divide="ignore", invalid="ignore"):
        quotient = a.data / b.data
    out = Tensor(quotient, op="div", parents=(a, b))
    if out.requires_grad:
        inv = 1.0 / b.data
        def backward(g):
            if a.requires_grad:
                _accum(a, g * inv)
            if b.requires_grad:
                _accum(b, -g * out.data * inv)
        out._backward_fn = backward
    return out


def scale(a: Tensor, c) -> Tensor:
    c = float(c)
    out = Tensor(a.data * np.asarray(c, dtype=a.data.dtype), op="scale", parents=(a,))
    if out.requires_grad:
        def backward(g):
            _accum(a, g * np.asarray(c, dtype=a.data.dtype))
        out._backward_fn = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), op="relu", parents=(x,))
    if out.requires_grad:
        # gradient at exactly zero is defined as zero
        mask = x.data > 0
        def backward(g):
            _accum(x, g * mask)
        out._backward_fn = backward
    return out


# -- matmul / dense layers ---------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"matmul: mixed dtypes {a.data.dtype} and {b.data.dtype}")
    # Let the constructor's finite check report overflow instead of numpy.
    with np.errstate(over="ignore", invalid="ignore"):
        product = a.data @ b.data
    out = Tensor(product, op="matmul", parents=(a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accum(a, g @ b.data.T)
            if b.requires_grad:
                _accum(b, a.data.T @ g)
        out._backward_fn = backward
    return out


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature bias: (N, F) + (F,) or (N, C, H, W) + (C,)."""
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be 1-D, got {b.shape}")
    if x.data.dtype != b.data.dtype:
        raise TypeError(f"bias_add: mixed dtypes {x.data.dtype} and {b.data.dtype}")
    if x.ndim == 2 and x.shape[1] == b.shape[0]:
        out_data = x.data + b.data
        reduce_axes: tuple[int, ...] = (0,)
    elif x.ndim == 4 and x.shape[1] == b.shape[0]:
        out_data = x.data + b.data[:, None, None]
        reduce_axes = (0, 2, 3)
    else:
        raise ShapeError(f"bias_add: cannot add bias {b.shape} to input {x.shape}")
    out = Tensor(out_data, op="bias_add", parents=(x, b))
    if out.requires_grad:
        def backward(g):
            if x.requires_grad:
                _accum(x, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=reduce_axes))
        out._backward_fn = backward
    return out


# -- convolution and pooling -------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, h_out, w_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride]
    return cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight channels {w.shape[1]}")
    if x.data.dtype != w.data.dtype:
        raise TypeError(f"conv2d: mixed dtypes {x.data.dtype} and {w.data.dtype}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} with padding {padding} does not fit "
                         f"input {(h, wd)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)
    cols2 = cols.reshape(n, c * kh * kw, h_out * w_out)
    w2 = w.data.reshape(o, c * kh * kw)
    with np.errstate(over="ignore", invalid="ignore"):
        out_data = np.matmul(w2, cols2).reshape(n, o, h_out, w_out)
    out = Tensor(out_data, op="conv2d", parents=(x, w))
    if out.requires_grad:
        def backward(g):
            g2 = g.reshape(n, o, h_out * w_out)
            if w.requires_grad:
                dw = np.matmul(g2, cols2.transpose(0, 2, 1)).sum(axis=0)
                _accum(w, dw.reshape(w.shape))
            if x.requires_grad:
                dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, h_out, w_out)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += dcols[:, :, i, j]
                dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
                _accum(x, dx)
        out._backward_fn = backward
    return out


def _pool_windows(x: Tensor, kernel: int, op: str) -> tuple[np.ndarray, int, int]:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected (N, C, H, W) input, got {x.shape}")
    if kernel < 1:
        raise ValueError(f"{op}: kernel must be positive, got {kernel}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"{op}: spatial dims {(h, w)} not divisible by kernel {kernel}")
    h_out, w_out = h // kernel, w // kernel
    windows = (x.data.reshape(n, c, h_out, kernel, w_out, kernel)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, h_out, w_out, kernel * kernel))
    return windows, h_out, w_out


def maxpool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first window element."""
    windows, h_out, w_out = _pool_windows(x, kernel, "maxpool2d")
    n, c = x.shape[:2]
    idx = windows.argmax(axis=4)
    out_data = np.take_along_axis(windows, idx[..., None], axis=4)[..., 0]
    out = Tensor(out_data, op="maxpool2d", parents=(x,))
    if out.requires_grad:
        def backward(g):
            gwin = np.zeros_like(windows)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=4)
            dx = (gwin.reshape(n, c, h_out, w_out, kernel, kernel)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(x.shape))
            _accum(x, dx)
        out._backward_fn = backward
    return out


def avgpool2d(x: Tensor, kernel: int) -> Tensor:
    windows, h_out, w_out = _pool_windows(x, kernel, "avgpool2d")
    n, c = x.shape[:2]
    out = Tensor(windows.mean(axis=4), op="avgpool2d", parents=(x,))
    if out.requires_grad:
        inv = 1.0 / (kernel * kernel)
        def backward(g):
            gwin = np.broadcast_to((g * inv)[..., None], windows.shape)
            dx = (gwin.reshape(n, c, h_out, w_out, kernel, kernel)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(x.shape))
            _accum(x, dx)
        out._backward_fn = backward
    return out


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    if x.ndim < 2:
        raise ShapeError(f"flatten: expected at least 2-D input, got {x.shape}")
    n = x.shape[0]
    out = Tensor(x.data.reshape(n, -1).copy(), op="flatten", parents=(x,))
    if out.requires_grad:
        def backward(g):
            _accum(x, g.reshape(x.shape))
        out._backward_fn = backward
    return out


# -- reductions and loss ------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64)
    out = Tensor(np.asarray(total).astype(x.data.dtype), op="sum", parents=(x,))
    if out.requires_grad:
        def backward(g):
            _accum(x, np.full_like(x.data, g.reshape(())))
        out._backward_fn = backward
    return out


def mean_all(x: Tensor) -> Tensor:
    total = np.mean(x.data, dtype=np.float64)
    out = Tensor(np.asarray(total).astype(x.data.dtype), op="mean", parents=(x,))
    if out.requires_grad:
        inv = 1.0 / x.size
        def backward(g):
            _accum(x, np.full_like(x.data, g.reshape(()) * inv))
        out._backward_fn = backward
    return out


def cross_entropy(logits: Tensor, labels, masked_class: int | None = None) -> Tensor:
    """Mean cross-entropy over a batch of logits with integer labels.

    ``masked_class`` removes one logit column from the softmax entirely
    (the minus-infinity convention); labels may not name that column.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, C) logits, got {logits.shape}")
    y = np.asarray(labels)
    n, c = logits.shape
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"cross_entropy: labels shape {y.shape} does not match batch {n}")
    if not np.issubdtype(y.dtype, np.integer):
        raise TypeError(f"cross_entropy: labels must be integers, got dtype {y.dtype}")
    if masked_class is not None and not 0 <= masked_class < c:
        raise ValueError(f"cross_entropy: masked_class {masked_class} outside head width {c}")
    bad = (y < 0) | (y >= c)
    if masked_class is not None:
        bad |= y == masked_class
    if np.any(bad):
        raise ValueError(f"cross_entropy: labels {sorted(set(y[bad].tolist()))} outside the "
                         f"usable head range (width {c}, masked {masked_class})")
    z = logits.data.astype(np.float64)
    if masked_class is not None:
        z[:, masked_class] = -np.inf
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    value = -logp[np.arange(n), y].mean()
    out = Tensor(np.asarray(value).astype(logits.data.dtype), op="cross_entropy", parents=(logits,))
    if out.requires_grad:
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        def backward(g):
            gl = (probs - onehot) * (float(g.reshape(())) / n)
            _accum(logits, gl.astype(logits.data.dtype))
        out._backward_fn = backward
    return out


# -- optimisation and verification -------------------------------------


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place p <- p - lr * p.grad for every parameter, then zero grads."""
    if lr < 0:
        raise ValueError(f"sgd_step: negative learning rate {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GraphError(f"sgd_step: parameter with shape {p.shape} has no gradient; "
                             "run backward first")
    for p in params:
        p.data -= np.asarray(lr, dtype=p.data.dtype) * p.grad
        p.grad[...] = 0
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("sgd_step: parameter update produced non-finite values")


def grad_check(fn: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error between backward and central finite differences.

    Per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    Run on float64 tensors; float32 forward noise can exceed tight tolerances.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    previous = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = fn(x)
    if out.size != 1:
        raise GraphError(f"grad_check: fn must return a scalar, got shape {out.shape}")
    out.backward()
    analytic = (np.zeros_like(x.data) if x.grad is None else x.grad.copy()).astype(np.float64).ravel()
    x.requires_grad = previous
    x.grad = None
    flat = x.data.ravel()
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        values = []
        for delta in (step, -step):
            bumped = flat.copy()
            bumped[i] += delta
            probe = Tensor(bumped.reshape(x.shape), dtype=x.data.dtype)
            values.append(float(fn(probe).data.reshape(())))
        numeric[i] = (values[0] - values[1]) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
