"""Dense-tensor engine with reverse-mode automatic differentiation.

The tape is rebuilt on every forward pass (define-by-run): each produced
tensor holds its parents and a backward closure, and ``backward`` walks the
graph in reverse topological order exactly once. Default precision is
float64; float32 can be selected for training/inference speed via
``precision`` (finite-difference checks are unreliable in float32).
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_STRICT_NONFINITE = False
_MATMUL_MACS = None  # active accumulator dict while count_macs() is open

_node_counter = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an op receives NaN or Inf input."""


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily set the dtype used for newly created leaf tensors."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def strict_nonfinite():
    """Raise NonFiniteError when any op input contains NaN/Inf."""
    global _STRICT_NONFINITE
    prev = _STRICT_NONFINITE
    _STRICT_NONFINITE = True
    try:
        yield
    finally:
        _STRICT_NONFINITE = prev


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulate counts of matmul-like ops.

    Yields a single-entry dict {"macs": int} updated in place.
    """
    global _MATMUL_MACS
    prev = _MATMUL_MACS
    counter = {"macs": 0}
    _MATMUL_MACS = counter
    try:
        yield counter
    finally:
        _MATMUL_MACS = prev


def _record_macs(n):
    if _MATMUL_MACS is not None:
        _MATMUL_MACS["macs"] += int(n)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the one RNG used across modules."""
    return np.random.Generator(np.random.Philox(seed))


class Tensor:
    """A dense array plus its position in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 op: str | None = None, parents: tuple = (), backward=None):
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(op: str, *arrays):
    if _STRICT_NONFINITE:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input in strict mode")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, dtype=data.dtype, op=op,
                  parents=tuple(parents), backward=backward if req else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op: str, a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    _check_finite(op, a.data, b.data)
    try:
        out = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from exc

    def backward(g):
        ga = _unbroadcast(bwd_a(g, a.data, b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(bwd_b(g, a.data, b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(op, out, (a, b), backward)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def matmul(a, b) -> Tensor:
    """2D or batched matrix product with numpy broadcasting on batch dims."""
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    _check_finite("matmul", a.data, b.data)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = np.matmul(a.data, b.data)
    _record_macs(out.size // out.shape[-1] * a.shape[-1] * out.shape[-1])

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("log", a.data)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("sqrt", a.data)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("sigmoid", a.data)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    _check_finite("relu", a.data)
    out = np.maximum(a.data, 0.0)
    return _make("relu", out, (a,), lambda g: (g * (a.data > 0),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite("softmax", a.data)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make("softmax", out, (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make("slice", out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        expanded.append(reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]))
    return concat(expanded, axis=axis)


def gather(table, flat_index: np.ndarray) -> Tensor:
    """Pick table.ravel()[flat_index]; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(flat_index)
    if idx.size and (idx.min() < 0 or idx.max() >= table.size):
        raise ShapeError(f"gather: index out of range for table of size {table.size}")
    out = table.data.ravel()[idx]

    def backward(g):
        acc = np.bincount(idx.ravel(), weights=g.ravel().astype(np.float64),
                          minlength=table.size)
        return (acc.reshape(table.shape).astype(table.dtype),)

    return _make("gather", out, (table,), backward)


# -- convolution ------------------------------------------------------------

def _conv_out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad):
    b, c, h, w = x_shape
    oh = _conv_out_size(h, kh, stride, pad)
    ow = _conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(b, c, kh, kw, oh, ow)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D convolution: x (B,C,H,W), w (O,C,kh,kw), bias (O,)."""
    x = as_tensor(x)
    w = as_tensor(w, dtype=x.dtype)
    _check_finite("conv2d", x.data, w.data)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shapes {x.shape} and {w.shape} do not conform")
    o, c, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(x.shape[0], o, oh, ow)
    _record_macs(x.shape[0] * o * c * kh * kw * oh * ow)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)

    def backward(g):
        gmat = g.reshape(x.shape[0], o, oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gmat)
            gx = _col2im(dcols, x.shape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = np.einsum("bop,bkp->ok", gmat, cols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make("conv2d", out, tuple(parents), backward)


def conv_transpose2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 2D convolution: x (B,C,H,W), w (C,O,kh,kw), bias (O,).

    Spatial output size is (H-1)*stride - 2*padding + kh.
    """
    x = as_tensor(x)
    w = as_tensor(w, dtype=x.dtype)
    _check_finite("conv_transpose2d", x.data, w.data)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: shapes {x.shape} and {w.shape} do not conform")
    b, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (wd - 1) * stride - 2 * padding + kw
    # forward is the adjoint of conv2d with weight viewed as (C, O*kh*kw)
    wmat = w.data.reshape(c, o * kh * kw)
    xmat = x.data.reshape(b, c, h * wd)
    cols = np.matmul(wmat.T, xmat)
    out = _col2im(cols, (b, o, oh, ow), kh, kw, stride, padding)
    _record_macs(b * c * o * kh * kw * h * wd)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        out = out + bias.data.reshape(1, o, 1, 1)
        parents.append(bias)

    def backward(g):
        gx = gw = gb = None
        gcols, _, _ = _im2col(g, kh, kw, stride, padding)
        if x.requires_grad:
            gx = np.matmul(wmat, gcols).reshape(x.shape)
        if w.requires_grad:
            gw = np.einsum("bcp,bkp->ck", xmat, gcols).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _make("conv_transpose2d", out, tuple(parents), backward)


# -- rectangular-bin average pooling ----------------------------------------

def _bin_matrix(n: int, bins: int, dtype) -> np.ndarray:
    """Row-stochastic (bins, n) averaging matrix over the floor partition.

    Bin i covers cells floor(i*n/bins) .. floor((i+1)*n/bins)-1; when the
    partition leaves a bin empty (n < bins) the nearest lower cell is
    duplicated so every bin stays non-empty.
    """
    m = np.zeros((bins, n), dtype=dtype)
    for i in range(bins):
        s = (i * n) // bins
        e = ((i + 1) * n) // bins
        if e <= s:
            s = min(s, n - 1)
            e = s + 1
        m[i, s:e] = 1.0 / (e - s)
    return m


_BIN_CACHE: dict = {}


def _bin_matrix_cached(n, bins, dtype):
    key = (n, bins, np.dtype(dtype).str)
    got = _BIN_CACHE.get(key)
    if got is None:
        got = _BIN_CACHE[key] = _bin_matrix(n, bins, dtype)
    return got


def avg_pool_bins(x, out_bins: tuple) -> Tensor:
    """Channel-wise average pooling of (n_x, n_y, d) onto a (b_x, b_y) grid."""
    x = as_tensor(x)
    _check_finite("avg_pool_bins", x.data)
    if x.ndim != 3:
        raise ShapeError(f"avg_pool_bins: expected rank-3 input, got shape {x.shape}")
    nx, ny, d = x.shape
    bx, by = out_bins
    ax = _bin_matrix_cached(nx, bx, x.dtype)
    ay = _bin_matrix_cached(ny, by, x.dtype)

    def pool(data, mx, my):
        t = np.tensordot(mx, data, axes=(1, 0))        # (bx, ny, d)
        t = np.tensordot(my, t, axes=(1, 1))           # (by, bx, d)
        return t.swapaxes(0, 1)                        # (bx, by, d)

    out = pool(x.data, ax, ay)
    _record_macs(bx * ny * d + by * bx * d)

    def backward(g):
        return (pool(g, ax.T, ay.T),)

    return _make("avg_pool_bins", out, (x,), backward)


# -- backward pass -----------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into requires_grad ancestors.

    Repeated calls without zero_grad accumulate additively.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = pg.astype(parent.dtype, copy=False)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               rng: np.random.Generator | None = None, max_coords: int = 6,
               refine_threshold: float = 1e-6) -> float:
    """Compare autodiff gradients of scalar f() against central differences.

    Returns the max over sampled coordinates of
    |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|). Raises if f is detected to be
    non-deterministic (two evaluations differ bitwise).

    Coordinates exceeding refine_threshold are re-estimated at eps/10 and the
    smaller error kept: a relu kink straddled by the wider window disappears
    there, while a wrong backward rule stays wrong at every step size.
    """
    rng = rng or make_rng(0)
    v1 = f()
    v2 = f()
    if v1.data.tobytes() != v2.data.tobytes():
        raise RuntimeError("grad_check: f is non-deterministic")

    zero_grads(params)
    out = f()
    backward(out)
    ad_grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def fd_at(flat, c, step):
        orig = flat[c]
        flat[c] = orig + step
        fp = f().item()
        flat[c] = orig - step
        fm = f().item()
        flat[c] = orig
        return (fp - fm) / (2 * step)

    worst = 0.0
    for p, g_ad in zip(params, ad_grads):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            g = g_ad.reshape(-1)[c]
            g_fd = fd_at(flat, c, eps)
            rel = abs(g - g_fd) / max(1e-8, abs(g) + abs(g_fd))
            for shrink in (10.0, 100.0):
                if rel <= refine_threshold:
                    break
                g_fd2 = fd_at(flat, c, eps / shrink)
                rel2 = abs(g - g_fd2) / max(1e-8, abs(g) + abs(g_fd2))
                rel = min(rel, rel2)
            worst = max(worst, rel)
    zero_grads(params)
    return worst


# -- optimizer ---------------------------------------------------------------

class SGD:
    """SGD with momentum: v <- m*v + grad; p <- p - lr*v; grads then zeroed."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
            p.grad = None

    def zero_grad(self):
        zero_grads(self.params)


def sgd_momentum_step(params: Sequence[Tensor], velocities: Sequence[np.ndarray],
                      lr: float, momentum: float) -> None:
    """Functional single step over (param, velocity) pairs."""
    for p, v in zip(params, velocities):
        if p.grad is None:
            continue
        v *= momentum
        v += p.grad
        p.data -= lr * v
        p.grad = None
