"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive records its parents and a closure mapping the
output gradient to parent gradients.  Nodes carry a monotonically increasing
creation index, so the tape is the set of nodes reachable from the loss sorted
by that index; ``backward`` walks it in reverse construction order.

Precision is a process-wide setting (``set_default_dtype`` / ``precision``):
float32 for training runs, float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tensor", "DimensionError", "backward", "no_grad", "precision",
    "set_default_dtype", "get_default_dtype", "as_tensor",
    "add", "mul", "relu", "conv2d", "maxpool2d", "nearest_upsample",
    "global_avg_pool", "linear", "softmax", "log_softmax", "cross_entropy",
    "smooth_l1", "weighted_sum", "flatten", "amin", "sqrt", "collect_tape", "avg_pool2d",
]

_DEFAULT_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_counter = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point precision."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return constant tensors."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """An n-dimensional array that optionally tracks gradients.

    ``grad`` is ``None`` until a backward pass reaches the tensor; afterwards it
    has the same shape as ``data`` and further passes add into it.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._index = next(_counter)
        self.name: str | None = None

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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _raise_nonscalar(t: Tensor):
    raise ValueError(f"only size-1 tensors convert to scalars, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Iterable[Tensor], fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = fn
    return out


# -- tape ---------------------------------------------------------------------
def collect_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that take part in differentiation,
    in construction order."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda t: t._index)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(collect_tape(loss)):
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


# -- elementwise --------------------------------------------------------------
def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = b

        def fn_const(g):
            return (g * c,)

        return _make(a.data * c, (a,), fn_const)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), fn)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data

    def fn(g):
        return (g * exponent * ad ** (exponent - 1),)

    return _make(ad ** exponent, (a,), fn)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def fn(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def fn(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), fn)


# -- structural ---------------------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def fn(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), fn)


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(x.data[index]), (x,), fn)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amin(x: Tensor) -> Tensor:
    """Minimum over all entries; the gradient goes to the first minimiser."""
    flat = x.data.reshape(-1)
    idx = int(np.argmin(flat))
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(flat.shape, dtype=dtype)
        full[idx] = g.reshape(-1)[0]
        return (full.reshape(shape),)

    return _make(np.asarray(flat[idx]), (x,), fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner axes differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input features (axis 1) = {x.shape[-1]} but weight in-features (axis 1) = {weight.shape[-1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def fn(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _make(out, parents, fn)


def weighted_sum(weights: Tensor, items: Sequence[Tensor]) -> Tensor:
    """``sum_j weights[j] * items[j]`` for a 1-D ``weights`` vector."""
    if weights.ndim != 1 or weights.shape[0] != len(items):
        raise DimensionError(f"weighted_sum: {weights.shape} weights for {len(items)} items")
    shape = items[0].shape
    for j, t in enumerate(items):
        if t.shape != shape:
            raise DimensionError(f"weighted_sum: item {j} has shape {t.shape}, expected {shape}")
    wd = weights.data
    out = np.zeros(shape, dtype=items[0].dtype)
    for w, t in zip(wd, items):
        out += w * t.data
    datas = [t.data for t in items]

    def fn(g):
        gw = None
        if weights.requires_grad:
            gw = np.array([np.vdot(g, d) for d in datas], dtype=wd.dtype)
        return (gw, *[g * w if t.requires_grad else None for w, t in zip(wd, items)])

    return _make(out, (weights, *items), fn)


# -- softmax & losses ---------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class ids."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    logp = log_softmax(logits, axis=1)
    picked = getitem(logp, (np.arange(n), labels))
    return mul(tsum(picked), -1.0 / n)


def smooth_l1(pred: Tensor, target, reduction: str = "none") -> Tensor:
    """Huber-style loss with unit transition: 0.5 d^2 for |d| < 1, |d| - 0.5 beyond."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"smooth_l1: pred {pred.shape} vs target {target.shape}")
    d = pred.data - target
    ad = np.abs(d)
    small = ad < 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5)

    def fn(g):
        return (g * np.where(small, d, np.sign(d)),)

    res = _make(out, (pred,), fn)
    if reduction == "none":
        return res
    if reduction == "sum":
        return tsum(res)
    if reduction == "mean":
        return tmean(res)
    raise ValueError(f"unknown reduction {reduction!r}")


# -- spatial ops --------------------------------------------------------------
def _out_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation, NCHW input, (Cout, Cin/groups, K, K) weight."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d: input must be NCHW, got {x.ndim} axes {x.shape}")
    if w.ndim != 4:
        raise DimensionError(f"conv2d: weight must be (Cout, Cin/groups, K, K), got {w.shape}")
    n, c, h, wd_ = x.shape
    cout, cg, kh, kw = w.shape
    if c % groups:
        raise DimensionError(f"conv2d: input channels (axis 1) = {c} not divisible by groups={groups}")
    if cg * groups != c:
        raise DimensionError(
            f"conv2d: input channels (axis 1) = {c} but weight axis 1 = {cg} with groups={groups}")
    if cout % groups:
        raise DimensionError(f"conv2d: output channels (weight axis 0) = {cout} not divisible by groups={groups}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    eff_h, eff_w = dilation * (kh - 1) + 1, dilation * (kw - 1) + 1
    if eff_h > h + 2 * padding or eff_w > wd_ + 2 * padding:
        raise DimensionError(
            f"conv2d: effective kernel {eff_h}x{eff_w} exceeds padded input (axes 2,3) "
            f"{h + 2 * padding}x{wd_ + 2 * padding}")
    ho = _out_extent(h, kh, stride, padding, dilation)
    wo = _out_extent(wd_, kw, stride, padding, dilation)
    xd, wdat = x.data, w.data
    if padding:
        xp = np.zeros((n, c, h + 2 * padding, wd_ + 2 * padding), dtype=xd.dtype)
        xp[:, :, padding:padding + h, padding:padding + wd_] = xd
    else:
        xp = xd
    og = cout // groups

    def window(arr, i, j):
        r0, c0 = i * dilation, j * dilation
        return arr[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]

    depthwise = cg == 1 and og == 1
    pointwise = kh == 1 and kw == 1 and stride == 1 and groups == 1

    cols = None
    if depthwise and _kernels.AVAILABLE and kh == kw:
        out = _kernels.depthwise_forward(xp, wdat[:, 0], stride, dilation, ho, wo)
    elif depthwise:
        out = np.zeros((n, cout, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                out += window(xp, i, j) * wdat[None, :, 0, i, j, None, None]
    elif pointwise:
        out = np.matmul(wdat[:, :, 0, 0], xp.reshape(n, c, h * wd_)).reshape(n, cout, ho, wo)
    else:
        # cols: (n, groups, cg*kh*kw, ho*wo)
        cols = np.empty((n, c, kh, kw, ho, wo), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = window(xp, i, j)
        cols = cols.reshape(n, groups, cg * kh * kw, ho * wo)
        wmat = wdat.reshape(groups, og, cg * kh * kw)
        out = np.stack([np.einsum("ok,nkp->nop", wmat[gi], cols[:, gi], optimize=True)
                        for gi in range(groups)], axis=1).reshape(n, cout, ho, wo)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def fn(g):
        gx = gw = gb = None
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if depthwise and _kernels.AVAILABLE and kh == kw:
            gx, gw3 = _kernels.depthwise_backward(xp, wdat[:, 0], g, stride, dilation,
                                                  x.requires_grad, w.requires_grad)
            if gw3 is not None:
                gw = gw3[:, None]
        elif depthwise:
            if w.requires_grad:
                gw = np.zeros_like(wdat)
                for i in range(kh):
                    for j in range(kw):
                        gw[:, 0, i, j] = (window(xp, i, j) * g).sum(axis=(0, 2, 3))
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j)[...] += g * wdat[None, :, 0, i, j, None, None]
                gx = gxp
        elif pointwise:
            g3 = g.reshape(n, cout, ho * wo)
            if w.requires_grad:
                gw = np.matmul(g3, xp.reshape(n, c, h * wd_).transpose(0, 2, 1)).sum(axis=0)[:, :, None, None]
            if x.requires_grad:
                gx = np.matmul(wdat[:, :, 0, 0].T, g3).reshape(n, c, h, wd_)
        else:
            gr = g.reshape(n, groups, og, ho * wo)
            wmat = wdat.reshape(groups, og, cg * kh * kw)
            if w.requires_grad:
                gw = np.stack([np.einsum("nop,nkp->ok", gr[:, gi], cols[:, gi], optimize=True)
                               for gi in range(groups)]).reshape(wdat.shape)
            if x.requires_grad:
                gcols = np.stack([np.einsum("nop,ok->nkp", gr[:, gi], wmat[gi], optimize=True)
                                  for gi in range(groups)], axis=1)
                gcols = gcols.reshape(n, c, kh, kw, ho, wo)
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        window(gxp, i, j)[...] += gcols[:, :, i, j]
                gx = gxp
        if gx is not None and padding:
            gx = gx[:, :, padding:padding + h, padding:padding + wd_]
        if b is None:
            return gx, gw
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; gradients route to the (first) argmax."""
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"maxpool2d: kernel {kernel} exceeds spatial axes (2,3) {h}x{w}")
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    xd = x.data
    stacked = np.stack([xd[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
                        for i in range(kernel) for j in range(kernel)])
    arg = stacked.argmax(axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def fn(g):
        gx = np.zeros_like(xd)
        for t in range(kernel * kernel):
            i, j = divmod(t, kernel)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += g * (arg == t)
        return (gx,)

    return _make(out, (x,), fn)


def nearest_upsample(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"nearest_upsample: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC by averaging the spatial axes."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: input must be NCHW, got {x.shape}")
    return tmean(x, axis=(2, 3))


def avg_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Non-overlapping average pooling; spatial extents must divide ``kernel``."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"avg_pool2d: spatial axes (2,3) {h}x{w} not divisible by {kernel}")
    r = reshape(x, (n, c, h // kernel, kernel, w // kernel, kernel))
    return tmean(r, axis=(3, 5))
