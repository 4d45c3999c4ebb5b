"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order and then releases it; a graph can be
back-propagated exactly once.

Storage is float32 by default.  ``precision("f64")`` (or ``set_precision``)
switches newly created tensors to float64, which is what gradient checks use.

Broadcasting is deliberately narrow: two operand shapes are right-aligned and
may differ only on a leading run of axes where one side has extent 1 (or is
missing).  ``(N, d) + (d,)`` and ``(B, N, d) * (1, N, d)`` are fine,
``(N, d) + (N, 1)`` is a ``DimensionError``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, GraphError, NumericError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = {"dtype": np.float32, "grad": True}


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state["dtype"] = _DTYPES[name]


def get_dtype() -> type:
    return _state["dtype"]


@contextlib.contextmanager
def precision(name: str):
    prev = _state["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    # -- introspection ---------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autograd --------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Back-propagate from this tensor into every reachable leaf.

        Leaf gradients accumulate into ``.grad``.  The graph is released
        afterwards, so calling this twice on the same result raises
        ``GraphError``.
        """
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        order = _topo_order(self)
        for node in order:
            if node._consumed:
                raise GraphError(
                    "graph already back-propagated; re-run the forward pass before calling backward() again"
                )
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._consumed = True

    # -- operator sugar --------------------------------------------------
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

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# broadcasting
# ---------------------------------------------------------------------------
def broadcast_shape(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    n = max(len(sa), len(sb))
    pa = (1,) * (n - len(sa)) + tuple(sa)
    pb = (1,) * (n - len(sb)) + tuple(sb)
    out = []
    leading = True
    for a, b in zip(pa, pb):
        if a == b:
            out.append(a)
            if a != 1:
                leading = False
            continue
        if leading and (a == 1 or b == 1):
            out.append(max(a, b))
            continue
        raise DimensionError(
            f"shapes {tuple(sa)} and {tuple(sb)} are not broadcastable (only leading singleton axes may expand)"
        )
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), backward, "div")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is 0."""
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def clamp_min(x, floor: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > floor
    out = np.where(mask, x.data, floor).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"cannot concatenate shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Operands are 2-D, or share identical leading batch axes, or ``b`` is 2-D
    and applied to every matrix of a batched ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with per-slice max subtraction."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of an M×N matrix (or a batch of them)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# convolution and spatial ops
# ---------------------------------------------------------------------------
def conv_output_extent(size: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a strided convolution.

    A remainder in ``(size + 2*pad - k) / stride`` is tolerated only while the
    unused trailing rows are padding; discarding real input is an error.
    """
    span = size + 2 * pad - k
    if span < 0:
        raise DimensionError(f"kernel {k} larger than padded extent {size + 2 * pad}")
    rem = span % stride
    if rem > pad:
        raise DimensionError(
            f"non-integral output extent: ({size} + 2*{pad} - {k}) / {stride} leaves {rem} input rows unused"
        )
    return span // stride + 1


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` (B×C×H×W) with ``w`` (O×C×k×k)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, k, k2 = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    if k != k2 or k not in (1, 3):
        raise DimensionError(f"conv2d supports square kernels of size 1 or 3, got {w.shape[2:]}")
    Ho = conv_output_extent(H, k, stride, pad)
    Wo = conv_output_extent(W, k, stride, pad)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise DimensionError(f"conv2d bias shape {b.shape} != ({O},)")
        parents.append(b)
    xd, wd = x.data, w.data

    if k == 1 and stride == 1 and pad == 0:
        x3 = xd.reshape(B, C, H * W)
        w2 = wd.reshape(O, C)
        out = np.matmul(w2, x3)
        if b is not None:
            out += b.data[:, None]

        def backward(g):
            g3 = g.reshape(B, O, H * W)
            gx = np.matmul(w2.T, g3).reshape(xd.shape) if x.requires_grad else None
            gw = sum(g3[i] @ x3[i].T for i in range(B)).reshape(wd.shape)
            gb = g3.sum(axis=(0, 2)) if b is not None else None
            return (gx, gw, gb)[: len(parents)]

        return _result(out.reshape(B, O, H, W), parents, backward, "conv2d")

    xt = xd.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hs = stride * (Ho - 1) + 1
    ws = stride * (Wo - 1) + 1
    cols = np.empty((C, k * k, B, Ho, Wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i * k + j] = xt[:, :, i : i + hs : stride, j : j + ws : stride]
    cols = cols.reshape(C * k * k, B * Ho * Wo)
    w2 = wd.reshape(O, C * k * k)
    out = (w2 @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    padded_shape = xt.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, k * k, B, Ho, Wo)
            gxt = np.zeros(padded_shape, dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    gxt[:, :, i : i + hs : stride, j : j + ws : stride] += gcols[:, i * k + j]
            if pad:
                gxt = gxt[:, :, pad : pad + H, pad : pad + W]
            gx = gxt.transpose(1, 0, 2, 3)
        gb = g2.sum(axis=1) if b is not None else None
        return (gx, gw, gb)[: len(parents)]

    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample expects B×C×H×W, got {x.shape}")
    B, C, H, W = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (B, C, H, factor, W, factor))
    out = out.reshape(B, C, H * factor, W * factor)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample")


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over every axis except axis 1 (the channel axis).

    In training mode the running buffers are updated in place (unbiased
    variance, as is conventional); in eval mode they are used as-is.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim not in (2, 4):
        raise DimensionError(f"batch_norm expects N×C or B×C×H×W, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm affine shape {gamma.shape} does not match {C} channels")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    xd = x.data
    gd = gamma.data.reshape(bshape)
    if training:
        m = xd.size // C
        if m < 2:
            raise DimensionError("batch_norm in training mode needs at least 2 values per channel")
        mu = xd.mean(axis=axes, keepdims=True)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * invstd
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(C)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(C) * (m / (m - 1))

        def backward(g):
            gbeta = g.sum(axis=axes)
            ggamma = (g * xhat).sum(axis=axes)
            dxhat = g * gd
            gx = invstd / m * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, ggamma, gbeta

    else:
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype).reshape(bshape)
        xhat = (xd - running_mean.astype(xd.dtype).reshape(bshape)) * invstd

        def backward(g):
            return g * gd * invstd, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = xhat * gd + beta.data.reshape(bshape)
    return _result(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def cross_entropy(logits, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean cross-entropy over non-ignored positions.

    ``logits`` is B×K×H×W (or N×K), ``labels`` holds integer class ids with
    the matching non-class shape.  If every position is ignored the loss is 0.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    K = logits.shape[1]
    lg = np.moveaxis(logits.data, 1, -1).reshape(-1, K)
    lab = labels.reshape(-1).astype(np.int64)
    if lab.shape[0] != lg.shape[0]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = lab != ignore_index
    count = int(valid.sum())
    safe = np.where(valid, lab, 0)
    shifted = lg - lg.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(lab.shape[0]), safe]
    nll = np.where(valid, lse - picked, 0.0)
    loss = nll.sum() / max(count, 1)
    lshape = logits.shape

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(lab.shape[0]), safe] -= 1.0
        p *= valid[:, None]
        p *= g / max(count, 1)
        moved = p.reshape(lshape[:1] + lshape[2:] + (K,))
        return (np.moveaxis(moved, -1, 1),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")
