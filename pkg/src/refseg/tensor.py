"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation below is a pure function: it reads its input arrays, builds a
new ``Tensor`` and (when gradients are required) records a vector-Jacobian
closure on the output node. ``backward`` walks the recorded graph once and
accumulates gradients into ``.grad`` of the participating tensors. There is no
global state; a graph belongs to whoever holds references to its tensors.

Conventions fixed here and relied on everywhere else:

- data is always ``np.float64``, row-major;
- softmax is stabilised by max subtraction;
- layer normalisation uses eps = 1e-5 inside the square root;
- bilinear resampling uses half-pixel centers (align_corners=False) and is
  bit-exact on constant inputs and on identity-size calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple["Tensor", ...], vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"expected scalar tensor, got shape {self.shape}")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.add, a, b)
    return Tensor._from_op(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.subtract, a, b)
    return Tensor._from_op(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.multiply, a, b)
    return Tensor._from_op(
        data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = _broadcast_op(np.divide, a, b)
    return Tensor._from_op(
        data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.data.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"broadcast mismatch: {a.data.shape} vs {b.data.shape}") from exc


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return Tensor._from_op(r, (a,), lambda g: (g * 0.5 / r,))


def absolute(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0 (sign convention).
    return Tensor._from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def power(a: Tensor, p: float) -> Tensor:
    d = a.data ** p
    return Tensor._from_op(d, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


# -- reductions ------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(data), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in _axes(axis)])
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def _axes(axis) -> tuple[int, ...]:
    return (axis,) if isinstance(axis, int) else tuple(axis)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.data.shape
    return Tensor._from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        parts = np.split(g, len(ts), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)

    return Tensor._from_op(data, tuple(ts), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(data, tuple(ts), vjp)


def tile_leading(a: Tensor, n: int) -> Tensor:
    """Repeat ``a`` n times along a new leading axis."""
    data = np.broadcast_to(a.data, (n,) + a.data.shape).copy()
    return Tensor._from_op(data, (a,), lambda g: (g.sum(axis=0),))


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather along ``axis`` by an int or 1-D index array; backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.ndim > 1:
        raise ShapeError("take supports scalar or 1-D indices")
    data = np.take(a.data, idx, axis=axis)

    def vjp(g):
        out = np.zeros_like(a.data)
        moved = np.moveaxis(out, axis, 0)
        if idx.ndim == 0:
            np.add.at(moved, int(idx), g)
        else:
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return Tensor._from_op(data, (a,), vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul mismatch: {a.data.shape} @ {b.data.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return Tensor._from_op(data, (a, b), vjp)


def softmax_last(x: Tensor) -> Tensor:
    """Probability vectors along the last axis, max-stabilised."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax_last requires a non-empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return Tensor._from_op(s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature width {c}")
    mu = mean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(add(var, LAYER_NORM_EPS)))
    return add(mul(inv, gain), bias)


def grouped_linear(x: Tensor, weights: Tensor, groups: int) -> Tensor:
    """Per-group linear map along the channel axis.

    ``x`` carries ``groups * cin`` channels; ``weights`` has shape
    ``(groups, cin, cout)``. Group g's outputs depend only on group g's
    inputs and weights, with no cross-group mixing.
    """
    cin_total = x.data.shape[-1]
    if weights.data.ndim != 3 or weights.data.shape[0] != groups:
        raise ShapeError(f"grouped weights must be (groups, cin, cout), got {weights.data.shape}")
    if cin_total % groups != 0 or cin_total // groups != weights.data.shape[1]:
        raise ShapeError(
            f"channels {cin_total} not divisible into {groups} groups of {weights.data.shape[1]}")
    cin, cout = weights.data.shape[1], weights.data.shape[2]
    lead = x.data.shape[:-1]
    xg = x.data.reshape(lead + (groups, cin))
    data = np.einsum("...gi,gio->...go", xg, weights.data).reshape(lead + (groups * cout,))

    def vjp(g):
        gg = g.reshape(lead + (groups, cout))
        gx = np.einsum("...go,gio->...gi", gg, weights.data).reshape(lead + (cin_total,))
        gw = np.einsum("bgi,bgo->gio", xg.reshape(-1, groups, cin), gg.reshape(-1, groups, cout))
        return (gx, gw)

    return Tensor._from_op(data, (x, weights), vjp)


# -- bilinear resampling -----------------------------------------------------


@lru_cache(maxsize=None)
def _lerp_coords(n_in: int, n_out: int):
    """Half-pixel-center source coordinates for 1D upsampling."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def _lerp_axis(x: Tensor, n_out: int, axis: int) -> Tensor:
    n_in = x.data.shape[axis]
    if n_out == n_in:
        return x
    i0, i1, w = _lerp_coords(n_in, n_out)
    a = take(x, i0, axis)
    b = take(x, i1, axis)
    wshape = [1] * x.ndim
    wshape[axis] = n_out
    wt = Tensor(w.reshape(wshape))
    # a + w*(b-a): exact on constants and at integer source coordinates.
    return add(a, mul(wt, sub(b, a)))


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample the two trailing spatial axes of ``(..., h, w, c)``.

    Half-pixel-center convention; gradients flow to ``x``. Shrinking is
    outside the contract.
    """
    if x.ndim < 3:
        raise ShapeError(f"bilinear_upsample expects (..., h, w, c), got {x.data.shape}")
    h, w = x.data.shape[-3], x.data.shape[-2]
    if out_h < h or out_w < w:
        raise ShapeError(f"target {out_h}x{out_w} smaller than source {h}x{w}")
    out = _lerp_axis(x, out_h, x.ndim - 3)
    out = _lerp_axis(out, out_w, out.ndim - 2)
    return out


# -- backward pass -----------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar ``loss`` into every tracked leaf.

    The traversed graph is consumed: interior nodes drop their parent links
    afterwards, so a second backward through the same nodes is a no-op.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        g = node.grad
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + pg
        # consume the graph; interior grads are scratch space
        node._parents = ()
        node._vjp = None
        node.grad = None if node is not loss else node.grad


# -- finite-difference checking ----------------------------------------------


@dataclass
class GradReport:
    """Outcome of a central-difference check of one computation."""

    op: str
    max_rel_error: float
    per_param: list = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor],
               h: float = 1e-5, name: str = "") -> GradReport:
    """Compare analytic gradients of ``fn(*inputs)`` against central differences.

    ``fn`` must map the inputs to a scalar Tensor and be re-evaluable; every
    entry of every input is perturbed by +-h.

    Central differences at a fixed step are invalid in two regimes: a +-h
    window straddling a ReLU-style kink (needs a smaller step) and a tiny
    gradient under large function values, where f64 roundoff divided by 2h
    swamps the signal (needs a larger step). Entries that disagree at step h
    are therefore re-estimated across a step ladder and scored against the
    best-resolved estimate. This cannot mask a wrong analytic gradient: a
    real defect disagrees with the numeric estimate at every step size.
    """
    params = list(inputs)
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = fn(*params)
    backward(out)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    # plain forward evaluations from here on; no need to record graphs
    for p in params:
        p.requires_grad = False

    def central(flat, i, step):
        v = flat[i]
        flat[i] = v + step
        fp = fn(*params).data.reshape(-1)[0]
        flat[i] = v - step
        fm = fn(*params).data.reshape(-1)[0]
        flat[i] = v
        return (fp - fm) / (2.0 * step)

    per_param = []
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        ana = (analytic[pi] if analytic[pi] is not None else np.zeros_like(p.data)).reshape(-1)
        err = 0.0
        for i in range(flat.size):
            a = float(ana[i])
            e = _rel_err(a, float(central(flat, i, h)))
            for step in (h / 4.0, h / 32.0, 4.0 * h, 32.0 * h):
                if e <= 1e-6:
                    break
                e = min(e, _rel_err(a, float(central(flat, i, step))))
            err = max(err, e)
        per_param.append(err)
        worst = max(worst, err)
    for p in params:
        p.requires_grad = True
    return GradReport(op=name or getattr(fn, "__name__", "fn"), max_rel_error=worst,
                      per_param=per_param)
