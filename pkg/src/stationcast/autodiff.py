"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Every operation computes its value eagerly with numpy.  When a
``GradientTape`` is active, the operation also records a backward closure
onto the tape.  ``GradientTape.backward(loss)`` then walks the recorded
nodes in reverse execution order (a valid reverse-topological order,
since nodes are appended as they execute) and accumulates gradients into
the ``grad`` buffer of every tensor reachable from the loss.

Design constraints:
  * float64 everywhere; no mixed precision, no broadcasting rules beyond
    numpy's own.
  * one tape per training step; inference with no active tape records
    nothing and allocates no gradient state.
  * freezing parameters is the optimizer's job, not the tape's: gradients
    always flow through recorded nodes.
"""

from __future__ import annotations

import weakref
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """backward() called on something the tape cannot differentiate."""


ArrayLike = Union["Tensor", np.ndarray, float, int]

_TAPE_STACK: list["GradientTape"] = []

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``tape_id`` is the index of the node that produced this tensor on the
    tape it was recorded on (None for leaves and inference results).
    """

    __slots__ = ("data", "grad", "tape_id", "name", "_tape", "_detached")

    def __init__(self, data, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.tape_id: Optional[int] = None
        self.name = name
        # weakref: a strong back-reference would cycle through the tape's
        # nodes and strand whole step graphs until the cyclic GC runs
        self._tape: Optional[weakref.ref] = None
        self._detached = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A copy that is cut from the graph and never accumulates grad."""
        out = Tensor(self.data.copy(), name=self.name)
        out._detached = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # arithmetic sugar; all defer to the module-level ops
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple, fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class GradientTape:
    """Ordered record of executed operations with backward closures."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple, fn: Callable) -> None:
        out.tape_id = len(self.nodes)
        out._tape = weakref.ref(self)
        self.nodes.append(_Node(out, inputs, fn))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every tensor reachable from ``loss``.

        Repeated calls without zeroing accumulate (each call adds one more
        unit of upstream gradient).  Each node's backward closure runs at
        most once per call.
        """
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            got = getattr(loss, "shape", type(loss).__name__)
            raise TapeError(f"backward expects a scalar tensor, got shape {got}")
        if loss._tape is None or loss._tape() is not self:
            raise TapeError("loss was not recorded on this tape")

        needed = {id(loss)}
        objs = {id(loss): loss}
        for node in reversed(self.nodes):
            if id(node.out) in needed:
                for t in node.inputs:
                    needed.add(id(t))
                    objs[id(t)] = t

        # local accumulation first, so a second backward() call cannot
        # double-propagate gradients already published on intermediates
        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            if id(node.out) not in needed:
                continue
            g = local.get(id(node.out))
            if g is None:
                continue
            for t, tg in zip(node.inputs, node.fn(g)):
                if tg is None:
                    continue
                acc = local.get(id(t))
                local[id(t)] = tg if acc is None else acc + tg

        for tid, g in local.items():
            t = objs[tid]
            if t._detached:
                continue
            # no copy: local buffers are freshly allocated per call and
            # nothing mutates .grad in place
            t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss recorded on a tape."""
    tape = loss._tape() if isinstance(loss, Tensor) and loss._tape is not None else None
    if tape is None:
        raise TapeError("loss is not on a gradient tape")
    tape.backward(loss)


def _active() -> Optional[GradientTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _data(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _apply(out_data: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    """Wrap an eager result; record backward only for Tensor parents.

    ``grad_fn(g)`` must return one gradient (or None) per parent, in
    parent order.
    """
    out = Tensor(out_data)
    tape = _active()
    if tape is not None:
        tensor_parents = tuple(p for p in parents if isinstance(p, Tensor))
        if tensor_parents:
            idx = tuple(i for i, p in enumerate(parents) if isinstance(p, Tensor))

            def fn(g, _grad_fn=grad_fn, _idx=idx):
                gs = _grad_fn(g)
                return tuple(gs[i] for i in _idx)

            tape.record(out, tensor_parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along axes numpy broadcast over."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _apply(
        ad + bd,
        (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _apply(
        ad - bd,
        (a, b),
        lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _apply(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _apply(
        ad / bd,
        (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape),
            _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    ad = _data(a)
    return _apply(-ad, (a,), lambda g: (-g,))


def power(a: ArrayLike, p: float) -> Tensor:
    ad = _data(a)
    return _apply(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ad, bd = _data(a), _data(b)
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {ad.shape} and {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {ad.shape} x {bd.shape}"
        )

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _apply(ad @ bd, (a, b), grad)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x: ArrayLike, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Stabilized softmax; an optional additive mask (-inf to exclude) is
    applied inside the op, so no full-size mask node lands on the tape."""
    xd = _data(x)
    if axis >= xd.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {xd.ndim}")
    if mask is not None:
        xd = xd + mask
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _apply(y, (x,), grad)


def layer_norm(
    x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd, gd, bd = _data(x), _data(gain), _data(bias)
    d = xd.shape[-1]
    if gd.shape != (d,) or bd.shape != (d,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({d},), got {gd.shape}/{bd.shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gd + bd

    def grad(g):
        batch_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=batch_axes)
        dbias = g.sum(axis=batch_axes)
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _apply(y, (x, gain, bias), grad)


def gelu(x: ArrayLike) -> Tensor:
    xd = _data(x)
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    y = xd * cdf

    def grad(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _apply(y, (x,), grad)


def softplus(x: ArrayLike) -> Tensor:
    xd = _data(x)
    y = np.logaddexp(0.0, xd)

    def grad(g):
        return (g * expit(xd),)

    return _apply(y, (x,), grad)


def dropout(x: ArrayLike, p: float, seed: int) -> Tensor:
    """Inverted dropout with a per-call seed; p is the drop probability."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    xd = _data(x)
    if p == 0.0:
        return _apply(xd.copy(), (x,), lambda g: (g,))
    keep = np.random.default_rng(seed).random(xd.shape) >= p
    mask = keep.astype(np.float64) / (1.0 - p)
    return _apply(xd * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _restore_axes(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    return _apply(
        xd.sum(axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_restore_axes(g, xd.shape, axis, keepdims),),
    )


def tmean(x: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    xd = _data(x)
    out = xd.mean(axis=axis, keepdims=keepdims)
    count = xd.size / out.size
    return _apply(
        out,
        (x,),
        lambda g: (_restore_axes(g, xd.shape, axis, keepdims) / count,),
    )


def reshape(x: ArrayLike, shape: tuple) -> Tensor:
    xd = _data(x)
    return _apply(xd.reshape(shape), (x,), lambda g: (g.reshape(xd.shape),))


def transpose(x: ArrayLike, axes: tuple) -> Tensor:
    xd = _data(x)
    inv = tuple(np.argsort(axes))
    return _apply(xd.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: ArrayLike, key) -> Tensor:
    xd = _data(x)

    def grad(g):
        gx = np.zeros_like(xd)
        gx[key] = g
        return (gx,)

    return _apply(xd[key], (x,), grad)


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    datas = [_data(p) for p in parts]
    sizes = [d.shape[axis] for d in datas]
    bounds = np.cumsum(sizes)[:-1]

    def grad(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _apply(np.concatenate(datas, axis=axis), tuple(parts), grad)


def stack(parts: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    datas = [_data(p) for p in parts]

    def grad(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(datas)))

    return _apply(np.stack(datas, axis=axis), tuple(parts), grad)


def take(table: ArrayLike, indices: np.ndarray) -> Tensor:
    """Row lookup along axis 0 (embedding gather); scatter-add backward."""
    td = _data(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"take indices must be integers, got dtype {idx.dtype}")

    def grad(g):
        gt = np.zeros_like(td)
        np.add.at(gt, idx, g)
        return (gt,)

    return _apply(td[idx], (table,), grad)
