"""Dense float64 array kernels paired with exact backward transforms.

Every kernel is a pure function over immutable :class:`Tensor` values. While
a :class:`GradTape` is active, each kernel appends one record (output, inputs,
backward closure) to the tape; replaying the tape in reverse yields the
gradient of a scalar output with respect to any recorded input. Without an
active tape the kernels are plain value computations.

All data is 64-bit floating point: at desk scale speed is irrelevant and
finite-difference verification demands the precision.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ContractError, EmptyPoolError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

TensorLike = "Tensor | np.ndarray | float | int"


class Tensor:
    """Immutable-by-convention wrapper around a float64 ndarray.

    Kernels never mutate ``data`` in place; optimizers may, between tapes.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)

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
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    # arithmetic delegates to the kernel functions so everything is taped
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, float(p))

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape machinery

_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Ordered record of executed kernels, single-writer per training step.

    Records accumulate in execution order, which is a valid topological
    order of the computation; :meth:`gradient` replays them once, in
    reverse, accumulating output-gradients into input-gradients.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape exits must nest properly"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def gradient(self, output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of scalar ``output`` w.r.t. each tensor in ``sources``."""
        if output.size != 1:
            raise ContractError(
                f"gradient target must be scalar, got shape {output.shape}"
            )
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        keep_alive = output  # noqa: F841  (id() keys are valid while refs live)
        for out, inputs, backward in reversed(self._records):
            g = grads.get(id(out))
            if g is None:
                continue
            input_grads = backward(g)
            for tensor, ig in zip(inputs, input_grads):
                if ig is None:
                    continue
                acc = grads.get(id(tensor))
                grads[id(tensor)] = ig if acc is None else acc + ig
        return [
            grads.get(id(s), np.zeros_like(s.data)) for s in sources
        ]


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if _TAPE_STACK:
        _TAPE_STACK[-1]._records.append((out, inputs, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out, (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data ** p)
    return _record(out, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def log(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.exp(x.data))
    return _record(out, (x,), lambda g: (g * out.data,))


# --------------------------------------------------------------------------
# structural ops

def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, broadcasting the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    out = Tensor(a.data @ b.data)

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """Affine map over the last axis: x @ w (+ b)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.swapaxes(x.data, a, b))
    return _record(out, (x,), lambda g: (np.swapaxes(g, a, b),))


def take(x, idx) -> Tensor:
    """Basic (slice/int) indexing; gradient scatters back into place."""
    x = as_tensor(x)
    out = Tensor(x.data[idx])

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(out, (x,), backward)


def concat(parts: Iterable, axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.broadcast_to(x.data, shape).copy())
    return _record(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else x.shape[axis]
    return div(tsum(x, axis=axis, keepdims=keepdims), float(count))


def stop_gradient(x) -> Tensor:
    """Value passthrough that the tape treats as a constant."""
    x = as_tensor(x)
    return Tensor(x.data.copy())


def straight_through(soft, hard_values: np.ndarray) -> Tensor:
    """Forward the hard values; backward passes gradients to ``soft``."""
    soft = as_tensor(soft)
    if soft.shape != np.shape(hard_values):
        raise ShapeError("straight_through operands must share a shape")
    out = Tensor(np.asarray(hard_values, dtype=np.float64).copy())
    return _record(out, (soft,), lambda g: (g,))


# --------------------------------------------------------------------------
# neural kernels

def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance over the last axis, then affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ShapeError("layernorm eps must be positive")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layernorm affine params must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def backward(g):
        gxhat = g * gamma.data
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(-1, c).sum(axis=0)
        gbeta = g.reshape(-1, c).sum(axis=0)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


def gelu(x) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = as_tensor(x)
    phi = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * phi)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _record(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x, kind: str) -> Tensor:
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ShapeError(f"unknown activation kind: {kind!r}")


def softmax(x, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; rows sum to one."""
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (x,), backward)


def masked_mean(x, mask) -> Tensor:
    """Mean over kept tokens: x is (B, N, C), mask is (B, N) of 0/1.

    Returns (B, 1, C). Gradients flow to both operands, so soft masks keep
    their straight-through path.
    """
    x, mask = as_tensor(x), as_tensor(mask)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(
            f"masked_mean expects x (B,N,C) and mask (B,N), got "
            f"{x.shape} and {mask.shape}"
        )
    denom = mask.data.sum(axis=1)  # (B,)
    if np.any(denom == 0):
        raise EmptyPoolError("masked_mean mask keeps no tokens for some image")
    num = np.einsum("bn,bnc->bc", mask.data, x.data)
    y = num / denom[:, None]
    out = Tensor(y[:, None, :])

    def backward(g):
        g2 = g[:, 0, :]  # (B, C)
        gx = (mask.data / denom[:, None])[:, :, None] * g2[:, None, :]
        gm = np.einsum("bc,bnc->bn", g2, x.data - y[:, None, :]) / denom[:, None]
        return gx, gm

    return _record(out, (x, mask), backward)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    # the max shift is a value-only constant: logsumexp(x) = m + log(sum(exp(x-m)))
    # holds identically for any constant m, so no gradient path is lost
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = sub(x, Tensor(m))
    s = log(tsum(exp(shifted), axis=axis, keepdims=True))
    out = add(s, Tensor(m))
    if not keepdims:
        squeezed = tuple(d for i, d in enumerate(out.shape) if i != axis % x.ndim)
        out = reshape(out, squeezed)
    return out


# --------------------------------------------------------------------------
# gradient verification

def grad_check(
    fn: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = 1e-5,
    max_components: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` rebuilds the scalar computation from the current values of the
    tensors in ``wrt``. The comparison denominator is
    ``max(1, |ad|, |fd|)`` so tiny gradients are compared absolutely.
    When ``max_components`` is set, that many randomly chosen components
    are probed per tensor instead of all of them.
    """
    with GradTape() as tape:
        out = fn()
    if out.size != 1:
        raise ContractError("grad_check target must be scalar-valued")
    grads = tape.gradient(out, wrt)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(wrt, grads):
        flat_p = p.data.reshape(-1)
        flat_g = g.reshape(-1)
        idxs = np.arange(flat_p.size)
        if max_components is not None and flat_p.size > max_components:
            idxs = rng.choice(flat_p.size, size=max_components, replace=False)
        for i in idxs:
            orig = flat_p[i]
            flat_p[i] = orig + step
            hi = float(fn().data)
            flat_p[i] = orig - step
            lo = float(fn().data)
            flat_p[i] = orig
            fd = (hi - lo) / (2.0 * step)
            ad = float(flat_g[i])
            rel = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
            worst = max(worst, rel)
    return worst
