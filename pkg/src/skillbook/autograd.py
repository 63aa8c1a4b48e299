"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Ops run as plain numpy by default; inside a ``Tape`` context they additionally
record backward closures in execution order, so ``backward(loss)`` is a single
reverse sweep over the tape. The tape is rebuilt every training step
(define-by-run); dropping it never touches parameter values.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

_CHECK_FINITE = False


def set_finite_checks(enabled: bool) -> None:
    """Enable per-op NaN/Inf assertions (slow; meant for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    """Dense float64 array plus the bookkeeping backward() needs."""

    __slots__ = ("data", "requires_grad", "param", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.param = None  # set by Parameter
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and ndarrays become constant leaves
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, as_tensor(other))

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return neg(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


constant = as_tensor


class Parameter:
    """Learnable leaf: value tensor, grad slot, trainable/frozen flags.

    ``grad_mask`` (same shape, 0/1) freezes individual elements: masked-out
    elements read normally in the forward pass but receive zero gradient and
    are skipped by the optimizer. Whole-parameter ``frozen`` implies zero grads
    and bit-identical values across optimizer steps.
    """

    def __init__(self, data, name: str = "", trainable: bool = True, frozen: bool = False):
        self.value = Tensor(np.array(data, dtype=np.float64))
        self.value.param = self
        self.value.requires_grad = trainable and not frozen
        self.grad = np.zeros_like(self.value.data)
        self.name = name
        self.trainable = trainable
        self._frozen = frozen
        self.grad_mask = None
        self.decay = True  # cleared for params weight decay should skip

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, flag: bool) -> None:
        self._frozen = bool(flag)
        self.value.requires_grad = self.trainable and not self._frozen

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self):
        return self.value.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.shape}, frozen={self.frozen})"


class ParamGroup:
    """Hierarchical container of Parameters; provides dotted-path naming for
    checkpoints and flat listing for optimizers."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, "ParamGroup"] = {}

    def param(self, name: str, data, trainable: bool = True) -> Parameter:
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate name {name!r}")
        p = Parameter(data, name=name, trainable=trainable)
        self._params[name] = p
        return p

    def adopt(self, name: str, p: Parameter) -> Parameter:
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate name {name!r}")
        self._params[name] = p
        return p

    def child(self, name: str, group: "ParamGroup") -> "ParamGroup":
        if name in self._params or name in self._children:
            raise ValueError(f"duplicate name {name!r}")
        self._children[name] = group
        return group

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for name, g in self._children.items():
            out.update(g.named_parameters(prefix + name + "."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())


class Tape:
    """Execution-ordered record of ops; inputs always precede their op."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE.pop()
        assert popped is self
        return False

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        out._tape = self
        self.entries.append((out, inputs, backward_fn))

    def clear(self) -> None:
        self.entries.clear()


_ACTIVE: list[Tape] = []


def _active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by an op")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Populate ``Parameter.grad`` with d(loss)/d(value) for every reachable
    trainable, non-frozen parameter.

    ``params``, when given, is pre-zeroed so parameters the loss never touched
    report exactly zero. Frozen parameters always end with zero grad; elementwise
    ``grad_mask`` zeroes are applied after accumulation.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on a tape; wrap the forward pass in `with Tape():`")

    if params is not None:
        for p in params:
            p.zero_grad()

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {}
    for out, inputs, backward_fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            if t.param is not None:
                touched[key] = t

    for key, t in touched.items():
        p = t.param
        g = grads.get(key)
        if g is None or p.frozen or not p.trainable:
            p.grad[...] = 0.0
            continue
        if p.grad_mask is not None:
            g = g * p.grad_mask
        p.grad[...] = g


# ---------------------------------------------------------------------------
# primitive ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return (ga, gb)

    return _make(out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dims broadcast (numpy matmul semantics)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return _make(out, (a, b), bwd)


def outer(a: Tensor, b: Tensor) -> Tensor:
    """Outer product of two vectors: (n,) x (m,) -> (n, m)."""
    if a.data.ndim != 1 or b.data.ndim != 1:
        raise ShapeError(f"outer needs 1-d operands, got {a.data.shape}, {b.data.shape}")
    out = np.outer(a.data, b.data)

    def bwd(g):
        return (g @ b.data, g.T @ a.data)

    return _make(out, (a, b), bwd)


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast ``a`` to ``shape`` without copying semantics; gradients sum
    back over the broadcast axes."""
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)
    orig = a.data.shape
    return _make(out.copy(), (a,), lambda g: (_unbroadcast(g, orig),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}) outside axis {axis} of {a.data.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bwd)


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0 by an integer index array of any shape."""
    indices = np.asarray(indices)
    out = a.data[indices]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices.reshape(-1), g.reshape((-1,) + a.data.shape[1:]))
        return (ga,)

    return _make(out, (a,), bwd)


def take_along(a: Tensor, indices: np.ndarray) -> Tensor:
    """Rowwise gather on a 2-d tensor: out[i, j] = a[i, indices[i, j]]."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_along expects a 2-d tensor, got {a.data.shape}")
    indices = np.asarray(indices)
    rows = np.arange(a.data.shape[0])[:, None]
    out = a.data[rows, indices]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, indices), g)
        return (ga,)

    return _make(out, (a,), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.data.shape).copy(),)

    return _make(out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    passthrough = (a.data >= lo) & (a.data <= hi)
    return _make(out, (a,), lambda g: (g * passthrough,))


def clamp_pass(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values but let gradients through unchanged, so a parameter pushed
    against a bound can still be pulled back inside."""
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g,))


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


def log_sum_exp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _make(out, (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.data.shape}, {bias.data.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gain.data * xhat + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = (g * xhat).sum(axis=lead)
        g_bias = g.sum(axis=lead)
        gy = g * gain.data
        ga = inv_std * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return (ga, g_gain, g_bias)

    return _make(out, (a, gain, bias), bwd)


_COS_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between vectors along the last axis.

    Leading axes broadcast. A vector with norm below 1e-12 on either side
    yields similarity 0 (and zero gradients) instead of an error: transient
    near-zero residuals can appear during orthogonalization.
    """
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ShapeError(f"cosine_similarity last dims disagree: {a.data.shape} vs {b.data.shape}")
    ab = np.broadcast_arrays(a.data, b.data)
    ad, bd = ab[0], ab[1]
    dot = (ad * bd).sum(axis=-1)
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    ok = (na >= _COS_EPS) & (nb >= _COS_EPS)
    denom = np.where(ok, na * nb, 1.0)
    out = np.where(ok, dot / denom, 0.0)

    def bwd(g):
        gm = (g * ok) / denom
        cos_term = g * ok * out
        ga_full = gm[..., None] * bd - (cos_term / np.where(ok, na * na, 1.0))[..., None] * ad
        gb_full = gm[..., None] * ad - (cos_term / np.where(ok, nb * nb, 1.0))[..., None] * bd
        return (_unbroadcast(ga_full, a.data.shape), _unbroadcast(gb_full, b.data.shape))

    return _make(out, (a, b), bwd)
