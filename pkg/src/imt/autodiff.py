"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive application is recorded on the active Tape; ``backward`` walks
the records in reverse and calls each primitive's registered VJP. VJPs are
written in terms of taped primitives themselves, so gradients can be
differentiated again (``create_graph=True``), which is how the optimizer's
Hessian-vector products are produced.

Conventions:
  - computation is dtype-preserving: float32 graphs stay float32, and the
    gradient-check tests run everything in float64;
  - a complex node's cotangent is dL/d(re) + 1j * dL/d(im); complex values
    only ever enter through complex_split / complex_join at the graph edge;
  - |z| at z = 0 uses subgradient 0.

Replaying a tape re-executes every recorded forward and must reproduce the
recorded outputs bitwise (all primitives are pure).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable

import numpy as np
import scipy.special

from .errors import InvalidInputError, NumericalFailureError

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}

_ids = itertools.count()
_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class OpRecord:
    __slots__ = ("name", "inputs", "out", "kwargs", "aux")

    def __init__(self, name, inputs, out, kwargs, aux):
        self.name = name
        self.inputs = inputs
        self.out = out
        self.kwargs = kwargs
        self.aux = aux


class Tape:
    """Recording of one differentiable computation (one training step)."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def replay(self) -> None:
        """Re-execute every record and verify outputs bitwise.

        Raises NumericalFailureError on the first mismatching record.
        """
        for i, rec in enumerate(self.records):
            vals = tuple(v.value for v in rec.inputs)
            redone, _ = _FORWARD[rec.name](*vals, **rec.kwargs)
            if not np.array_equal(np.asarray(redone), np.asarray(rec.out.value)):
                raise NumericalFailureError(
                    f"tape replay mismatch at record {i}", where=rec.name
                )


class _NoRecord:
    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


def no_recording() -> _NoRecord:
    """Context in which primitive applications are computed but not taped."""
    return _NoRecord()


class Variable:
    """A node in the computation graph. ``value`` must not be mutated."""

    __slots__ = ("value", "nid", "stop", "name")

    def __init__(self, value, stop=False, name=None):
        self.value = value
        self.nid = next(_ids)
        self.stop = stop
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={np.shape(self.value)}, dtype={np.asarray(self.value).dtype})"

    # arithmetic sugar; scalars are lifted at the operand's dtype
    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other, self))


def leaf(value, name: str | None = None) -> Variable:
    """Differentiable input node (parameters, checked inputs)."""
    return Variable(np.asarray(value), stop=False, name=name)


def constant(value, name: str | None = None) -> Variable:
    """Node that blocks gradient flow (targets, masks, run constants)."""
    return Variable(np.asarray(value), stop=True, name=name)


def _lift(x, like: Variable) -> Variable:
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x)
    if arr.dtype != like.value.dtype and np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(like.value.dtype)
    return Variable(arr, stop=True)


def register(name: str, forward: Callable, vjp: Callable) -> None:
    if name in _FORWARD:
        raise ValueError(f"primitive {name!r} registered twice")
    _FORWARD[name] = forward
    _VJP[name] = vjp


def registered_primitives() -> set[str]:
    return set(_FORWARD)


def missing_derivatives() -> set[str]:
    """Primitives with a forward but no registered VJP (must be empty)."""
    return set(_FORWARD) - set(_VJP)


def _apply(name: str, *inputs: Variable, **kwargs) -> Variable:
    value, aux = _FORWARD[name](*[v.value for v in inputs], **kwargs)
    out = Variable(value)
    tape = current_tape()
    if tape is not None:
        tape.records.append(OpRecord(name, inputs, out, kwargs, aux))
    return out


def backward(
    out: Variable,
    wrt: list[Variable],
    create_graph: bool = False,
    check_finite: bool = True,
) -> list[Variable]:
    """Gradients of a scalar ``out`` with respect to each leaf in ``wrt``.

    Walks the active tape's records in reverse recording order (reverse
    topological order), accumulating cotangents in a fixed order so repeated
    calls are bitwise identical. With ``create_graph`` the gradient
    computation is itself recorded, enabling Hessian-vector products.
    Unreached leaves get exact-zero gradients.
    """
    tape = current_tape()
    if tape is None:
        raise InvalidInputError("backward requires an active tape")
    if np.size(out.value) != 1:
        raise InvalidInputError(
            f"backward differentiates scalars, got shape {np.shape(out.value)}"
        )
    records = list(tape.records)
    grads: dict[int, Variable] = {
        out.nid: constant(np.ones(np.shape(out.value), dtype=out.value.dtype))
    }
    ctx = no_recording() if not create_graph else _nullcontext()
    with ctx:
        for rec in reversed(records):
            g = grads.pop(rec.out.nid, None)
            if g is None:
                continue
            input_grads = _VJP[rec.name](g, rec)
            for v, ig in zip(rec.inputs, input_grads):
                if ig is None or v.stop:
                    continue
                held = grads.get(v.nid)
                grads[v.nid] = ig if held is None else add(held, ig)
        result = []
        for v in wrt:
            gv = grads.get(v.nid)
            if gv is None:
                gv = constant(np.zeros(np.shape(v.value), dtype=v.value.dtype))
            result.append(gv)
    if check_finite:
        for v, gv in zip(wrt, result):
            if not np.all(np.isfinite(gv.value)):
                raise NumericalFailureError(
                    "non-finite gradient", where=v.name or f"leaf#{v.nid}"
                )
    return result


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---------------------------------------------------------------------------
# shape alignment helpers (taped, so they stay differentiable)


def sum_to(g: Variable, shape: tuple) -> Variable:
    """Reduce a broadcast cotangent back to ``shape``."""
    gshape = np.shape(g.value)
    if gshape == tuple(shape):
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)), keepdims=False)
        gshape = np.shape(g.value)
    axes = tuple(i for i, (a, b) in enumerate(zip(gshape, shape)) if b == 1 and a != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if np.shape(g.value) != tuple(shape):
        g = reshape(g, tuple(shape))
    return g


def _restore_reduced(g: Variable, in_shape: tuple, axis, keepdims: bool) -> Variable:
    """Broadcast a reduction cotangent back over the reduced axes."""
    if not keepdims:
        kept = list(in_shape)
        for ax in _norm_axes(axis, len(in_shape)):
            kept[ax] = 1
        g = reshape(g, tuple(kept))
    return broadcast_to(g, in_shape)


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# primitive definitions

def _fwd_add(a, b):
    return a + b, None


def _vjp_add(g, rec):
    a, b = rec.inputs
    da = None if a.stop else sum_to(g, a.shape)
    db = None if b.stop else sum_to(g, b.shape)
    return da, db


def _fwd_sub(a, b):
    return a - b, None


def _vjp_sub(g, rec):
    a, b = rec.inputs
    da = None if a.stop else sum_to(g, a.shape)
    db = None if b.stop else neg(sum_to(g, b.shape))
    return da, db


def _fwd_neg(a):
    return -a, None


def _vjp_neg(g, rec):
    return (neg(g),)


def _fwd_mul(a, b):
    return a * b, None


def _vjp_mul(g, rec):
    a, b = rec.inputs
    da = None if a.stop else sum_to(mul(g, b), a.shape)
    db = None if b.stop else sum_to(mul(g, a), b.shape)
    return da, db


def _fwd_div(a, b):
    return a / b, None


def _vjp_div(g, rec):
    a, b = rec.inputs
    da = None if a.stop else sum_to(div(g, b), a.shape)
    db = None if b.stop else sum_to(neg(div(mul(g, rec.out), b)), b.shape)
    return da, db


def _fwd_pow_const(a, exponent):
    return a**exponent, None


def _vjp_pow_const(g, rec):
    (a,) = rec.inputs
    p = rec.kwargs["exponent"]
    if p == 2:
        inner = mul(a, _lift(2.0, a))
    else:
        inner = mul(pow_const(a, exponent=p - 1), _lift(float(p), a))
    return (mul(g, inner),)


def _fwd_exp(a):
    return np.exp(a), None


def _vjp_exp(g, rec):
    return (mul(g, rec.out),)


def _fwd_log(a):
    return np.log(a), None


def _vjp_log(g, rec):
    return (div(g, rec.inputs[0]),)


def _fwd_sqrt(a):
    return np.sqrt(a), None


def _vjp_sqrt(g, rec):
    return (div(mul(g, _lift(0.5, g)), rec.out),)


def _fwd_sigmoid(a):
    out = scipy.special.expit(a)
    return np.asarray(out, dtype=a.dtype), None


def _vjp_sigmoid(g, rec):
    o = rec.out
    return (mul(g, mul(o, sub(_lift(1.0, o), o))),)


def _fwd_matmul(a, b):
    return a @ b, None


def _vjp_matmul(g, rec):
    a, b = rec.inputs
    da = None if a.stop else sum_to(matmul(g, swap_last(b)), a.shape)
    db = None if b.stop else sum_to(matmul(swap_last(a), g), b.shape)
    return da, db


def _fwd_transpose(a, axes):
    return np.transpose(a, axes), None


def _vjp_transpose(g, rec):
    axes = rec.kwargs["axes"]
    inverse = tuple(np.argsort(axes))
    return (transpose(g, axes=inverse),)


def _fwd_reshape(a, shape):
    return np.reshape(a, shape), None


def _vjp_reshape(g, rec):
    return (reshape(g, rec.inputs[0].shape),)


def _fwd_broadcast_to(a, shape):
    return np.broadcast_to(a, shape).copy(), None


def _vjp_broadcast_to(g, rec):
    return (sum_to(g, rec.inputs[0].shape),)


def _fwd_reduce_sum(a, axis, keepdims):
    return np.sum(a, axis=axis, keepdims=keepdims), None


def _vjp_reduce_sum(g, rec):
    (a,) = rec.inputs
    return (_restore_reduced(g, a.shape, rec.kwargs["axis"], rec.kwargs["keepdims"]),)


def _fwd_reduce_mean(a, axis, keepdims):
    return np.mean(a, axis=axis, keepdims=keepdims), None


def _vjp_reduce_mean(g, rec):
    (a,) = rec.inputs
    axes = _norm_axes(rec.kwargs["axis"], len(a.shape))
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    spread = _restore_reduced(g, a.shape, rec.kwargs["axis"], rec.kwargs["keepdims"])
    return (div(spread, _lift(float(count), spread)),)


def _fwd_reduce_max(a, axis, keepdims):
    return np.max(a, axis=axis, keepdims=keepdims), None


def _vjp_reduce_max(g, rec):
    (a,) = rec.inputs
    axes = _norm_axes(rec.kwargs["axis"], len(a.shape))
    keepdims = rec.kwargs["keepdims"]
    maxval = np.max(a.value, axis=tuple(axes), keepdims=True)
    mask = (a.value == maxval).astype(a.value.dtype)
    count = np.sum(mask, axis=tuple(axes), keepdims=True)
    mask = mask / count  # ties share the cotangent equally
    spread = _restore_reduced(g, a.shape, rec.kwargs["axis"], keepdims)
    return (mul(spread, constant(mask)),)


def _fwd_softmax(a, axis):
    shifted = a - np.max(a, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True), None


def _vjp_softmax(g, rec):
    # fused Jacobian-vector form: s * (g - sum(g * s))
    axis = rec.kwargs["axis"]
    s = rec.out
    gs = mul(g, s)
    total = reduce_sum(gs, axis=axis, keepdims=True)
    return (mul(s, sub(g, broadcast_to(total, np.shape(g.value)))),)


def _fwd_stop_gradient(a):
    return a, None


def _vjp_stop_gradient(g, rec):
    return (None,)


def _fwd_maximum_const(a, threshold):
    return np.maximum(a, threshold), None


def _vjp_maximum_const(g, rec):
    (a,) = rec.inputs
    mask = (a.value >= rec.kwargs["threshold"]).astype(a.value.dtype)
    return (mul(g, constant(mask)),)


def _fwd_gather(a, indices, axis):
    return np.take(a, indices, axis=axis), None


def _vjp_gather(g, rec):
    (a,) = rec.inputs
    return (
        scatter_add(
            g,
            indices=rec.kwargs["indices"],
            axis=rec.kwargs["axis"],
            out_shape=a.shape,
        ),
    )


def _fwd_scatter_add(g, indices, axis, out_shape):
    out = np.zeros(out_shape, dtype=g.dtype)
    moved_out = np.moveaxis(out, axis, 0)
    moved_g = np.moveaxis(g, axis, 0)
    np.add.at(moved_out, indices, moved_g)
    return out, None


def _vjp_scatter_add(g, rec):
    return (gather(g, indices=rec.kwargs["indices"], axis=rec.kwargs["axis"]),)


def _fwd_pad_zero2d(a, pads, axes):
    width = [(0, 0)] * a.ndim
    for (lo, hi), ax in zip(pads, axes):
        width[ax % a.ndim] = (lo, hi)
    return np.pad(a, width, mode="constant"), None


def _vjp_pad_zero2d(g, rec):
    (a,) = rec.inputs
    out = g
    for (lo, _hi), ax in zip(rec.kwargs["pads"], rec.kwargs["axes"]):
        n = a.shape[ax % len(a.shape)]
        out = gather(out, indices=np.arange(lo, lo + n), axis=ax)
    return (out,)


def _fwd_complex_split(z, ch_axis):
    return np.stack([z.real, z.imag], axis=ch_axis), None


def _vjp_complex_split(g, rec):
    return (complex_join(g, ch_axis=rec.kwargs["ch_axis"]),)


def _fwd_complex_join(x, ch_axis):
    re = np.take(x, 0, axis=ch_axis)
    im = np.take(x, 1, axis=ch_axis)
    return re + 1j * im, None


def _vjp_complex_join(g, rec):
    return (complex_split(g, ch_axis=rec.kwargs["ch_axis"]),)


def _fwd_channel_magnitude(x, ch_axis):
    return np.sqrt(np.sum(x * x, axis=ch_axis)), None


def _vjp_channel_magnitude(g, rec):
    (x,) = rec.inputs
    ch_axis = rec.kwargs["ch_axis"] % len(x.shape)
    tiny = float(np.finfo(np.asarray(rec.out.value).dtype).tiny)
    safe = maximum_const(rec.out, threshold=tiny)
    scale = div(g, safe)
    kept = list(x.shape)
    kept[ch_axis] = 1
    scale = broadcast_to(reshape(scale, tuple(kept)), x.shape)
    return (mul(scale, x),)


def _fwd_batch_norm_train(x, gamma, beta, axes, eps):
    mu = np.mean(x, axis=axes, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axes, keepdims=True)
    xhat = xc / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    out = gamma * xhat + beta
    return out, (np.squeeze(mu), np.squeeze(var))


def _vjp_batch_norm_train(g, rec):
    x, gamma, beta = rec.inputs
    axes = rec.kwargs["axes"]
    eps = rec.kwargs["eps"]
    # recomputed with taped ops so the result supports double backward
    mu = reduce_mean(x, axis=axes, keepdims=True)
    xc = sub(x, broadcast_to(mu, x.shape))
    var = reduce_mean(mul(xc, xc), axis=axes, keepdims=True)
    inv = div(_lift(1.0, x), sqrt(var + _lift(eps, x)))
    inv_b = broadcast_to(inv, x.shape)
    xhat = mul(xc, inv_b)
    dxhat = mul(g, gamma)
    m1 = broadcast_to(reduce_mean(dxhat, axis=axes, keepdims=True), x.shape)
    m2 = broadcast_to(reduce_mean(mul(dxhat, xhat), axis=axes, keepdims=True), x.shape)
    dx = mul(inv_b, sub(sub(dxhat, m1), mul(xhat, m2)))
    dgamma = sum_to(mul(g, xhat), gamma.shape)
    dbeta = sum_to(g, beta.shape)
    return dx, dgamma, dbeta


def _fwd_batch_norm_eval(x, gamma, beta, rmean, rvar, eps):
    xhat = (x - rmean) / np.sqrt(rvar + np.asarray(eps, dtype=x.dtype))
    return gamma * xhat + beta, None


def _vjp_batch_norm_eval(g, rec):
    x, gamma, beta, rmean, rvar = rec.inputs
    eps = rec.kwargs["eps"]
    inv = div(_lift(1.0, x), sqrt(rvar + _lift(eps, x)))
    dx = sum_to(mul(g, mul(gamma, broadcast_to(inv, np.shape(g.value)))), x.shape)
    xhat = mul(sub(x, broadcast_to(rmean, x.shape)), broadcast_to(inv, x.shape))
    dgamma = sum_to(mul(g, xhat), gamma.shape)
    dbeta = sum_to(g, beta.shape)
    return dx, dgamma, dbeta, None, None


register("add", _fwd_add, _vjp_add)
register("sub", _fwd_sub, _vjp_sub)
register("neg", _fwd_neg, _vjp_neg)
register("mul", _fwd_mul, _vjp_mul)
register("div", _fwd_div, _vjp_div)
register("pow_const", _fwd_pow_const, _vjp_pow_const)
register("exp", _fwd_exp, _vjp_exp)
register("log", _fwd_log, _vjp_log)
register("sqrt", _fwd_sqrt, _vjp_sqrt)
register("sigmoid", _fwd_sigmoid, _vjp_sigmoid)
register("matmul", _fwd_matmul, _vjp_matmul)
register("transpose", _fwd_transpose, _vjp_transpose)
register("reshape", _fwd_reshape, _vjp_reshape)
register("broadcast_to", _fwd_broadcast_to, _vjp_broadcast_to)
register("reduce_sum", _fwd_reduce_sum, _vjp_reduce_sum)
register("reduce_mean", _fwd_reduce_mean, _vjp_reduce_mean)
register("reduce_max", _fwd_reduce_max, _vjp_reduce_max)
register("softmax", _fwd_softmax, _vjp_softmax)
register("stop_gradient", _fwd_stop_gradient, _vjp_stop_gradient)
register("maximum_const", _fwd_maximum_const, _vjp_maximum_const)
register("gather", _fwd_gather, _vjp_gather)
register("scatter_add", _fwd_scatter_add, _vjp_scatter_add)
register("pad_zero2d", _fwd_pad_zero2d, _vjp_pad_zero2d)
register("complex_split", _fwd_complex_split, _vjp_complex_split)
register("complex_join", _fwd_complex_join, _vjp_complex_join)
register("channel_magnitude", _fwd_channel_magnitude, _vjp_channel_magnitude)
register("batch_norm_train", _fwd_batch_norm_train, _vjp_batch_norm_train)
register("batch_norm_eval", _fwd_batch_norm_eval, _vjp_batch_norm_eval)


# ---------------------------------------------------------------------------
# public op wrappers

def add(a, b):
    return _apply("add", a, b)


def sub(a, b):
    return _apply("sub", a, b)


def neg(a):
    return _apply("neg", a)


def mul(a, b):
    return _apply("mul", a, b)


def div(a, b):
    return _apply("div", a, b)


def pow_const(a, exponent):
    return _apply("pow_const", a, exponent=exponent)


def square(a):
    return _apply("pow_const", a, exponent=2)


def exp(a):
    return _apply("exp", a)


def log(a):
    return _apply("log", a)


def sqrt(a):
    return _apply("sqrt", a)


def sigmoid(a):
    return _apply("sigmoid", a)


def silu(a):
    """x * sigmoid(x): the smooth pointwise nonlinearity used by mixers."""
    return mul(a, sigmoid(a))


def matmul(a, b):
    # 1-D operands have asymmetric numpy semantics the VJP does not cover
    if np.ndim(a.value if isinstance(a, Variable) else a) < 2 or np.ndim(
        b.value if isinstance(b, Variable) else b
    ) < 2:
        raise InvalidInputError("matmul requires operands with at least 2 dims")
    return _apply("matmul", a, b)


def transpose(a, axes):
    return _apply("transpose", a, axes=tuple(axes))


def swap_last(a):
    ndim = len(a.shape)
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape):
    return _apply("reshape", a, shape=tuple(shape))


def broadcast_to(a, shape):
    if np.shape(a.value) == tuple(shape):
        return a
    return _apply("broadcast_to", a, shape=tuple(shape))


def reduce_sum(a, axis=None, keepdims=False):
    return _apply("reduce_sum", a, axis=axis, keepdims=keepdims)


def reduce_mean(a, axis=None, keepdims=False):
    return _apply("reduce_mean", a, axis=axis, keepdims=keepdims)


def reduce_max(a, axis=None, keepdims=False):
    return _apply("reduce_max", a, axis=axis, keepdims=keepdims)


def softmax(a, axis=-1):
    return _apply("softmax", a, axis=axis)


def stop_gradient(a):
    return _apply("stop_gradient", a)


def maximum_const(a, threshold):
    return _apply("maximum_const", a, threshold=threshold)


def gather(a, indices, axis):
    return _apply("gather", a, indices=np.asarray(indices), axis=axis)


def scatter_add(a, indices, axis, out_shape):
    return _apply(
        "scatter_add", a, indices=np.asarray(indices), axis=axis, out_shape=tuple(out_shape)
    )


def pad_zero2d(a, pads, axes=(-2, -1)):
    return _apply("pad_zero2d", a, pads=tuple(map(tuple, pads)), axes=tuple(axes))


def complex_split(z, ch_axis=-1):
    return _apply("complex_split", z, ch_axis=ch_axis)


def complex_join(x, ch_axis=-1):
    return _apply("complex_join", x, ch_axis=ch_axis)


def channel_magnitude(x, ch_axis=-1):
    return _apply("channel_magnitude", x, ch_axis=ch_axis)


def batch_norm_train(x, gamma, beta, axes, eps=1e-5):
    return _apply("batch_norm_train", x, gamma, beta, axes=tuple(axes), eps=eps)


def batch_norm_eval(x, gamma, beta, rmean, rvar, eps=1e-5):
    return _apply("batch_norm_eval", x, gamma, beta, rmean, rvar, eps=eps)


def reflect_pad2d(a, pads, axes=(-2, -1)):
    """Reflect padding on two axes, built from gathers so its adjoint
    (fold-back of mirrored contributions) is exact."""
    for (lo, hi), axis in zip(pads, axes):
        if not (lo or hi):
            continue
        n = a.shape[axis]
        if lo >= n or hi >= n:
            raise InvalidInputError(f"reflect pad ({lo},{hi}) too large for size-{n} axis")
        idx = np.concatenate(
            [np.arange(lo, 0, -1), np.arange(n), np.arange(n - 2, n - 2 - hi, -1)]
        )
        a = gather(a, idx, axis=axis)
    return a


def crop2d(a, top, left, height, width, axes=(-2, -1)):
    """Offset crop on two axes via gathers."""
    a = gather(a, np.arange(top, top + height), axis=axes[0])
    return gather(a, np.arange(left, left + width), axis=axes[1])


def subsample2d(a, stride=2, axes=(-2, -1)):
    """Every stride-th sample along two axes."""
    a = gather(a, np.arange(0, a.shape[axes[0]], stride), axis=axes[0])
    return gather(a, np.arange(0, a.shape[axes[1]], stride), axis=axes[1])


def bilinear_resize2d(a, out_h, out_w, axes=(-2, -1)):
    """Bilinear resize along two axes (half-pixel centers convention).

    Composed from gathers and constant weights, so it is linear with an exact
    adjoint under differentiation.
    """

    def axis_resize(x, n_out, axis):
        n_in = x.shape[axis]
        if n_in == n_out:
            return x
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        i0 = np.clip(np.floor(src).astype(np.int64), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = np.clip(src - np.floor(src), 0.0, 1.0)
        frac = frac.astype(np.asarray(x.value).dtype)
        shape = [1] * len(x.shape)
        shape[axis % len(x.shape)] = n_out
        w1 = constant(frac.reshape(shape))
        w0 = constant((1.0 - frac).reshape(shape))
        x0 = gather(x, i0, axis=axis)
        x1 = gather(x, i1, axis=axis)
        return add(mul(x0, w0), mul(x1, w1))

    a = axis_resize(a, out_h, axes[0])
    return axis_resize(a, out_w, axes[1])


# ---------------------------------------------------------------------------
# finite-difference verification

def finite_difference_check(
    f,
    point,
    samples: int = 100,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
    analytic: dict | None = None,
) -> float:
    """Max relative error between central differences and analytic gradients.

    ``point`` is a dict name -> float64 array (a bare array is wrapped as
    {"x": array}); ``f`` receives same-named Variables and returns a scalar
    Variable. Analytic gradients come from ``backward`` unless ``analytic``
    supplies them (the hook used by the negative-control test). Errors are
    normalized by max(|gradient|, 1e-8).
    """
    bare = not isinstance(point, dict)
    point = {"x": point} if bare else dict(point)
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=[0, 0]))

    def call(values) -> float:
        with no_recording():
            vars_ = {k: constant(v) for k, v in values.items()}
            out = f(vars_["x"] if bare else vars_)
        return float(np.asarray(out.value))

    if analytic is None:
        with Tape():
            vars_ = {k: leaf(v, name=k) for k, v in point.items()}
            out = f(vars_["x"] if bare else vars_)
            names = list(point)
            grads = backward(out, [vars_[k] for k in names])
        analytic = {k: np.asarray(g.value) for k, g in zip(names, grads)}
    elif bare and not isinstance(analytic, dict):
        analytic = {"x": np.asarray(analytic)}

    names = sorted(point)
    total = sum(point[k].size for k in names)
    if samples >= total:
        chosen = np.arange(total)
    else:
        chosen = rng.choice(total, size=samples, replace=False)
    coords = []
    for flat in chosen:
        flat = int(flat)
        for k in names:
            if flat < point[k].size:
                coords.append((k, flat))
                break
            flat -= point[k].size

    worst = 0.0
    for name, idx in coords:
        plus = {k: v.copy() for k, v in point.items()}
        minus = {k: v.copy() for k, v in point.items()}
        plus[name].flat[idx] += h
        minus[name].flat[idx] -= h
        fd = (call(plus) - call(minus)) / (2.0 * h)
        g = float(np.asarray(analytic[name]).flat[idx])
        err = abs(fd - g) / max(abs(g), 1e-8)
        worst = max(worst, err)
    return worst
