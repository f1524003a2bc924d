"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`ComputationRecord` is active (``with
ComputationRecord() as rec:``) append their adjoint closures to the record
whenever one of their inputs requires a gradient. :func:`backward` replays
those closures in reverse order. Outside a record every operation is a plain
numpy evaluation, which is what inference uses.

Only two broadcasting forms exist: :func:`bias_add` (a per-channel vector
along one axis) and the per-feature affine inside :func:`batchnorm`. Every
other binary operation requires identical shapes.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchSizeError, ContractError, DimensionError, NumericError

_state = threading.local()


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class ComputationRecord:
    """Ordered log of differentiable operations executed in its context.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A record is single-threaded; each thread keeps its
    own stack of active records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "ComputationRecord":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        return backward(self, loss)


def _stack() -> list[ComputationRecord]:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_record() -> ComputationRecord | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_record:
    """Suspend recording (used for stop-gradient control flow)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)
        return False


def _emit(op: str, inputs: tuple[Tensor, ...], data: np.ndarray, adjoint) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op}: non-finite value in forward output")
    rec = active_record()
    needs = rec is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        rec.nodes.append(_Node(op, inputs, out, adjoint))
    return out


def backward(record: ComputationRecord, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) through ``record`` and consume it.

    Every tensor reached that requires a gradient gets ``.grad`` set (fan-out
    contributions are summed). Returns the same gradients keyed by tensor.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(record.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.adjoint(g)):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(f"{node.op}: adjoint shape {gi.shape} != input shape {t.shape}")
            if not np.isfinite(gi).all():
                raise NumericError(f"{node.op}: non-finite gradient")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    record.reset()
    result = {}
    for key, t in seen.items():
        t.grad = grads[key]
        result[t] = t.grad
    return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_constant(a: Tensor, c: float) -> Tensor:
    return _emit("add_constant", (a,), a.data + c, lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", (a,), ad * ad, lambda g: (2.0 * ad * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", (a,), y, lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericError("log: non-positive input")
    ad = a.data
    return _emit("log", (a,), np.log(ad), lambda g: (g / ad,))


# reductions and shape ------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(out), adjoint)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal index."""
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    shape = a.shape

    def adjoint(g):
        dx = np.zeros(shape)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return _emit("max_axis", (a,), out, adjoint)


def norm(a: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis`` (subgradient 0 at the origin)."""
    n = np.sqrt((a.data * a.data).sum(axis=axis))
    ad = a.data

    def adjoint(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.expand_dims(np.where(n > 0, g / safe, 0.0), axis) * ad,)

    return _emit("norm", (a,), n, adjoint)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _emit("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


_EINSUM = re.compile(r"^([a-z]+),([a-z]+)->([a-z]*)$")


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand contraction without repeated indices inside an operand."""
    a, b = as_tensor(a), as_tensor(b)
    m = _EINSUM.match(spec.replace(" ", ""))
    if not m:
        raise ContractError(f"einsum: unsupported spec {spec!r}")
    sa, sb, so = m.groups()
    for s in (sa, sb, so):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index in {s!r}")
    if any(c not in so + sb for c in sa) or any(c not in so + sa for c in sb):
        raise ContractError(f"einsum: index summed within a single operand in {spec!r}")
    try:
        out = np.einsum(f"{sa},{sb}->{so}", a.data, b.data, optimize=True)
    except ValueError as exc:
        raise DimensionError(f"einsum {spec}: shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def adjoint(g):
        return (
            np.einsum(f"{so},{sb}->{sa}", g, bd, optimize=True),
            np.einsum(f"{sa},{so}->{sb}", ad, g, optimize=True),
        )

    return _emit("einsum", (a, b), np.asarray(out), adjoint)


def bias_add(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise DimensionError(f"bias_add: bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    others = tuple(i for i in range(x.ndim) if i != axis)
    return _emit("bias_add", (x, bias), x.data + bias.data.reshape(view),
                 lambda g: (g, g.sum(axis=others)))


# normalisation -------------------------------------------------------------

def softmax_axis(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (a,), y,
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _emit("log_softmax", (a,), y,
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5

    @classmethod
    def fresh(cls, features: int, momentum: float = 0.9, eps: float = 1e-5) -> "BatchNormState":
        return cls(np.zeros(features), np.ones(features), momentum, eps)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Per-feature normalisation of an ``N x F`` tensor.

    Training mode normalises with the (biased) batch statistics and folds
    them into ``state`` with its momentum (unbiased variance is stored).
    Inference mode uses the stored statistics.
    """
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    n = x.shape[0]
    xd, gd = x.data, gamma.data
    if training:
        if n < 2:
            raise BatchSizeError(f"batchnorm needs at least 2 rows in training mode, got {n}")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * var * n / (n - 1)
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mu) * inv
    out = gd * xhat + beta.data

    def adjoint(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gd
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, adjoint)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                training: bool) -> Tensor:
    """Channel-wise batch norm of ``N x C x H x W`` via the ``N x F`` form."""
    n, c, h, w = x.shape
    rows = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    y = batchnorm(rows, gamma, beta, state, training)
    return transpose(reshape(y, (n, h, w, c)), (0, 3, 1, 2))


# convolution and pooling ---------------------------------------------------

def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or N x C x H x W input, got {x.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``(N x) C x H x W`` input with ``O x C x kh x kw`` kernels."""
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: stride {stride} / padding {padding} invalid")
    xd, unbatched = _batched(x)
    n, c, h, w = xd.shape
    if kernels.ndim != 4 or kernels.shape[1] != c:
        raise DimensionError(f"conv2d: kernels {kernels.shape} do not match input {x.shape}")
    o, _, kh, kw = kernels.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col: rows are (n, y, x) output sites, columns (c, i, j) kernel taps
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernels.data.reshape(o, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def adjoint(g):
        gmat = (g[None] if unbatched else g).transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dk = (gmat.T @ cols).reshape(kernels.shape)
        dcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return (dx[0] if unbatched else dx), dk

    return _emit("conv2d", (x, kernels), out[0] if unbatched else out, adjoint)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; ties route the gradient to the first row-major index."""
    stride = window if stride is None else stride
    xd, unbatched = _batched(x)
    n, c, h, w = xd.shape
    if window < 1 or stride < 1 or window > h or window > w:
        raise DimensionError(f"maxpool2d: window {window} does not fit input {h}x{w}")
    win = sliding_window_view(xd, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def adjoint(g):
        if unbatched:
            g = g[None]
        rows = np.arange(ho)[:, None] * stride + arg // window
        cols = np.arange(wo)[None, :] * stride + arg % window
        dx = np.zeros((n, c, h, w))
        ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dx, (ni[..., None, None], ci[..., None, None], rows, cols), g)
        return (dx[0] if unbatched else dx,)

    return _emit("maxpool2d", (x,), out[0] if unbatched else out, adjoint)


# gradient checking ---------------------------------------------------------

@dataclass(frozen=True)
class GradCheckResult:
    max_error: float
    passed: bool
    worst: tuple[int, int]


def grad_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-6,
               tolerance: float = 1e-4, max_coords: int | None = None,
               seed: int = 0) -> GradCheckResult:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``fn`` is re-evaluated with each probed coordinate of ``inputs`` nudged by
    ``+/- step``. The error per coordinate is ``|analytic - numeric| /
    max(1, |numeric|)``. ``max_coords`` caps the probes per input (sampled
    without replacement).
    """
    if not 0 < step <= 1e-3:
        raise ContractError(f"grad_check step must lie in (0, 1e-3], got {step}")
    for t in inputs:
        if not np.isfinite(t.data).all():
            raise NumericError(f"grad_check: non-finite input {t!r}")
        t.requires_grad = True
        t.grad = None
    with ComputationRecord() as rec:
        out = fn()
    backward(rec, out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, (-1, -1)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite objective probing input {k}[{i}]")
            numeric = (fp - fm) / (2 * step)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            if err > worst_err:
                worst_err, worst = err, (k, int(i))
    return GradCheckResult(float(worst_err), bool(worst_err <= tolerance), worst)
