"""Capsule layers: squash, primary capsules, routing-by-agreement, margin loss.

A stack of capsules is a tensor whose last two axes are ``(count, dim)``; an
optional leading batch axis is carried through every function here.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, ContractError, DataError, DimensionError

_replay_state = threading.local()


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """``v = |s|^2 / (1 + |s|^2) * s / |s|``; maps the origin to itself."""
    sd = s.data
    n2 = (sd * sd).sum(axis=axis, keepdims=True)
    n = np.sqrt(n2)
    gain = n / (1.0 + n2)
    # d(gain)/dn divided by n; the s * (s . g) factor vanishes at the origin
    slope = np.where(n > 0, (1.0 - n2) / ((1.0 + n2) ** 2 * np.where(n > 0, n, 1.0)), 0.0)

    def adjoint(g):
        return (gain * g + sd * slope * (sd * g).sum(axis=axis, keepdims=True),)

    return ad._emit("squash", (s,), gain * sd, adjoint)


def primary_caps(feature_map: Tensor, caps_dim: int) -> Tensor:
    """Group channels of ``(N x) C x H x W`` maps into squashed capsules.

    Capsule ``g*H*W + h*W + w`` is channels ``[g*caps_dim, (g+1)*caps_dim)``
    at pixel ``(h, w)``.
    """
    if feature_map.ndim == 3:
        out = primary_caps(ad.reshape(feature_map, (1,) + feature_map.shape), caps_dim)
        return ad.reshape(out, out.shape[1:])
    if feature_map.ndim != 4:
        raise DimensionError(f"primary_caps expects (N x) C x H x W, got {feature_map.shape}")
    n, c, h, w = feature_map.shape
    if caps_dim < 1 or c % caps_dim:
        raise ConfigurationError(f"{c} channels cannot be split into capsules of length {caps_dim}")
    groups = c // caps_dim
    x = ad.reshape(feature_map, (n, groups, caps_dim, h, w))
    x = ad.transpose(x, (0, 1, 3, 4, 2))
    return squash(ad.reshape(x, (n, groups * h * w, caps_dim)))


@dataclass
class RoutingState:
    logits: np.ndarray
    couplings: np.ndarray
    iterations: int
    history: list[np.ndarray] = field(default_factory=list)


class CouplingReplay:
    """Capture the final couplings of every routing call, then replay them.

    With stop-gradient routing the couplings are constants of the backward
    pass; replaying them turns the forward pass into the exact function whose
    derivative the tape computes, which makes finite differences comparable.
    """

    def __init__(self):
        self.saved: list[np.ndarray] = []
        self.replaying = False
        self._cursor = 0

    def __enter__(self):
        _replay_state.active = self
        self._cursor = 0
        return self

    def __exit__(self, *exc):
        _replay_state.active = None
        self.replaying = bool(self.saved)
        return False

    def _take(self, couplings: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.saved.append(couplings.copy())
            return couplings
        out = self.saved[self._cursor]
        self._cursor += 1
        return out


def _softmax_np(b: np.ndarray) -> np.ndarray:
    e = np.exp(b - b.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict(inputs: Tensor, weights: Tensor) -> Tensor:
    """Prediction vectors ``u_hat[n, i, j] = W[i, j] @ u[n, i]``."""
    n, n_in, d_in = inputs.shape
    _, n_out, d_out, _ = weights.shape
    w = weights.data.reshape(n_in, n_out * d_out, d_in)
    u = inputs.data.transpose(1, 2, 0)  # i, d_in, n
    out = np.matmul(w, u).reshape(n_in, n_out, d_out, n).transpose(3, 0, 1, 2)

    def adjoint(g):
        gi = g.transpose(1, 2, 3, 0).reshape(n_in, n_out * d_out, n)
        du = np.matmul(w.transpose(0, 2, 1), gi).transpose(2, 0, 1)
        dw = np.matmul(gi, u.transpose(0, 2, 1)).reshape(weights.shape)
        return du, dw

    return ad._emit("capsule_predict", (inputs, weights), out, adjoint)


def route_sum(couplings: Tensor, predictions: Tensor) -> Tensor:
    """``s[n, j] = sum_i c[n, i, j] * u_hat[n, i, j]``."""
    c, u = couplings.data, predictions.data
    if c.shape != u.shape[:3]:
        raise DimensionError(f"couplings {c.shape} do not match predictions {u.shape}")
    out = (c[..., None] * u).sum(axis=1)

    def adjoint(g):
        return (u * g[:, None]).sum(axis=-1), c[..., None] * g[:, None]

    return ad._emit("route_sum", (couplings, predictions), out, adjoint)


def agreement(predictions: Tensor, outputs: Tensor) -> Tensor:
    """``a[n, i, j] = u_hat[n, i, j] . v[n, j]``."""
    u, v = predictions.data, outputs.data
    out = (u * v[:, None]).sum(axis=-1)

    def adjoint(g):
        return g[..., None] * v[:, None], (g[..., None] * u).sum(axis=1)

    return ad._emit("agreement", (predictions, outputs), out, adjoint)


def routing(predictions: Tensor, iterations: int = 3,
            differentiable: bool = False) -> tuple[Tensor, RoutingState]:
    """Dynamic routing over predictions ``(N x) in x out x dim``.

    By default the logit updates are stop-gradient control flow: gradients
    reach the predictions through ``s_j = sum_i c_ij u_j|i`` with the
    couplings held constant. ``differentiable=True`` records the updates too.
    """
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    if predictions.ndim == 3:
        v, state = routing(ad.reshape(predictions, (1,) + predictions.shape), iterations,
                           differentiable)
        state.logits, state.couplings = state.logits[0], state.couplings[0]
        state.history = [c[0] for c in state.history]
        return ad.reshape(v, v.shape[1:]), state
    if predictions.ndim != 4:
        raise DimensionError(f"routing expects (N x) in x out x dim, got {predictions.shape}")
    n, n_in, n_out, _ = predictions.shape
    replay = getattr(_replay_state, "active", None)
    logits = np.zeros((n, n_in, n_out))
    b: Tensor | np.ndarray = Tensor(logits) if differentiable else logits
    history = []
    for it in range(iterations):
        last = it == iterations - 1
        if differentiable:
            c = ad.softmax_axis(b, axis=2)
        else:
            cd = _softmax_np(b)
            if last and replay is not None:
                cd = replay._take(cd)
            c = Tensor(cd)
        history.append(c.data)
        v = squash(route_sum(c, predictions))
        if not last:
            if differentiable:
                b = ad.add(b, agreement(predictions, v))
            else:
                b = b + (predictions.data * v.data[:, None]).sum(axis=-1)
    final_b = b.data if isinstance(b, Tensor) else b
    return v, RoutingState(final_b, history[-1], iterations, history)


def capsule_layer(inputs: Tensor, weights: Tensor, iterations: int = 3,
                  differentiable: bool = False) -> tuple[Tensor, RoutingState]:
    """Routed capsule layer; ``weights`` is ``in x out x dim_out x dim_in``."""
    if iterations < 1:
        raise ConfigurationError(f"routing needs at least one iteration, got {iterations}")
    if inputs.ndim == 2:
        v, state = capsule_layer(ad.reshape(inputs, (1,) + inputs.shape), weights, iterations,
                                 differentiable)
        state.logits, state.couplings = state.logits[0], state.couplings[0]
        state.history = [c[0] for c in state.history]
        return ad.reshape(v, v.shape[1:]), state
    if (inputs.ndim != 3 or weights.ndim != 4 or weights.shape[0] != inputs.shape[1]
            or weights.shape[3] != inputs.shape[2]):
        raise DimensionError(f"capsule_layer: weights {weights.shape} vs capsules {inputs.shape}")
    uhat = predict(inputs, weights)
    return routing(uhat, iterations, differentiable)


@dataclass(frozen=True)
class MarginLossConfig:
    m_plus: float = 0.9
    m_minus: float = 0.1
    lambda_neg: float = 0.5
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not 0 < self.m_minus < self.m_plus < 1:
            raise ConfigurationError(f"need 0 < m_minus < m_plus < 1, got {self.m_minus}, {self.m_plus}")
        if not 0 < self.lambda_neg <= 1:
            raise ConfigurationError(f"lambda_neg must lie in (0, 1], got {self.lambda_neg}")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ConfigurationError(f"class weights must be positive, got {self.class_weights}")

    def with_weights(self, weights: Sequence[float]) -> "MarginLossConfig":
        return MarginLossConfig(self.m_plus, self.m_minus, self.lambda_neg,
                                tuple(float(w) for w in weights))


def inverse_frequency_weights(labels: Sequence[int], n_classes: int) -> tuple[float, ...]:
    """Inverse class frequencies rescaled to mean 1."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)[:n_classes]
    if (counts == 0).any():
        raise DataError(f"every class needs at least one example, counts {counts.tolist()}")
    inv = 1.0 / counts
    return tuple(float(w) for w in inv * n_classes / inv.sum())


def margin_loss(norms: Tensor, targets, config: MarginLossConfig) -> Tensor:
    """Class-weighted margin loss, averaged over the batch.

    Per sample: ``w_t max(0, m+ - |v_t|)^2 + lambda sum_{k != t} w_k max(0,
    |v_k| - m-)^2``.
    """
    if norms.ndim == 1:
        return margin_loss(ad.reshape(norms, (1, norms.shape[0])), [int(targets)], config)
    n, k = norms.shape
    if (norms.data < 0).any() or (norms.data >= 1).any():
        raise ContractError("margin_loss: capsule norms must lie in [0, 1)")
    targets = np.asarray(targets, dtype=int).reshape(-1)
    if targets.shape[0] != n or (targets < 0).any() or (targets >= k).any():
        raise ContractError(f"margin_loss: targets {targets.tolist()} invalid for {k} classes")
    weights = np.ones(k) if config.class_weights is None else np.asarray(config.class_weights)
    if weights.shape != (k,):
        raise ConfigurationError(f"{weights.shape[0]} class weights for {k} classes")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    pos = ad.square(ad.relu(ad.add_constant(ad.scale(norms, -1.0), config.m_plus)))
    neg = ad.square(ad.relu(ad.add_constant(norms, -config.m_minus)))
    w = np.broadcast_to(weights, (n, k))
    per = ad.add(ad.mul(pos, onehot * w), ad.mul(neg, config.lambda_neg * (1.0 - onehot) * w))
    return ad.scale(ad.sum(per), 1.0 / n)
