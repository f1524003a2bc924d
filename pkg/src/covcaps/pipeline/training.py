"""Adam optimiser and the shared mini-batch training loop with best-validation selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..autodiff import ComputationRecord, Tensor, backward
from ..errors import ConfigurationError
from .networks import Network


@dataclass(frozen=True)
class TrainSpec:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 150
    seed: int = 0
    validation_fraction: float = 0.30

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError(f"invalid training spec {self}")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainHistory:
    initial_train_loss: float
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return {"initial_train_loss": self.initial_train_loss, "train_loss": self.train_loss,
                "val_loss": self.val_loss, "best_epoch": self.best_epoch}


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


def batches(indices: np.ndarray, size: int) -> list[np.ndarray]:
    """Consecutive chunks; a trailing singleton joins the previous chunk (batch norm needs 2)."""
    chunks = [indices[i:i + size] for i in range(0, len(indices), size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def split_validation(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Per-class random hold-out of ``fraction`` of the items; returns (train, val) indices."""
    labels = np.asarray(labels)
    train, val = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(members.size)]
        n_val = int(round(fraction * members.size))
        if n_val >= members.size:
            n_val = members.size - 1
        val.extend(members[:n_val].tolist())
        train.extend(members[n_val:].tolist())
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


LossFn = Callable[[np.ndarray, bool], Tensor]


def evaluate_loss(loss_fn: LossFn, indices: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for chunk in batches(indices, batch_size):
        total += loss_fn(chunk, False).item() * len(chunk)
    return total / max(len(indices), 1)


def fit(net: Network, loss_fn: LossFn, train_idx: np.ndarray, val_idx: np.ndarray,
        spec: TrainSpec, rng: np.random.Generator,
        log: Callable[[str], None] | None = None) -> TrainHistory:
    """Adam on ``loss_fn`` over mini-batches; ``net`` ends at its best-validation state.

    ``loss_fn(indices, training)`` returns the mean loss over those items. With
    no validation items the training loss drives model selection.
    """
    opt = Adam(net.params, spec.learning_rate)
    eval_bs = max(spec.batch_size, 32)
    history = TrainHistory(evaluate_loss(loss_fn, train_idx, eval_bs))
    best, best_state = np.inf, net.state_arrays()
    for epoch in range(spec.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        total = 0.0
        for chunk in batches(order, spec.batch_size):
            with ComputationRecord() as rec:
                loss = loss_fn(chunk, True)
            backward(rec, loss)
            opt.step()
            total += loss.item() * len(chunk)
        history.train_loss.append(total / train_idx.size)
        score = evaluate_loss(loss_fn, val_idx, eval_bs) if val_idx.size else history.train_loss[-1]
        history.val_loss.append(score)
        if score < best:
            best, best_state, history.best_epoch = score, net.state_arrays(), epoch
        if log:
            log(f"epoch {epoch + 1}/{spec.epochs} train {history.train_loss[-1]:.5f} "
                f"val {score:.5f}")
    net.load_arrays(best_state)
    return history
