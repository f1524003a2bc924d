"""Stage 1 slice scoring, candidate selection, gated stage 2, and the clinical fusion head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import CLASS_NAMES
from .. import autodiff as ad
from ..autodiff import Tensor
from ..capsules import inverse_frequency_weights, margin_loss
from ..data import ClinicalFeatures
from ..errors import ConfigurationError, DataError, DimensionError
from .networks import FUSION_INPUTS, FusionMLP, Stage1Config, Stage1Net, Stage2Config, Stage2Net
from .training import TrainHistory, TrainSpec, fit, split_validation

NORMAL = CLASS_NAMES.index("normal")


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


# stage 1 -------------------------------------------------------------------

def infection_probability(norms: np.ndarray) -> np.ndarray:
    """``|v_inf| / (|v_inf| + |v_non|)`` per row of ``(non, inf)`` norms; 0.5 when both vanish."""
    norms = np.atleast_2d(norms)
    total = norms[:, 0] + norms[:, 1]
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, norms[:, 1] / safe, 0.5)


def stage1_norms(net: Stage1Net, slices: np.ndarray, batch_size: int = 64) -> np.ndarray:
    slices = np.asarray(slices, dtype=np.float64)
    if slices.ndim == 2:
        slices = slices[None]
    side = net.config.input_side
    if slices.shape[-2:] != (side, side):
        raise DimensionError(f"stage 1 expects {side}x{side} slices, got {slices.shape[-2:]}")
    slices = slices.reshape(-1, 1, side, side)
    out = [net.forward(slices[s]).norms.data for s in _chunks(len(slices), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def infer_stage1(net: Stage1Net, slices: np.ndarray) -> np.ndarray:
    """Infection probability for one ``side x side`` slice or a stack of them."""
    return infection_probability(stage1_norms(net, slices))


def train_stage1(slices: np.ndarray, labels: np.ndarray, config: Stage1Config, spec: TrainSpec,
                 groups: np.ndarray | None = None, rng: np.random.Generator | None = None,
                 log=None) -> tuple[Stage1Net, TrainHistory]:
    """Fit the slice-level infected/non-infected capsule network.

    ``groups`` (patient ids per slice) makes the validation hold-out
    patient-wise, so no patient contributes slices to both sides.
    """
    x = np.asarray(slices, dtype=np.float64)
    y = np.asarray(labels, dtype=int)
    if x.ndim == 3:
        x = x[:, None]
    if len(np.unique(y)) < 2:
        raise DataError("stage 1 training needs both infected and non-infected slices")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    net = Stage1Net(config, rng)
    if groups is None:
        train_idx, val_idx = split_validation(y, spec.validation_fraction, rng)
    else:
        groups = np.asarray(groups)
        ids = np.unique(groups)
        has_inf = np.array([y[groups == g].max() for g in ids])
        g_train, g_val = split_validation(has_inf, spec.validation_fraction, rng)
        train_idx = np.flatnonzero(np.isin(groups, ids[g_train]))
        val_idx = np.flatnonzero(np.isin(groups, ids[g_val]))
        if len(np.unique(y[train_idx])) < 2:
            raise DataError("patient-wise split left a single slice class in the training part")
    loss_cfg = config.loss
    if loss_cfg.class_weights is None:
        loss_cfg = loss_cfg.with_weights(inverse_frequency_weights(y[train_idx], 2))

    def loss_fn(idx, training):
        return margin_loss(net.forward(x[idx], training).norms, y[idx], loss_cfg)

    history = fit(net, loss_fn, train_idx, val_idx, spec, rng, log)
    return net, history


# candidates and gating -----------------------------------------------------

@dataclass
class CandidateSet:
    patient_id: str
    indices: np.ndarray
    p_inf: np.ndarray
    slices: np.ndarray | None = None


def select_candidates(p_infs, k: int, patient_id: str = "", slices=None) -> CandidateSet:
    """Top ``k`` slices by infection probability, ties by slice index.

    Fewer than ``k`` slices are padded by repeating the best one.
    """
    p = np.asarray(p_infs, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise DataError(f"patient {patient_id!r}: no slices to select candidates from")
    if k < 1:
        raise ConfigurationError(f"candidate count must be positive, got {k}")
    order = np.lexsort((np.arange(p.size), -p))[:k]
    if order.size < k:
        order = np.concatenate([order, np.full(k - order.size, order[0])])
    chosen = None if slices is None else np.asarray(slices)[order]
    return CandidateSet(patient_id, order, p[order], chosen)


def decide(scores: np.ndarray) -> int:
    """Arg-max class; exact ties go to normal, else to the lower class index."""
    scores = np.asarray(scores)
    top = np.flatnonzero(scores == scores.max())
    return NORMAL if NORMAL in top else int(top[0])


def normalise_scores(scores: np.ndarray) -> np.ndarray:
    total = scores.sum(axis=-1, keepdims=True)
    uniform = np.full_like(scores, 1.0 / scores.shape[-1])
    return np.where(total > 0, scores / np.where(total > 0, total, 1.0), uniform)


@dataclass
class GateResult:
    scores: np.ndarray
    probabilities: np.ndarray
    decision: int


def gate_matrix(p_inf: np.ndarray) -> np.ndarray:
    """``(..., K, 3)`` multipliers ``(p, p, 1 - p)`` per candidate."""
    p = np.asarray(p_inf, dtype=np.float64)
    return np.stack([p, p, 1.0 - p], axis=-1)


def gated_pool(norms: Tensor, p_inf: np.ndarray) -> Tensor:
    """Differentiable gating and global max over the candidate axis (second to last)."""
    gate = gate_matrix(p_inf)
    if gate.shape != norms.shape:
        raise DimensionError(f"gate {gate.shape} does not match candidate norms {norms.shape}")
    return ad.max_axis(ad.mul(norms, gate), axis=-2)


def gate_and_pool(per_candidate_norms, p_inf) -> GateResult:
    norms = np.asarray(per_candidate_norms, dtype=np.float64)
    if norms.ndim != 2 or norms.shape[1] != 3 or norms.shape[0] != np.size(p_inf) or norms.shape[0] < 1:
        raise DimensionError(f"need K x 3 norms and K probabilities, got {norms.shape} and "
                             f"{np.shape(p_inf)}")
    scores = gated_pool(Tensor(norms), np.asarray(p_inf).reshape(-1)).data
    return GateResult(scores, normalise_scores(scores), decide(scores))


# stage 2 -------------------------------------------------------------------

def _stage2_scores(net: Stage2Net, images: np.ndarray, p_inf: np.ndarray, training: bool,
                   differentiable_routing: bool = False) -> Tensor:
    n, k = p_inf.shape
    side = net.config.input_side
    fwd = net.forward(images.reshape(n * k, 1, side, side), training, differentiable_routing)
    return gated_pool(ad.reshape(fwd.norms, (n, k, 3)), p_inf)


def train_stage2(candidates: list[CandidateSet], labels, config: Stage2Config, spec: TrainSpec,
                 rng: np.random.Generator | None = None, log=None) -> tuple[Stage2Net, TrainHistory]:
    """Fit the shared candidate network on the pooled, gated class scores."""
    y = np.asarray(labels, dtype=int)
    if set(np.unique(y).tolist()) != {0, 1, 2}:
        raise DataError("stage 2 training needs covid, cap and normal patients")
    k = config.candidate_count
    for c in candidates:
        if c.slices is None or len(c.indices) != k:
            raise ConfigurationError(f"patient {c.patient_id}: expected {k} candidate slices")
    images = np.stack([c.slices for c in candidates]).astype(np.float64)
    p_inf = np.stack([c.p_inf for c in candidates])
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    net = Stage2Net(config, rng)
    train_idx, val_idx = split_validation(y, spec.validation_fraction, rng)
    loss_cfg = config.loss
    if loss_cfg.class_weights is None:
        loss_cfg = loss_cfg.with_weights(inverse_frequency_weights(y[train_idx], 3))

    def loss_fn(idx, training):
        return margin_loss(_stage2_scores(net, images[idx], p_inf[idx], training), y[idx], loss_cfg)

    history = fit(net, loss_fn, train_idx, val_idx, spec, rng, log)
    return net, history


def stage2_scores(net: Stage2Net, candidates: list[CandidateSet], batch_size: int = 8) -> np.ndarray:
    k = net.config.candidate_count
    for c in candidates:
        if c.slices is None or len(c.indices) != k:
            raise ConfigurationError(f"patient {c.patient_id}: expected {k} candidate slices, "
                                     f"got {len(c.indices)}")
    out = []
    for s in _chunks(len(candidates), batch_size):
        part = candidates[s]
        images = np.stack([c.slices for c in part]).astype(np.float64)
        out.append(_stage2_scores(net, images, np.stack([c.p_inf for c in part]), False).data)
    return np.concatenate(out) if out else np.zeros((0, 3))


def infer_stage2(net: Stage2Net, candidates: CandidateSet) -> GateResult:
    scores = stage2_scores(net, [candidates])[0]
    return GateResult(scores, normalise_scores(scores), decide(scores))


# fusion --------------------------------------------------------------------

def _standardiser(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sd = values.std(axis=0)
    return values.mean(axis=0), np.where(sd > 0, sd, 1.0)


@dataclass(frozen=True)
class FusionScaler:
    """z-scoring of the continuous fusion inputs with statistics of one training split.

    The three class probabilities, age and weight are standardised; sex and
    the symptom indicators stay 0/1. Left in [0, 1], the probabilities vary
    less than the z-scored clinical columns and a small training set lets
    the MLP lean on clinical noise instead of the image evidence.
    """

    prob_mean: tuple[float, float, float]
    prob_sd: tuple[float, float, float]
    age_mean: float
    age_sd: float
    weight_mean: float
    weight_sd: float

    @classmethod
    def fit(cls, class_probs: np.ndarray, clinical: list[ClinicalFeatures]) -> "FusionScaler":
        probs = _class_probs(class_probs, len(clinical))
        raw = np.stack([c.raw_vector() for c in clinical])
        pm, psd = _standardiser(probs)
        cm, csd = _standardiser(raw[:, 1:3])
        return cls(tuple(float(v) for v in pm), tuple(float(v) for v in psd),
                   float(cm[0]), float(csd[0]), float(cm[1]), float(csd[1]))

    @classmethod
    def from_dict(cls, d: dict) -> "FusionScaler":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self).items()}

    def transform(self, class_probs: np.ndarray, clinical: list[ClinicalFeatures]) -> np.ndarray:
        probs = (_class_probs(class_probs, len(clinical)) - self.prob_mean) / self.prob_sd
        raw = np.stack([c.raw_vector() for c in clinical]).reshape(len(clinical), -1)
        raw[:, 1] = (raw[:, 1] - self.age_mean) / self.age_sd
        raw[:, 2] = (raw[:, 2] - self.weight_mean) / self.weight_sd
        return np.concatenate([probs, raw], axis=1)


def _class_probs(class_probs, n: int) -> np.ndarray:
    probs = np.atleast_2d(np.asarray(class_probs, dtype=np.float64))
    if probs.shape != (n, 3):
        raise DataError(f"need {n} x 3 class probabilities, got shape {probs.shape}")
    return probs


def fusion_inputs(class_probs: np.ndarray, clinical: list[ClinicalFeatures],
                  scaler: FusionScaler) -> np.ndarray:
    """The 11 fusion features per patient: scaled class probabilities, then clinical data."""
    if not clinical:
        raise DataError("no patients to build fusion inputs for")
    return scaler.transform(class_probs, clinical)


def _check_fusion(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != FUSION_INPUTS:
        raise DataError(f"fusion inputs need {FUSION_INPUTS} features, got shape {x.shape}")
    return x


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    n = logits.shape[0]
    onehot = np.zeros(logits.shape)
    onehot[np.arange(n), targets] = 1.0
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits, axis=1), onehot)), -1.0 / n)


def train_fusion_mlp(inputs, labels, spec: TrainSpec, rng: np.random.Generator | None = None,
                     log=None) -> tuple[FusionMLP, TrainHistory]:
    x = _check_fusion(inputs)
    y = np.asarray(labels, dtype=int)
    if x.shape[0] != y.shape[0]:
        raise DataError(f"{x.shape[0]} fusion inputs for {y.shape[0]} labels")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    net = FusionMLP(rng)
    train_idx, val_idx = split_validation(y, spec.validation_fraction, rng)

    def loss_fn(idx, training):
        return cross_entropy(net.logits(x[idx], training), y[idx])

    history = fit(net, loss_fn, train_idx, val_idx, spec, rng, log)
    return net, history


def infer_fusion(net: FusionMLP, inputs) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities (n x 3) and decisions, using running batch-norm statistics."""
    x = _check_fusion(inputs)
    probs = ad.softmax_axis(net.logits(x, training=False), axis=1).data
    return probs, probs.argmax(axis=1)
