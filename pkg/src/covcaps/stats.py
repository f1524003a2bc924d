"""Evaluation statistics: stratified folds, metrics, ROC/AUC, exact McNemar, logistic regression."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import CLASS_NAMES, jsonio
from .errors import ConfigurationError, ContractError, DataError, NumericError

P_VALUE_DECIMALS = 4


def round_p(p: float | None) -> float | None:
    return None if p is None else round(float(p), P_VALUE_DECIMALS)


# folds ---------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    """``assignment[i]`` is the fold holding patient ``i``."""

    assignment: np.ndarray
    k: int
    class_counts: np.ndarray  # k x n_classes

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)


def stratified_kfold(labels: Sequence[int], k: int, seed: int,
                     n_classes: int = len(CLASS_NAMES)) -> FoldSplit:
    """Seeded per-class shuffle, then round-robin dealing into ``k`` folds.

    The dealing position carries over from one class to the next, so fold
    sizes never differ by more than one in total as well as per class.
    """
    if k < 1:
        raise ConfigurationError(f"number of folds must be at least 1, got {k}")
    y = np.asarray(labels, dtype=int)
    if y.size and ((y < 0).any() or (y >= n_classes).any()):
        raise DataError(f"labels must lie in 0..{n_classes - 1}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(y.size, dtype=int)
    cursor = 0
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        members = members[rng.permutation(members.size)]
        assignment[members] = (cursor + np.arange(members.size)) % k
        cursor = (cursor + members.size) % k
    counts = np.zeros((k, n_classes), dtype=int)
    np.add.at(counts, (assignment, y), 1)
    return FoldSplit(assignment, k, counts)


# metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,fpr,tpr\n")
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            buf.write(f"{_fmt_threshold(t)},{float(f)!r},{float(p)!r}\n")
        return buf.getvalue()


def _fmt_threshold(t: float) -> str:
    if np.isposinf(t):
        return "inf"
    if np.isneginf(t):
        return "-inf"
    return repr(float(t))


def roc_auc(scores: Sequence[float], truths: Sequence[int]) -> RocCurve:
    """ROC over every distinct score plus the +/-inf endpoints; trapezoidal area.

    ``truths`` are 1 for the positive class. A point at threshold ``t``
    counts scores ``>= t`` as positive, so tied scores move both rates at once
    and the trapezoid credits them one half, matching pair counting.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(truths, dtype=int).reshape(-1)
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores for {y.size} truths")
    if not np.isfinite(s).all():
        raise DataError("ROC scores must be finite")
    n_pos, n_neg = int((y == 1).sum()), int((y != 1).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both positive and negative cases")
    distinct = np.unique(s)[::-1]
    thresholds = np.concatenate([[np.inf], distinct, [-np.inf]])
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], (y[order] == 1)
    cum_tp = np.concatenate([[0], np.cumsum(pos_sorted)])
    cum_fp = np.concatenate([[0], np.cumsum(~pos_sorted)])
    # number of scores >= each distinct threshold
    above = np.searchsorted(-s_sorted, -distinct, side="right")
    tp = np.concatenate([[0], cum_tp[above], [n_pos]])
    fp = np.concatenate([[0], cum_fp[above], [n_neg]])
    tpr, fpr = tp / n_pos, fp / n_neg
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def auc_pairwise(scores: Sequence[float], truths: Sequence[int]) -> float:
    """O(n^2) reference: fraction of (positive, negative) pairs ranked correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(truths, dtype=int)
    pos, neg = s[y == 1], s[y != 1]
    if pos.size == 0 or neg.size == 0:
        raise DataError("AUC needs both positive and negative cases")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # truth rows, decision columns
    sensitivity: dict[str, float | None]
    accuracy: float
    n: int
    roc: RocCurve | None = None
    extra: dict = field(default_factory=dict)

    @property
    def auc(self) -> float | None:
        return None if self.roc is None else self.roc.auc

    def to_dict(self) -> dict:
        d = {"confusion": self.confusion.tolist(), "sensitivity": self.sensitivity,
             "accuracy": self.accuracy, "n": self.n, "auc": self.auc}
        if self.roc is not None:
            d["roc_points"] = [[float(f), float(t)] for f, t in zip(self.roc.fpr, self.roc.tpr)]
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return jsonio.dumps(self.to_dict())


def compute_metrics(decisions: Sequence[int], truths: Sequence[int],
                    covid_scores: Sequence[float] | None = None,
                    class_names: Sequence[str] = CLASS_NAMES) -> MetricsReport:
    """Confusion matrix, per-class sensitivity and accuracy; ROC for covid vs rest if scored."""
    d = np.asarray(decisions, dtype=int).reshape(-1)
    t = np.asarray(truths, dtype=int).reshape(-1)
    k = len(class_names)
    if d.size == 0:
        raise DataError("no decisions to evaluate")
    if d.shape != t.shape:
        raise DataError(f"{d.size} decisions for {t.size} truths")
    for name, arr in (("decision", d), ("truth", t)):
        if (arr < 0).any() or (arr >= k).any():
            raise DataError(f"{name} labels must lie in 0..{k - 1}")
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (t, d), 1)
    rows = confusion.sum(axis=1)
    sens = {name: (float(confusion[c, c] / rows[c]) if rows[c] else None)
            for c, name in enumerate(class_names)}
    roc = None
    if covid_scores is not None:
        positive = (t == 0).astype(int)
        if 0 < positive.sum() < positive.size:
            roc = roc_auc(covid_scores, positive)
    return MetricsReport(confusion, sens, float(np.trace(confusion) / d.size), int(d.size), roc)


# McNemar -------------------------------------------------------------------

def mcnemar_exact(b: int, c: int) -> float:
    """Exact two-sided McNemar p-value from the two discordant counts."""
    if int(b) != b or int(c) != c or b < 0 or c < 0:
        raise ContractError(f"discordant counts must be non-negative integers, got ({b}, {c})")
    b, c = int(b), int(c)
    n = b + c
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(min(b, c) + 1))
    # exact rational arithmetic until the final division
    return min(1.0, 2 * tail / 2**n)


def discordant_counts(truths, decisions_a, decisions_b) -> tuple[int, int]:
    """``(b, c)``: cases only A gets wrong, cases only B gets wrong."""
    t, a, b = (np.asarray(v, dtype=int) for v in (truths, decisions_a, decisions_b))
    if not t.shape == a.shape == b.shape:
        raise DataError("paired decisions must have the same length as the truths")
    wrong_a, wrong_b = a != t, b != t
    return int((wrong_a & ~wrong_b).sum()), int((~wrong_a & wrong_b).sum())


# logistic regression -------------------------------------------------------

@dataclass
class LogisticFit:
    """Coefficients are ``[intercept, features...]``; inference fields are None on separation."""

    coefficients: np.ndarray
    standard_errors: np.ndarray | None
    z: np.ndarray | None
    p_values: np.ndarray | None
    converged: bool
    separation: bool
    iterations: int
    names: tuple[str, ...]

    def to_dict(self) -> dict:
        def opt(a):
            return None if a is None else [float(x) for x in a]
        return {"names": list(self.names), "coefficients": opt(self.coefficients),
                "standard_errors": opt(self.standard_errors), "z": opt(self.z),
                "p_values": None if self.p_values is None else [round_p(p) for p in self.p_values],
                "converged": self.converged, "separation": self.separation,
                "iterations": self.iterations}


def _normal_two_sided(z: np.ndarray) -> np.ndarray:
    return np.array([math.erfc(abs(v) / math.sqrt(2.0)) for v in np.atleast_1d(z)])


def _log_likelihood(beta: np.ndarray, xd: np.ndarray, y: np.ndarray) -> float:
    eta = xd @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fit(x, y, names: Sequence[str] | None = None, tolerance: float = 1e-10,
                 max_iterations: int = 100, separation_bound: float = 15.0) -> LogisticFit:
    """Newton-Raphson maximum likelihood with an intercept and Wald tests.

    Separation (complete or quasi-complete) is declared when linear predictors
    grow past ``separation_bound`` in magnitude, each on the side of its own
    outcome: the likelihood is then still rising towards infinite
    coefficients, the estimate does not exist, and no p-values are reported.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, p = x.shape
    names = tuple(names) if names is not None else tuple(f"x{i + 1}" for i in range(p))
    if len(names) != p:
        raise DataError(f"{len(names)} names for {p} features")
    if y.size != n:
        raise DataError(f"{n} rows for {y.size} outcomes")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("outcomes must be 0 or 1")
    if n <= p + 1:
        raise DataError(f"need more observations than parameters ({n} <= {p + 1})")
    xd = np.column_stack([np.ones(n), x])
    _check_rank(xd, ("intercept",) + names)
    beta = np.zeros(p + 1)
    converged = separation = False
    it = 0
    for it in range(1, max_iterations + 1):
        eta = xd @ beta
        mu = 0.5 * (1.0 + np.tanh(0.5 * eta))
        grad = xd.T @ (y - mu)
        if np.linalg.norm(grad) < tolerance:
            converged = True
            break
        w = mu * (1.0 - mu)
        hess = xd.T @ (xd * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            separation = True
            break
        if not np.isfinite(step).all():
            separation = True
            break
        # step halving keeps each update an ascent step
        ll0, t = _log_likelihood(beta, xd, y), 1.0
        while _log_likelihood(beta + t * step, xd, y) < ll0 - 1e-12 and t > 1e-8:
            t /= 2
        beta = beta + t * step
        if _separated(xd @ beta, y, separation_bound):
            separation = True
            break
    names_full = ("intercept",) + names
    separation = separation or _separated(xd @ beta, y, separation_bound)
    if separation or not converged:
        return LogisticFit(beta, None, None, None, converged and not separation, separation, it,
                           names_full)
    mu = 0.5 * (1.0 + np.tanh(0.5 * (xd @ beta)))
    cov = np.linalg.inv(xd.T @ (xd * (mu * (1 - mu))[:, None]))
    se = np.sqrt(np.diag(cov))
    z = beta / se
    return LogisticFit(beta, se, z, np.clip(_normal_two_sided(z), 0.0, 1.0), True, False, it,
                       names_full)


def _separated(eta: np.ndarray, y: np.ndarray, bound: float) -> bool:
    """Some fitted probabilities are pinned to their observed outcome beyond ``bound`` logits."""
    extreme = np.abs(eta) > bound
    return bool(extreme.any() and np.all((eta[extreme] > 0) == (y[extreme] == 1)))


def _check_rank(xd: np.ndarray, names: tuple[str, ...]) -> None:
    for j in range(1, xd.shape[1]):
        if np.ptp(xd[:, j]) == 0:
            raise NumericError(f"feature {names[j]!r} is constant; design is rank deficient")
    for j in range(2, xd.shape[1] + 1):
        if np.linalg.matrix_rank(xd[:, :j]) < j:
            raise NumericError(f"feature {names[j - 1]!r} is a linear combination of earlier "
                               "columns; design is rank deficient")


# severity ------------------------------------------------------------------

NO_FINDINGS = "no-findings"


def severity_breakdown(decisions, truths, severities, positive: int = 0) -> dict[str, dict[str, int]]:
    """Correct / incorrect counts for truly positive patients, bucketed by severity.

    Severity 0 (or None) is reported as ``"no-findings"``.
    """
    d = np.asarray(decisions, dtype=int)
    t = np.asarray(truths, dtype=int)
    sev = list(severities)
    if not d.shape == t.shape or len(sev) != t.size:
        raise DataError("decisions, truths and severities must have equal lengths")
    table: dict[str, dict[str, int]] = {}
    for di, ti, si in zip(d, t, sev):
        if ti != positive:
            continue
        key = NO_FINDINGS if not si else str(int(si))
        row = table.setdefault(key, {"correct": 0, "incorrect": 0})
        row["correct" if di == ti else "incorrect"] += 1
    return dict(sorted(table.items(), key=lambda kv: (kv[0] != NO_FINDINGS, kv[0])))


# aggregation ---------------------------------------------------------------

def mean_sd(values: Sequence[float]) -> dict[str, float | None]:
    """Mean and population standard deviation, skipping missing entries."""
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "sd": None}
    return {"mean": float(v.mean()), "sd": float(v.std())}
