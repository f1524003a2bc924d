"""K-fold protocol: per fold train stage 1, stage 2 and the fusion head, then evaluate.

Output layout under ``out_dir``::

    config.json                 resolved run configuration (receipt)
    fold_<i>/report.json        metrics of the held-out patients of fold i
    fold_<i>/roc.csv            covid-vs-rest ROC of the CT-only model
    fold_<i>/roc_fusion.csv     same for the fusion model
    fold_<i>/model.cvcp         the fold's trained stages
    aggregate.json              mean and population SD over folds, pooled counts
    folds.csv                   one row per fold
    roc.png, accuracy.png       figures
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Callable

import numpy as np

from . import CLASS_NAMES, jsonio
from .config import RunConfig
from .data import PatientRecord, preprocess_record
from .errors import ConfigurationError, DataError
from .pipeline.model import TwoStageModel
from .pipeline.stages import (
    FusionScaler,
    fusion_inputs,
    infer_stage1,
    normalise_scores,
    select_candidates,
    stage2_scores,
    train_fusion_mlp,
    train_stage1,
    train_stage2,
)
from .seeding import stream
from .stats import (
    compute_metrics,
    discordant_counts,
    mcnemar_exact,
    mean_sd,
    round_p,
    severity_breakdown,
    stratified_kfold,
)

Log = Callable[[str], None]


def _quiet(_: str) -> None:
    pass


def fold_dir(out_dir, fold: int) -> Path:
    return Path(out_dir) / f"fold_{fold:02d}"


def train_fold_model(records: list[PatientRecord], cfg: RunConfig, seed_key: tuple,
                     log: Log = _quiet) -> tuple[TwoStageModel, dict]:
    """Train all three parts on ``records``; returns the model and training summaries."""
    side1 = cfg.stage1.input_side
    x1 = [preprocess_record(r, side1) for r in records]
    for r in records:
        if r.infected is None:
            raise DataError(f"patient {r.id}: per-slice infection labels are needed for stage 1")
    slices = np.concatenate(x1)
    slice_labels = np.concatenate([r.infected.astype(int) for r in records])
    groups = np.concatenate([[r.id] * len(x) for r, x in zip(records, x1)])
    log(f"stage 1: {len(slices)} slices from {len(records)} patients")
    stage1, h1 = train_stage1(slices, slice_labels, cfg.stage1, cfg.stage1_training, groups=groups,
                              rng=stream(cfg.seed, *seed_key, "stage1"),
                              log=lambda s: log("  stage 1 " + s))
    model = TwoStageModel(stage1=stage1)
    side2 = cfg.stage2.input_side
    k = cfg.stage2.candidate_count
    cands = []
    for r, x in zip(records, x1):
        p = infer_stage1(stage1, x)
        cands.append(select_candidates(p, k, r.id, x if side2 == side1 else preprocess_record(r, side2)))
    labels = np.array([r.label_index for r in records])
    log(f"stage 2: {len(cands)} patients x {k} candidates")
    stage2, h2 = train_stage2(cands, labels, cfg.stage2, cfg.stage2_training,
                              rng=stream(cfg.seed, *seed_key, "stage2"),
                              log=lambda s: log("  stage 2 " + s))
    model.stage2 = stage2
    # the fusion head learns from the stage outputs on the same training patients
    ct_probs = normalise_scores(stage2_scores(stage2, cands))
    scaler = FusionScaler.fit(ct_probs, [r.clinical for r in records])
    inputs = fusion_inputs(ct_probs, [r.clinical for r in records], scaler)
    fusion, h3 = train_fusion_mlp(inputs, labels, cfg.fusion_training,
                                  rng=stream(cfg.seed, *seed_key, "fusion"),
                                  log=lambda s: log("  fusion " + s))
    model.fusion, model.scaler = fusion, scaler
    summary = {"stage1": h1.to_dict(), "stage2": h2.to_dict(), "fusion": h3.to_dict()}
    return model, summary


def evaluate_fold(model: TwoStageModel, records: list[PatientRecord]) -> dict:
    """Held-out metrics for the CT-only path and the fusion path."""
    preds = model.predict(records)
    truths = np.array([r.label_index for r in records])
    ct_dec = np.array([p.ct_decision for p in preds])
    fu_dec = np.array([p.fusion_decision for p in preds])
    ct = compute_metrics(ct_dec, truths, [p.ct_probabilities[0] for p in preds])
    fu = compute_metrics(fu_dec, truths, [p.fusion_probabilities[0] for p in preds])
    correct = total = 0
    for r, p in zip(records, preds):
        if r.infected is not None:
            correct += int(((p.p_inf > 0.5) == r.infected).sum())
            total += r.infected.size
    b, c = discordant_counts(truths, ct_dec, fu_dec)
    severities = [r.severity for r in records]
    return {
        "n": len(records),
        "stage1_slice_accuracy": correct / total if total else None,
        "stage1_slices": total,
        "ct_only": ct.to_dict(),
        "fusion": fu.to_dict(),
        "mcnemar": {"b": b, "c": c, "p": round_p(mcnemar_exact(b, c))},
        "severity": {"ct_only": severity_breakdown(ct_dec, truths, severities),
                     "fusion": severity_breakdown(fu_dec, truths, severities)},
        "predictions": [{"patient": r.id, "truth": int(t), **_pred_fields(p)}
                        for r, t, p in zip(records, truths, preds)],
        "_roc": (ct.roc, fu.roc),
    }


def _pred_fields(p) -> dict:
    return {"ct_decision": p.ct_decision, "ct_probabilities": p.ct_probabilities.tolist(),
            "fusion_decision": p.fusion_decision,
            "fusion_probabilities": p.fusion_probabilities.tolist()}


def run_fold(records: list[PatientRecord], cfg: RunConfig, fold: int, out_dir,
             log: Log = _quiet) -> dict:
    labels = [r.label_index for r in records]
    split = stratified_kfold(labels, cfg.k, cfg.seed)
    if not 0 <= fold < cfg.k:
        raise ConfigurationError(f"fold {fold} outside 0..{cfg.k - 1}")
    test = [records[i] for i in split.test_indices(fold)]
    train = [records[i] for i in split.train_indices(fold)]
    if not test:
        raise DataError(f"fold {fold} has no held-out patients")
    log(f"fold {fold}: {len(train)} training, {len(test)} held-out patients")
    model, summary = train_fold_model(train, cfg, ("fold", fold), log)
    report = evaluate_fold(model, test)
    ct_roc, fu_roc = report.pop("_roc")
    report.update({"fold": fold, "training": summary,
                   "test_patients": [r.id for r in test]})
    d = fold_dir(out_dir, fold)
    d.mkdir(parents=True, exist_ok=True)
    jsonio.write(d / "report.json", report)
    if ct_roc is not None:
        (d / "roc.csv").write_text(ct_roc.to_csv(), encoding="utf-8")
    if fu_roc is not None:
        (d / "roc_fusion.csv").write_text(fu_roc.to_csv(), encoding="utf-8")
    model.save(d / "model.cvcp")
    log(f"fold {fold}: CT-only accuracy {report['ct_only']['accuracy']:.3f}, fusion "
        f"{report['fusion']['accuracy']:.3f}, slice accuracy {report['stage1_slice_accuracy']:.3f}")
    return report


METRIC_COLUMNS = ("accuracy", "auc") + tuple(f"sensitivity_{c}" for c in CLASS_NAMES)


def _metric_values(m: dict) -> dict:
    out = {"accuracy": m["accuracy"], "auc": m["auc"]}
    out.update({f"sensitivity_{c}": m["sensitivity"][c] for c in CLASS_NAMES})
    return out


def aggregate(reports: list[dict]) -> dict:
    """Mean and population SD over folds, plus counts pooled over all held-out patients."""
    reports = sorted(reports, key=lambda r: r["fold"])
    out: dict = {"folds": [r["fold"] for r in reports], "n": sum(r["n"] for r in reports)}
    out["stage1_slice_accuracy"] = mean_sd([r["stage1_slice_accuracy"] for r in reports])
    for model in ("ct_only", "fusion"):
        vals = [_metric_values(r[model]) for r in reports]
        confusion = np.sum([r[model]["confusion"] for r in reports], axis=0)
        out[model] = {col: mean_sd([v[col] for v in vals]) for col in METRIC_COLUMNS}
        out[model]["pooled_confusion"] = confusion.tolist()
        out[model]["pooled_accuracy"] = float(np.trace(confusion) / confusion.sum())
    b = sum(r["mcnemar"]["b"] for r in reports)
    c = sum(r["mcnemar"]["c"] for r in reports)
    out["mcnemar_pooled"] = {"b": b, "c": c, "p": round_p(mcnemar_exact(b, c))}
    out["mcnemar_per_fold"] = [r["mcnemar"]["p"] for r in reports]
    return out


def folds_table(reports: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["fold", "n", "stage1_slice_accuracy"]
    header += [f"ct_{c}" for c in METRIC_COLUMNS] + [f"fusion_{c}" for c in METRIC_COLUMNS]
    header += ["mcnemar_b", "mcnemar_c", "mcnemar_p"]
    writer.writerow(header)
    for r in sorted(reports, key=lambda r: r["fold"]):
        ct, fu = _metric_values(r["ct_only"]), _metric_values(r["fusion"])
        writer.writerow([r["fold"], r["n"], _cell(r["stage1_slice_accuracy"])]
                        + [_cell(ct[c]) for c in METRIC_COLUMNS]
                        + [_cell(fu[c]) for c in METRIC_COLUMNS]
                        + [r["mcnemar"]["b"], r["mcnemar"]["c"], r["mcnemar"]["p"]])
    return buf.getvalue()


def _cell(v) -> str:
    return "" if v is None else f"{v:.6f}"


def load_reports(out_dir, k: int) -> list[dict]:
    reports = []
    for fold in range(k):
        path = fold_dir(out_dir, fold) / "report.json"
        if path.is_file():
            reports.append(jsonio.read(path))
    return reports


def finalise(out_dir, k: int) -> dict | None:
    """Write the aggregate, table and figures once every fold report exists."""
    from .plotting import plot_fold_accuracy, plot_roc_curves

    out_dir = Path(out_dir)
    reports = load_reports(out_dir, k)
    if len(reports) < k:
        return None
    agg = aggregate(reports)
    jsonio.write(out_dir / "aggregate.json", agg)
    (out_dir / "folds.csv").write_text(folds_table(reports), encoding="utf-8")
    plot_roc_curves([fold_dir(out_dir, f) / "roc.csv" for f in range(k)], out_dir / "roc.png")
    plot_fold_accuracy(reports, out_dir / "accuracy.png")
    return agg


def crossval(records: list[PatientRecord], cfg: RunConfig, out_dir, folds=None,
             log: Log = _quiet) -> dict | None:
    """Run the selected folds (all by default) and aggregate when complete."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(records) < cfg.k:
        raise DataError(f"{len(records)} patients cannot fill {cfg.k} folds")
    jsonio.write(out_dir / "config.json", cfg.to_dict())
    for fold in (range(cfg.k) if folds is None else folds):
        run_fold(records, cfg, fold, out_dir, log)
    return finalise(out_dir, cfg.k)


__all__ = ["aggregate", "crossval", "evaluate_fold", "finalise", "folds_table", "run_fold",
           "train_fold_model"]
