"""Command-line entry point: ``covcaps <command> [flags]``.

Failures print one line ``error: <kind>: <message>`` to stderr. Usage
errors exit with status 2, all other failures with status 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import CLASS_NAMES, __version__, jsonio
from .config import RunConfig
from .data import SYMPTOMS, generate_phantom, load_dataset, preprocess_record
from .errors import ConfigurationError, CovcapsError, DataError

log = logging.getLogger("covcaps")

MODEL_FILE = "model.cvcp"
RECEIPT_FILE = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# configuration ---------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        overrides["phantom"] = {"seed": args.seed}
    if getattr(args, "k", None) is not None:
        overrides["k"] = args.k
    return RunConfig.from_dict(overrides, cfg) if overrides else cfg


def _out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigurationError("--out-dir is required for this command")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _records(args):
    if not args.data_dir:
        raise ConfigurationError("--data-dir is required for this command")
    records = load_dataset(args.data_dir)
    if not records:
        raise DataError(f"{args.data_dir}: dataset has no patients")
    return records


def _write_receipt(out: Path, cfg: RunConfig) -> None:
    jsonio.write(out / RECEIPT_FILE, cfg.to_dict())


def _model_path(args) -> Path:
    if getattr(args, "model", None):
        return Path(args.model)
    if args.out_dir:
        return Path(args.out_dir) / MODEL_FILE
    raise ConfigurationError("give --model or an --out-dir holding model.cvcp")


# commands --------------------------------------------------------------------

def cmd_phantom(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ds = generate_phantom(cfg.phantom, out)
    _write_receipt(out, cfg)
    print(f"wrote {len(ds.records)} patients to {out}")
    return 0


def cmd_train_stage1(args) -> int:
    from .pipeline.model import TwoStageModel
    from .pipeline.stages import train_stage1
    from .seeding import stream

    cfg = resolve_config(args)
    records = _records(args)
    out = _out_dir(args)
    side = cfg.stage1.input_side
    xs = [preprocess_record(r, side) for r in records]
    if any(r.infected is None for r in records):
        raise DataError("stage 1 training needs per-slice infection labels for every patient")
    net, history = train_stage1(np.concatenate(xs), np.concatenate([r.infected for r in records]),
                                cfg.stage1, cfg.stage1_training,
                                groups=np.concatenate([[r.id] * len(x) for r, x in zip(records, xs)]),
                                rng=stream(cfg.seed, "train", "stage1"), log=log.info)
    TwoStageModel(stage1=net).save(out / MODEL_FILE)
    jsonio.write(out / "history_stage1.json", history.to_dict())
    _write_receipt(out, cfg)
    print(f"stage 1 trained, best epoch {history.best_epoch + 1}; saved {out / MODEL_FILE}")
    return 0


def _load_model(path):
    from .pipeline.model import TwoStageModel

    return TwoStageModel.load(path)


def cmd_train_stage2(args) -> int:
    from .pipeline.stages import select_candidates, infer_stage1, train_stage2
    from .seeding import stream

    cfg = resolve_config(args)
    records = _records(args)
    out = _out_dir(args)
    model = _load_model(_model_path(args))
    model.require("stage1")
    k, side2 = cfg.stage2.candidate_count, cfg.stage2.input_side
    cands = []
    for r in records:
        p = infer_stage1(model.stage1, preprocess_record(r, model.stage1.config.input_side))
        cands.append(select_candidates(p, k, r.id, preprocess_record(r, side2)))
    labels = [r.label_index for r in records]
    net, history = train_stage2(cands, labels, cfg.stage2, cfg.stage2_training,
                                rng=stream(cfg.seed, "train", "stage2"), log=log.info)
    model.stage2 = net
    model.save(out / MODEL_FILE)
    jsonio.write(out / "history_stage2.json", history.to_dict())
    _write_receipt(out, cfg)
    print(f"stage 2 trained, best epoch {history.best_epoch + 1}; saved {out / MODEL_FILE}")
    return 0


def cmd_train_fusion(args) -> int:
    from .pipeline.stages import FusionScaler, fusion_inputs, train_fusion_mlp
    from .seeding import stream

    cfg = resolve_config(args)
    records = _records(args)
    out = _out_dir(args)
    model = _load_model(_model_path(args))
    model.require("stage1", "stage2")
    model.fusion = model.scaler = None
    preds = model.predict(records)
    scaler = FusionScaler.fit(np.stack([p.ct_probabilities for p in preds]), [r.clinical for r in records])
    x = fusion_inputs(np.stack([p.ct_probabilities for p in preds]),
                      [r.clinical for r in records], scaler)
    net, history = train_fusion_mlp(x, [r.label_index for r in records], cfg.fusion_training,
                                    rng=stream(cfg.seed, "train", "fusion"), log=log.info)
    model.fusion, model.scaler = net, scaler
    model.save(out / MODEL_FILE)
    jsonio.write(out / "history_fusion.json", history.to_dict())
    _write_receipt(out, cfg)
    print(f"fusion head trained, best epoch {history.best_epoch + 1}; saved {out / MODEL_FILE}")
    return 0


def cmd_infer(args) -> int:
    from .plotting import plot_roc_curves
    from .stats import compute_metrics

    records = _records(args)
    out = _out_dir(args)
    model = _load_model(_model_path(args))
    preds = model.predict(records)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["patient", "truth", "ct_decision", *(f"ct_p_{c}" for c in CLASS_NAMES),
                     "fusion_decision", *(f"fusion_p_{c}" for c in CLASS_NAMES)])
    for r, p in zip(records, preds):
        fused = p.fusion_probabilities
        writer.writerow([r.id, r.label, CLASS_NAMES[p.ct_decision],
                         *(f"{v:.6f}" for v in p.ct_probabilities),
                         "" if p.fusion_decision is None else CLASS_NAMES[p.fusion_decision],
                         *(["", "", ""] if fused is None else [f"{v:.6f}" for v in fused])])
    (out / "predictions.csv").write_text(buf.getvalue(), encoding="utf-8")
    jsonio.write(out / "predictions.json", [p.to_dict() for p in preds])
    truths = [r.label_index for r in records]
    final = [p.decision for p in preds]
    scores = [(p.ct_probabilities if p.fusion_probabilities is None
               else p.fusion_probabilities)[0] for p in preds]
    report = compute_metrics(final, truths, scores)
    jsonio.write(out / "report.json", report.to_dict())
    if report.roc is not None:
        (out / "roc.csv").write_text(report.roc.to_csv(), encoding="utf-8")
        plot_roc_curves([out / "roc.csv"], out / "roc.png", title="COVID-19 vs rest")
    print(f"{len(records)} patients, accuracy {report.accuracy:.4f}")
    return 0


def cmd_crossval(args) -> int:
    from .crossval import crossval

    cfg = resolve_config(args)
    records = _records(args)
    out = _out_dir(args)
    folds = None
    if args.fold is not None:
        if not 0 <= args.fold < cfg.k:
            raise ConfigurationError(f"--fold {args.fold} outside 0..{cfg.k - 1}")
        folds = [args.fold]
    agg = crossval(records, cfg, out, folds, log=log.info)
    if agg is None:
        print(f"fold {args.fold} written to {out}; aggregate pending remaining folds")
        return 0
    ct, fu = agg["ct_only"]["accuracy"], agg["fusion"]["accuracy"]
    print(f"CT only accuracy {ct['mean']:.4f} +/- {ct['sd']:.4f}; "
          f"with clinical data {fu['mean']:.4f} +/- {fu['sd']:.4f}; "
          f"McNemar p {agg['mcnemar_pooled']['p']}")
    return 0


def cmd_stats_mcnemar(args) -> int:
    from .stats import mcnemar_exact, round_p

    if args.b is None or args.c is None:
        raise UsageError("stats mcnemar needs --b and --c")
    print(round_p(mcnemar_exact(args.b, args.c)))
    return 0


LOGIT_SCENARIOS = (("covid", "cap"), ("covid", "normal"), ("cap", "normal"))
CLINICAL_FEATURES = ("male", "age", "weight") + SYMPTOMS


def cmd_stats_logit(args) -> int:
    """Univariate logistic regression of each clinical feature, per pair of classes."""
    from .stats import logistic_fit, round_p

    records = _records(args)
    out = _out_dir(args)
    rows, results = [], []
    for pos, neg in LOGIT_SCENARIOS:
        subset = [r for r in records if r.label in (pos, neg)]
        y = np.array([r.label == pos for r in subset], dtype=float)
        x = np.stack([r.clinical.raw_vector() for r in subset]) if subset else np.zeros((0, 8))
        for j, name in enumerate(CLINICAL_FEATURES):
            scenario = f"{pos}_vs_{neg}"
            if len(subset) < 3 or np.ptp(x[:, j]) == 0 or np.ptp(y) == 0:
                results.append({"scenario": scenario, "feature": name, "skipped": True})
                rows.append([scenario, name, "", "", "", "", "skipped"])
                continue
            fit = logistic_fit(x[:, j], y, names=[name])
            results.append({"scenario": scenario, "feature": name, "skipped": False,
                            **fit.to_dict()})
            if fit.separation:
                rows.append([scenario, name, f"{fit.coefficients[1]:.6f}", "", "", "",
                             "separation"])
            else:
                rows.append([scenario, name, f"{fit.coefficients[1]:.6f}",
                             f"{fit.standard_errors[1]:.6f}", f"{fit.z[1]:.6f}",
                             f"{round_p(fit.p_values[1]):.4f}", "ok"])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["scenario", "feature", "coefficient", "standard_error", "z", "p_value",
                     "status"])
    writer.writerows(rows)
    (out / "logit.csv").write_text(buf.getvalue(), encoding="utf-8")
    jsonio.write(out / "logit.json", results)
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_gradcam(args) -> int:
    from .gradcam import gradcam, heatmap_filename, render_heatmap

    records = _records(args)
    out = _out_dir(args)
    model = _load_model(_model_path(args))
    stage = args.stage or "1"
    if stage == "fusion":
        raise ConfigurationError("the fusion head has no convolutional layers to explain")
    if args.patient:
        wanted = set(args.patient)
        records = [r for r in records if r.id in wanted]
        missing = wanted - {r.id for r in records}
        if missing:
            raise DataError(f"unknown patient ids {sorted(missing)}")
    model.require("stage1")
    written = 0
    for r in records:
        if stage == "1":
            net = model.stage1
            x = preprocess_record(r, net.config.input_side)
            maps = gradcam(net, x, args.target_class, args.layer)
            indices = range(len(x))
        else:
            model.require("stage2")
            _, (cands,) = model.candidates([r])
            net = model.stage2
            # candidates repeat when padding; explain each distinct slice once
            first = {int(i): n for n, i in reversed(list(enumerate(cands.indices)))}
            order = sorted(first.values())
            maps = gradcam(net, cands.slices[order], args.target_class or "covid", args.layer,
                           cands.p_inf[order])
            indices = [int(cands.indices[n]) for n in order]
        for idx, h in zip(indices, maps):
            render_heatmap(h, r.side, out / heatmap_filename(r.id, idx, h.target))
            written += 1
    print(f"wrote {written} heatmaps to {out}")
    return 0


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--data-dir")
    common.add_argument("--out-dir")
    common.add_argument("--config", help="JSON run configuration; unknown keys are errors")
    common.add_argument("--seed", type=_u64)
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")

    parser = _Parser(prog="covcaps", description="Two-stage capsule network pipeline "
                     "for COVID-19 / CAP / normal classification of CT volumes.")
    parser.add_argument("--version", action="version", version=f"covcaps {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_phantom)
    for name, func in (("train-stage1", cmd_train_stage1), ("train-stage2", cmd_train_stage2),
                       ("train-fusion", cmd_train_fusion)):
        p = sub.add_parser(name, parents=[common], help=f"{name.replace('-', ' ')}")
        p.add_argument("--model", help="existing model checkpoint (default: <out-dir>/model.cvcp)")
        p.set_defaults(func=func)
    p = sub.add_parser("infer", parents=[common], help="classify the patients of a dataset")
    p.add_argument("--model")
    p.set_defaults(func=cmd_infer)
    p = sub.add_parser("crossval", parents=[common], help="run the K-fold protocol")
    p.add_argument("--k", type=_positive)
    p.add_argument("--fold", type=int, help="run only this fold (0-based)")
    p.set_defaults(func=cmd_crossval)

    stats = sub.add_parser("stats", help="statistical tests")
    stats_sub = stats.add_subparsers(dest="test", required=True, parser_class=_Parser)
    p = stats_sub.add_parser("mcnemar", help="exact McNemar p-value from discordant counts")
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--c", type=int, required=True)
    p.set_defaults(func=cmd_stats_mcnemar)
    p = stats_sub.add_parser("logit", parents=[common],
                             help="logistic regression of clinical features")
    p.set_defaults(func=cmd_stats_logit)

    p = sub.add_parser("gradcam", parents=[common], help="render Grad-CAM heatmaps")
    p.add_argument("--model")
    p.add_argument("--stage", choices=("1", "2", "fusion"))
    p.add_argument("--class", dest="target_class", choices=CLASS_NAMES + ("infected",))
    p.add_argument("--layer")
    p.add_argument("--patient", action="append", help="restrict to this patient (repeatable)")
    p.set_defaults(func=cmd_gradcam)
    return parser


def _u64(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed {value} is not an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _one_line(message) -> str:
    return " ".join(str(message).split())


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except CovcapsError as exc:
        print(f"error: {exc.kind}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
