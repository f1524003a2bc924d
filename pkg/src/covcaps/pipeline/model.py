"""A bundle of the trained stages, saved as one checkpoint with name-prefixed tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import PatientRecord, preprocess_record
from ..errors import ConfigurationError
from .checkpoint import load_checkpoint, save_checkpoint
from .networks import FusionMLP, Stage1Config, Stage1Net, Stage2Config, Stage2Net, config_from_dict, config_to_dict
from .stages import (
    CandidateSet,
    FusionScaler,
    decide,
    fusion_inputs,
    infer_fusion,
    infer_stage1,
    normalise_scores,
    select_candidates,
    stage2_scores,
)

FORMAT = "covcaps-model"


@dataclass
class PatientPrediction:
    patient_id: str
    p_inf: np.ndarray  # per slice
    candidates: CandidateSet
    ct_scores: np.ndarray
    ct_probabilities: np.ndarray
    ct_decision: int
    fusion_probabilities: np.ndarray | None = None
    fusion_decision: int | None = None

    @property
    def decision(self) -> int:
        return self.ct_decision if self.fusion_decision is None else self.fusion_decision

    def to_dict(self) -> dict:
        return {"patient": self.patient_id, "p_inf": self.p_inf.tolist(),
                "candidates": self.candidates.indices.tolist(),
                "ct_scores": self.ct_scores.tolist(),
                "ct_probabilities": self.ct_probabilities.tolist(),
                "ct_decision": self.ct_decision,
                "fusion_probabilities": (None if self.fusion_probabilities is None
                                         else self.fusion_probabilities.tolist()),
                "fusion_decision": self.fusion_decision}


@dataclass
class TwoStageModel:
    """Any subset of the three trained parts; missing parts are ``None``."""

    stage1: Stage1Net | None = None
    stage2: Stage2Net | None = None
    fusion: FusionMLP | None = None
    scaler: FusionScaler | None = None

    # persistence ------------------------------------------------------------

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, net in (("stage1", self.stage1), ("stage2", self.stage2),
                            ("fusion", self.fusion)):
            if net is not None:
                out.update({f"{prefix}.{k}": v for k, v in net.state_arrays().items()})
        return out

    def config(self) -> dict:
        d: dict = {"format": FORMAT}
        if self.stage1 is not None:
            d["stage1"] = config_to_dict(self.stage1.config)
        if self.stage2 is not None:
            d["stage2"] = config_to_dict(self.stage2.config)
        if self.fusion is not None:
            d["fusion"] = {"width": self.fusion.width, "depth": self.fusion.depth}
        if self.scaler is not None:
            d["scaler"] = self.scaler.to_dict()
        return d

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays(), self.config())

    @classmethod
    def load(cls, path) -> "TwoStageModel":
        arrays, config = load_checkpoint(path)
        if config.get("format") != FORMAT:
            raise ConfigurationError(f"{path}: not a model checkpoint")
        rng = np.random.default_rng(0)  # parameters are overwritten below
        model = cls()
        if "stage1" in config:
            model.stage1 = Stage1Net(config_from_dict(Stage1Config, config["stage1"]), rng)
        if "stage2" in config:
            model.stage2 = Stage2Net(config_from_dict(Stage2Config, config["stage2"]), rng)
        if "fusion" in config:
            model.fusion = FusionMLP(rng, **config["fusion"])
        if "scaler" in config:
            model.scaler = FusionScaler.from_dict(config["scaler"])
        for prefix in ("stage1", "stage2", "fusion"):
            net = getattr(model, prefix)
            if net is not None:
                part = {k[len(prefix) + 1:]: v for k, v in arrays.items()
                        if k.startswith(prefix + ".")}
                net.load_arrays(part)
        return model

    def merged(self, other: "TwoStageModel") -> "TwoStageModel":
        """Parts of ``other`` override parts of ``self``."""
        return TwoStageModel(other.stage1 or self.stage1, other.stage2 or self.stage2,
                             other.fusion or self.fusion, other.scaler or self.scaler)

    # inference --------------------------------------------------------------

    def require(self, *parts: str) -> None:
        missing = [p for p in parts if getattr(self, p) is None]
        if missing:
            raise ConfigurationError(f"model lacks the trained part(s) {missing}")

    def candidates(self, records: list[PatientRecord]) -> tuple[list[np.ndarray], list[CandidateSet]]:
        """Per-patient slice probabilities and stage-2-ready candidate sets."""
        self.require("stage1", "stage2")
        s1, s2 = self.stage1.config.input_side, self.stage2.config.input_side
        k = self.stage2.config.candidate_count
        probs, cands = [], []
        for r in records:
            x1 = preprocess_record(r, s1)
            p = infer_stage1(self.stage1, x1)
            x2 = x1 if s2 == s1 else preprocess_record(r, s2)
            probs.append(p)
            cands.append(select_candidates(p, k, r.id, x2))
        return probs, cands

    def predict(self, records: list[PatientRecord]) -> list[PatientPrediction]:
        probs, cands = self.candidates(records)
        scores = stage2_scores(self.stage2, cands)
        ct_probs = normalise_scores(scores)
        fused = fused_dec = None
        if self.fusion is not None:
            self.require("scaler")
            fused, fused_dec = infer_fusion(
                self.fusion, fusion_inputs(ct_probs, [r.clinical for r in records], self.scaler))
        out = []
        for i, r in enumerate(records):
            out.append(PatientPrediction(
                r.id, probs[i], cands[i], scores[i], ct_probs[i], decide(scores[i]),
                None if fused is None else fused[i],
                None if fused_dec is None else int(fused_dec[i])))
        return out
