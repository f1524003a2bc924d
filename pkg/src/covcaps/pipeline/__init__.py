"""Two-stage capsule pipeline with clinical fusion."""

from .checkpoint import load_checkpoint, save_checkpoint
from .model import PatientPrediction, TwoStageModel
from .networks import FusionMLP, Stage1Config, Stage1Net, Stage2Config, Stage2Net
from .stages import (
    CandidateSet,
    FusionScaler,
    GateResult,
    fusion_inputs,
    gate_and_pool,
    infer_fusion,
    infer_stage1,
    infer_stage2,
    infection_probability,
    select_candidates,
    train_fusion_mlp,
    train_stage1,
    train_stage2,
)
from .training import Adam, TrainHistory, TrainSpec

__all__ = [
    "Adam", "CandidateSet", "FusionMLP", "FusionScaler", "GateResult", "PatientPrediction",
    "Stage1Config", "Stage1Net", "Stage2Config", "Stage2Net", "TrainHistory", "TrainSpec",
    "TwoStageModel", "fusion_inputs", "gate_and_pool", "infer_fusion", "infer_stage1",
    "infer_stage2", "infection_probability", "load_checkpoint", "save_checkpoint",
    "select_candidates", "train_fusion_mlp", "train_stage1", "train_stage2",
]
