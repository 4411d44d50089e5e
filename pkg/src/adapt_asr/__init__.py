"""Adapter-based noise adaptation for attention encoder-decoder ASR."""

from .adapters import AdaptedASR, Adapter, AdapterSpec, adapter_forward, adapter_param_count, freeze_backbone, insert_adapters
from .checkpoint import Checkpoint, average_checkpoints, select_topk_by_dev
from .corpus import DataRegime, MixJob, UtteranceRecord, measure_snr, mix_at_snr, read_manifest, select_regime, write_manifest
from .enhancement import DemucsLite, MaskNet, SEBatch, build_frontend, compute_se_loss, joint_loss
from .evaluation import AblationGrid, GridPoint, WERReport, evaluate, render_report, run_ablation, wer
from .features import FeatureMatrix, SpecAugPolicy, Tokenizer, logmel, spec_augment, stft_magnitude
from .model import ASRModel, EncoderTrace, LossBreakdown, ModelConfig
from .training import TrainPlan, adapt, load_adapted, load_backbone, pretrain

__version__ = "0.1.0"

__all__ = [
    "AdaptedASR",
    "Adapter",
    "AdapterSpec",
    "adapter_forward",
    "adapter_param_count",
    "freeze_backbone",
    "insert_adapters",
    "Checkpoint",
    "average_checkpoints",
    "select_topk_by_dev",
    "DataRegime",
    "MixJob",
    "UtteranceRecord",
    "measure_snr",
    "mix_at_snr",
    "read_manifest",
    "select_regime",
    "write_manifest",
    "DemucsLite",
    "MaskNet",
    "SEBatch",
    "build_frontend",
    "compute_se_loss",
    "joint_loss",
    "AblationGrid",
    "GridPoint",
    "WERReport",
    "evaluate",
    "render_report",
    "run_ablation",
    "wer",
    "FeatureMatrix",
    "SpecAugPolicy",
    "Tokenizer",
    "logmel",
    "spec_augment",
    "stft_magnitude",
    "ASRModel",
    "EncoderTrace",
    "LossBreakdown",
    "ModelConfig",
    "TrainPlan",
    "adapt",
    "load_adapted",
    "load_backbone",
    "pretrain",
]
