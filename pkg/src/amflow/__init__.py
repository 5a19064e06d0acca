"""Sliding-window attention motion flow and step-skipping latent guidance, at desk scale."""

__version__ = "0.1.0"

from .amf import MotionFlow, amf_loss, distance_weight, extract_amf_full, extract_amf_windowed, total_loss, window_loss
from .attention import AttentionContext, TileGrid, WindowPlan, build_window_plan, count_score_ops, plan_windows, project_qk
from .estimators import AMFExtractor, MotionTransfer
from .guidance import GuidanceConfig, inner_optimize
from .pipeline import TransferJob, invert_reference, motion_fidelity, run_transfer, toy_denoise_step
from .synth import LatentVideo, generate_multi_object, generate_static, generate_translating

__all__ = [
    "AMFExtractor",
    "AttentionContext",
    "GuidanceConfig",
    "LatentVideo",
    "MotionFlow",
    "MotionTransfer",
    "TileGrid",
    "TransferJob",
    "WindowPlan",
    "amf_loss",
    "build_window_plan",
    "count_score_ops",
    "distance_weight",
    "extract_amf_full",
    "extract_amf_windowed",
    "generate_multi_object",
    "generate_static",
    "generate_translating",
    "inner_optimize",
    "invert_reference",
    "motion_fidelity",
    "plan_windows",
    "project_qk",
    "run_transfer",
    "toy_denoise_step",
    "total_loss",
    "window_loss",
]
