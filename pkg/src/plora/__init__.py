"""Partial LoRA: low-rank adaptation applied only to visual tokens, at desk scale."""

from .core import GradTape, Tensor, finite_diff_grad
from .layer import Modality, ModalityMask, PLoRAParams, plora_forward, plora_init, plora_merge
from .model import InterleavedBatch, ModelConfig, build_model, forward, loss
from .training import ScheduleSpec, Stage, run_stage, schedule_lr
from .vision import VisionConfig, VisionEncoder, lldr_rates

__version__ = "0.1.0"
