"""Promptless segmentation by self-prompting a promptable segmenter.

A small promptable segmenter (image encoder, prompt encoder, mask decoder) is
adapted to a new domain with low-rank adapters; at inference it prompts itself
with the bounding box of its own first prediction, and training distils that
refined prediction back into the promptless one.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CorpusSpec, ImageSample, generate_corpus, load_directory, read_corpus, write_corpus
from .errors import (ConfigError, GenerationError, IngestionError, InputError, SelfPromptError,
                     TrainingError)
from .lora import attach_adapters, effective_weight, merge_adapters
from .losses import LossConfig, dice_loss, kl_self_distill, total_loss
from .metrics import MetricsReport, dice_score, evaluate, iou_score
from .model import MaskPrediction, ModelConfig, PromptSpec, PromptableSegmenter, build_model
from .self_prompt import SelfPromptResult, self_prompt_forward, sp_box
from .train import PretrainConfig, TrainConfig, finetune, grid_search, pretrain_source

__all__ = [
    "ConfigError", "CorpusSpec", "GenerationError", "ImageSample", "IngestionError", "InputError",
    "LossConfig", "MaskPrediction", "MetricsReport", "ModelConfig", "PretrainConfig", "PromptSpec",
    "PromptableSegmenter", "SelfPromptError", "SelfPromptResult", "TrainConfig", "TrainingError",
    "attach_adapters", "build_model", "dice_loss", "dice_score", "effective_weight", "evaluate",
    "finetune", "generate_corpus", "grid_search", "iou_score", "kl_self_distill", "load_checkpoint",
    "load_directory", "merge_adapters", "pretrain_source", "read_corpus", "save_checkpoint",
    "self_prompt_forward", "sp_box", "total_loss", "write_corpus",
]
