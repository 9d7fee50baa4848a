"""Toy multimodal core: frozen encoders, fusion projection, adapted transformer."""

from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderStandIn, FeatureTokens, ImageDecodeError, ShapeMismatch, encode_image_multiscale
from .layers import BiasScaleLinear, LoraLinear, attention_forward, bias_scale_forward
from .model import MultiModalSequence, PopeyeToy, ToyModelConfig, assemble_multimodal, fuse_and_project
from .training import (
    DivergenceDetected,
    EmptyBatch,
    Sample,
    ScriptedModel,
    TrainConfig,
    compute_loss,
    decode_answer,
    loss_and_grads,
    stage_defaults,
    train_stage,
)

__all__ = [
    "BiasScaleLinear",
    "DivergenceDetected",
    "EmptyBatch",
    "EncoderStandIn",
    "FeatureTokens",
    "ImageDecodeError",
    "LoraLinear",
    "MultiModalSequence",
    "PopeyeToy",
    "Sample",
    "ScriptedModel",
    "ShapeMismatch",
    "ToyModelConfig",
    "TrainConfig",
    "assemble_multimodal",
    "attention_forward",
    "bias_scale_forward",
    "compute_loss",
    "decode_answer",
    "encode_image_multiscale",
    "fuse_and_project",
    "load_checkpoint",
    "loss_and_grads",
    "save_checkpoint",
    "stage_defaults",
    "train_stage",
]
