"""Desk-scale multimodal model: two frozen multi-scale encoders, a learned
fusion projection, and a small frozen causal transformer adapted with LoRA
(top layers) and, in the ship-adaption stage, bias/scale tuning."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .encoder import EncoderStandIn, FeatureTokens, ShapeMismatch, concat_scales, encode_image_multiscale, patch_grid
from .layers import DTYPE, BiasScaleLinear, Block, LoraLinear, RMSNorm, wrap_bias_scale
from .tokenizer import CharTokenizer

STAGES = ("base", "alignment", "ship_adaption")


@dataclass(frozen=True)
class ToyModelConfig:
    model_dim: int = 64
    heads: int = 4
    total_layers: int = 4
    lora_top_layers: int = 3
    lora_rank: int = 4
    lora_alpha: float = 8.0
    mlp_ratio: int = 4
    scales_a: int = 2
    scales_b: int = 2
    patch: int = 8
    feat_dim_a: int = 32
    feat_dim_b: int = 32
    image_size: int = 32
    max_instruction_len: int = 64
    max_answer_len: int = 40
    head_init_std: float = 0.3
    scale_init_mean: float = 1.0
    scale_init_std: float = 0.02
    train_embeddings: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and f.name not in ("seed", "scale_init_std"):
                if v <= 0:
                    raise ValueError(f"{f.name} must be positive, got {v}")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.lora_top_layers > self.total_layers:
            raise ValueError("lora_top_layers cannot exceed total_layers")
        if self.visual_tokens_a != self.visual_tokens_b:
            raise ValueError("both backbones must produce the same number of visual tokens")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def visual_tokens_per_scale(self) -> list[int]:
        return [patch_grid(self.image_size, self.image_size, self.patch, i) for i in range(self.scales_a)]

    @property
    def visual_tokens_a(self) -> int:
        return sum(patch_grid(self.image_size, self.image_size, self.patch, i) for i in range(self.scales_a))

    @property
    def visual_tokens_b(self) -> int:
        return sum(patch_grid(self.image_size, self.image_size, self.patch, i) for i in range(self.scales_b))

    @property
    def max_seq_len(self) -> int:
        return self.visual_tokens_a + self.max_instruction_len + 1 + self.max_answer_len + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ToyModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class MultiModalSequence:
    tokens: torch.Tensor  # ((N_v + N_l) x D) or batched (B x (N_v + N_l) x D)
    n_visual: int
    n_language: int


def fuse_and_project(f_v: np.ndarray | torch.Tensor, g_v: np.ndarray | torch.Tensor, projection: nn.Module) -> torch.Tensor:
    """Channel-concatenate the two backbones' tokens and project to model width."""
    f = torch.as_tensor(f_v, dtype=DTYPE)
    g = torch.as_tensor(g_v, dtype=DTYPE)
    if f.shape[:-1] != g.shape[:-1]:
        raise ShapeMismatch(f"token counts differ: {tuple(f.shape)} vs {tuple(g.shape)}")
    x = torch.cat([f, g], dim=-1)
    if x.shape[-1] != projection.in_features:
        raise ShapeMismatch(f"projection expects {projection.in_features} channels, got {x.shape[-1]}")
    return projection(x)


def assemble_multimodal(p_v: torch.Tensor, p_l: torch.Tensor) -> MultiModalSequence:
    """Visual tokens first, then language tokens, along the sequence axis."""
    if p_l.shape[-2] == 0:
        raise ShapeMismatch("language token sequence is empty")
    if p_v.shape[-1] != p_l.shape[-1]:
        raise ShapeMismatch(f"visual dim {p_v.shape[-1]} != language dim {p_l.shape[-1]}")
    if p_v.dim() != p_l.dim():
        raise ShapeMismatch("visual and language tokens must have the same rank")
    return MultiModalSequence(torch.cat([p_v, p_l], dim=-2), p_v.shape[-2], p_l.shape[-2])


class PopeyeToy(nn.Module):
    def __init__(self, config: ToyModelConfig = ToyModelConfig()):
        super().__init__()
        self.config = c = config
        self.tokenizer = CharTokenizer()
        g = torch.Generator().manual_seed(c.seed)
        self.encoder_a = EncoderStandIn("A", c.patch, c.feat_dim_a, c.seed)
        self.encoder_b = EncoderStandIn("B", c.patch, c.feat_dim_b, c.seed)
        self.projection = nn.Linear(c.feat_dim_a + c.feat_dim_b, c.model_dim, dtype=DTYPE)
        with torch.no_grad():
            bound = 1.0 / math.sqrt(c.feat_dim_a + c.feat_dim_b)
            self.projection.weight.copy_((torch.rand(self.projection.weight.shape, generator=g, dtype=DTYPE) * 2 - 1) * bound)
            self.projection.bias.zero_()
        vocab = len(self.tokenizer)
        self.token_embedding = nn.Parameter(
            torch.randn(vocab, c.model_dim, generator=g, dtype=DTYPE), requires_grad=c.train_embeddings
        )
        self.position_embedding = nn.Parameter(
            0.1 * torch.randn(c.max_seq_len, c.model_dim, generator=g, dtype=DTYPE), requires_grad=False
        )
        hidden = c.mlp_ratio * c.model_dim
        first_adapted = c.total_layers - c.lora_top_layers
        self.blocks = nn.ModuleList(
            Block(c.model_dim, c.heads, hidden, c.lora_rank if i >= first_adapted else 0, c.lora_alpha, g)
            for i in range(c.total_layers)
        )
        self.norm = RMSNorm(c.model_dim)
        self.head = LoraLinear(c.model_dim, vocab, 0, generator=g, init_std=c.head_init_std / math.sqrt(c.model_dim))
        self._generator = g
        self._feature_cache: dict[bytes, torch.Tensor] = {}
        self.set_stage("alignment")

    # -- stages ---------------------------------------------------------------

    @property
    def has_bias_scale(self) -> bool:
        return isinstance(self.head, BiasScaleLinear)

    def set_stage(self, stage: str) -> None:
        """Select which parameters train.

        ``alignment``: LoRA factors and the fusion projection.
        ``ship_adaption``: additionally bias/scale deltas on every transformer linear layer.
        ``base``: nothing trains (used for frozen reference passes).
        """
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if stage == "ship_adaption" and not self.has_bias_scale:
            c = self.config
            wrap_bias_scale(self.blocks, c.scale_init_mean, c.scale_init_std, self._generator)
            self.head = BiasScaleLinear(self.head, c.scale_init_mean, c.scale_init_std, self._generator)
        self.stage = stage
        for name, p in self.named_parameters():
            p.requires_grad_(self._trainable(name, stage))

    def _trainable(self, name: str, stage: str) -> bool:
        if stage == "base":
            return False
        if name == "token_embedding":
            return self.config.train_embeddings
        if name.startswith("projection.") or "lora_" in name:
            return True
        if name.endswith(("delta_bias", "delta_scale")):
            return stage == "ship_adaption"
        return False

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups: dict[str, list] = {"lora": [], "projection": [], "bias": [], "scale": [], "embeddings": [], "frozen": []}
        for name, p in self.named_parameters():
            if not p.requires_grad:
                groups["frozen"].append((name, p))
            elif "lora_" in name:
                groups["lora"].append((name, p))
            elif name.startswith("projection."):
                groups["projection"].append((name, p))
            elif name.endswith("delta_bias"):
                groups["bias"].append((name, p))
            elif name.endswith("delta_scale"):
                groups["scale"].append((name, p))
            else:
                groups["embeddings"].append((name, p))
        return groups

    def count_parameters(self) -> tuple[int, int]:
        total = sum(p.numel() for p in self.parameters())
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        return trainable, total

    # -- forward pieces ---------------------------------------------------------

    def visual_features(self, image) -> tuple[list[FeatureTokens], list[FeatureTokens]]:
        c = self.config
        return (
            encode_image_multiscale(image, self.encoder_a, c.scales_a),
            encode_image_multiscale(image, self.encoder_b, c.scales_b),
        )

    def encode_visual(self, image) -> torch.Tensor:
        """Frozen encoder output for one image, (N_v x (C_A + C_B)); cached by content."""
        arr = np.ascontiguousarray(image) if isinstance(image, np.ndarray) else None
        key = None
        if arr is not None:
            key = arr.dtype.str.encode() + str(arr.shape).encode() + arr.tobytes()
            hit = self._feature_cache.get(key)
            if hit is not None:
                return hit
        fa, fb = self.visual_features(image)
        f_v, g_v = concat_scales(fa), concat_scales(fb)
        if f_v.shape[0] != g_v.shape[0]:
            raise ShapeMismatch(f"backbones disagree on token count: {f_v.shape[0]} vs {g_v.shape[0]}")
        feats = torch.as_tensor(np.concatenate([f_v, g_v], axis=1), dtype=DTYPE)
        if key is not None:
            self._feature_cache[key] = feats
        return feats

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding[ids]

    def forward_sequence(self, feats: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
        """Logits for visual features (B x N_v x C) followed by token ids (B x T)."""
        p_v = self.projection(feats)
        p_l = self.embed_tokens(ids)
        seq = assemble_multimodal(p_v, p_l)
        t = seq.tokens.shape[-2]
        if t > self.config.max_seq_len:
            raise ShapeMismatch(f"sequence of {t} tokens exceeds {self.config.max_seq_len}")
        x = seq.tokens + self.position_embedding[:t]
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))

    def prompt_ids(self, instruction: str) -> list[int]:
        ids = self.tokenizer.encode(instruction)
        if len(ids) > self.config.max_instruction_len:
            raise ShapeMismatch(f"instruction longer than {self.config.max_instruction_len} characters")
        return ids + [self.tokenizer.bos_id]

    def forward(self, image, instruction: str, answer: str = "") -> torch.Tensor:
        """Logits over the vocabulary at every sequence position ((N_v + N_l) x V)."""
        ids = self.prompt_ids(instruction) + self.tokenizer.encode(answer)
        feats = self.encode_visual(image).unsqueeze(0)
        return self.forward_sequence(feats, torch.tensor([ids])).squeeze(0)

    @torch.no_grad()
    def generate(self, image, instruction: str) -> tuple[str, bool]:
        """Greedy decoding; returns (text, truncated)."""
        tok = self.tokenizer
        feats = self.encode_visual(image).unsqueeze(0)
        ids = self.prompt_ids(instruction)
        out: list[int] = []
        for _ in range(self.config.max_answer_len + 1):
            logits = self.forward_sequence(feats, torch.tensor([ids + out]))
            nxt = int(torch.argmax(logits[0, -1]))
            if nxt == tok.eos_id:
                return tok.decode(out), False
            if len(out) == self.config.max_answer_len:
                break
            out.append(nxt)
        return tok.decode(out), True


def stack_ids(seqs: Sequence[list[int]], pad_id: int) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    return torch.tensor([s + [pad_id] * (width - len(s)) for s in seqs], dtype=torch.long)
