"""Frozen linear maps with low-rank and bias/scale adapters, plus causal attention."""

from __future__ import annotations

import math

import torch
from torch import nn

from .encoder import ShapeMismatch

DTYPE = torch.float64


def _frozen(t: torch.Tensor) -> nn.Parameter:
    return nn.Parameter(t, requires_grad=False)


class LoraLinear(nn.Module):
    """y = (W + (alpha / r) * up @ down) x with W frozen.

    ``up`` starts at zero so the adapted map equals the base map until trained.
    With ``rank=0`` the layer is a plain frozen linear map.
    """

    def __init__(self, in_dim: int, out_dim: int, rank: int = 0, alpha: float = 8.0,
                 generator: torch.Generator | None = None, init_std: float | None = None):
        super().__init__()
        std = init_std if init_std is not None else 1.0 / math.sqrt(in_dim)
        w = torch.randn(out_dim, in_dim, generator=generator, dtype=DTYPE) * std
        self.weight = _frozen(w)
        self.rank = rank
        self.scaling = alpha / rank if rank else 0.0
        if rank:
            down = torch.randn(rank, in_dim, generator=generator, dtype=DTYPE) / math.sqrt(in_dim)
            self.lora_down = nn.Parameter(down)
            self.lora_up = nn.Parameter(torch.zeros(out_dim, rank, dtype=DTYPE))
        else:
            self.lora_down = None
            self.lora_up = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def effective_weight(self) -> torch.Tensor:
        if not self.rank:
            return self.weight
        return self.weight + self.scaling * self.lora_up @ self.lora_down

    def forward(self, x: torch.Tensor, adapted: bool = True) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.weight.T
        if adapted and self.rank:
            y = y + self.scaling * ((x @ self.lora_down.T) @ self.lora_up.T)
        return y


class BiasScaleLinear(nn.Module):
    """f(x) = scale * (inner(x) + bias), elementwise over output features.

    ``bias`` starts at zero and ``scale`` is drawn from N(scale_mean, scale_std^2).
    """

    def __init__(self, inner: LoraLinear, scale_mean: float = 1.0, scale_std: float = 0.02,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.inner = inner
        out = inner.out_dim
        self.delta_bias = nn.Parameter(torch.zeros(out, dtype=DTYPE))
        self.delta_scale = nn.Parameter(
            scale_mean + scale_std * torch.randn(out, generator=generator, dtype=DTYPE)
        )

    @property
    def in_dim(self) -> int:
        return self.inner.in_dim

    @property
    def out_dim(self) -> int:
        return self.inner.out_dim

    def forward(self, x: torch.Tensor, adapted: bool = True) -> torch.Tensor:
        return self.delta_scale * (self.inner(x, adapted=adapted) + self.delta_bias)


def bias_scale_forward(x: torch.Tensor, layer: BiasScaleLinear) -> torch.Tensor:
    return layer(x)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = _frozen(torch.ones(dim, dtype=DTYPE))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.weight * x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rank: int, alpha: float, generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ShapeMismatch(f"model dim {dim} not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.q = LoraLinear(dim, dim, rank, alpha, generator)
        self.k = LoraLinear(dim, dim, rank, alpha, generator)
        self.v = LoraLinear(dim, dim, rank, alpha, generator)
        self.o = LoraLinear(dim, dim, rank, alpha, generator)

    def forward(self, x: torch.Tensor, adapted: bool = True, return_probs: bool = False):
        if x.shape[-1] != self.dim:
            raise ShapeMismatch(f"expected model dim {self.dim}, got {x.shape[-1]}")
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, t, _ = x.shape

        def split(y: torch.Tensor) -> torch.Tensor:
            return y.view(b, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q(x, adapted))
        k = split(self.k(x, adapted))
        v = split(self.v(x, adapted))
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        mask = torch.ones(t, t, dtype=torch.bool, device=x.device).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        ctx = (probs @ v).transpose(1, 2).reshape(b, t, self.dim)
        out = self.o(ctx, adapted)
        if squeeze:
            out, probs = out.squeeze(0), probs.squeeze(0)
        return (out, probs) if return_probs else out


def attention_forward(x: torch.Tensor, layer: CausalSelfAttention, adapted: bool) -> torch.Tensor:
    return layer(x, adapted=adapted)


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, generator: torch.Generator | None = None):
        super().__init__()
        self.up = LoraLinear(dim, hidden, 0, generator=generator)
        self.down = LoraLinear(hidden, dim, 0, generator=generator)

    def forward(self, x: torch.Tensor, adapted: bool = True) -> torch.Tensor:
        return self.down(nn.functional.silu(self.up(x, adapted)), adapted)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, hidden: int, rank: int, alpha: float,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.norm1 = RMSNorm(dim)
        self.attn = CausalSelfAttention(dim, heads, rank, alpha, generator)
        self.norm2 = RMSNorm(dim)
        self.mlp = MLP(dim, hidden, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def wrap_bias_scale(module: nn.Module, scale_mean: float, scale_std: float, generator: torch.Generator) -> int:
    """Replace every ``LoraLinear`` child of ``module`` by a ``BiasScaleLinear`` around it."""
    count = 0
    for name, child in list(module.named_children()):
        if isinstance(child, LoraLinear):
            setattr(module, name, BiasScaleLinear(child, scale_mean, scale_std, generator))
            count += 1
        elif not isinstance(child, BiasScaleLinear):
            count += wrap_bias_scale(child, scale_mean, scale_std, generator)
    return count
