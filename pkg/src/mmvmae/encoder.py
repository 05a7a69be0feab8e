"""Shared transformer encoder over the visible tokens of all modalities.

The input sequence is [CLS] followed by each present modality's visible
tokens in registry order (canonical token order inside a modality). Origin
bookkeeping maps every non-CLS position back to its (modality, grid
coordinate) for the decoders and the segmentation fusion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ValidationError
from .masking import MaskPlan
from .tokenizer import TokenSet
from .volume_io import MODALITIES


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    token_dim: int = 768
    heads: int = 12
    mlp_ratio: float = 4.0
    patch_size: int = 16
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)

    def __post_init__(self) -> None:
        if self.token_dim % self.heads:
            raise ValidationError(
                f"token_dim {self.token_dim} not divisible by heads {self.heads}"
            )
        if any(not 1 <= t <= self.layers for t in self.tap_layers):
            raise ValidationError(f"tap layers {self.tap_layers} outside 1..{self.layers}")


class Attention(nn.Module):
    """Multi-head attention; self-attention by default, cross-attention when a
    context sequence is passed (keys/values may have their own width)."""

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(dim // heads)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(context_dim or dim, dim)
        self.v = nn.Linear(context_dim or dim, dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        src = x if context is None else context
        s, d = x.shape
        h = self.heads
        q = self.q(x).reshape(s, h, d // h).transpose(0, 1)
        k = self.k(src).reshape(src.shape[0], h, d // h).transpose(0, 1)
        v = self.v(src).reshape(src.shape[0], h, d // h).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(s, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block; optionally cross-attending to a context."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, context_dim: int | None = None):
        super().__init__()
        self.cross = context_dim is not None
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, context_dim)
        self.norm_ctx = nn.LayerNorm(context_dim) if self.cross else None
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        if self.cross:
            x = x + self.attn(self.norm1(x), self.norm_ctx(context))
        else:
            x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


@dataclass
class OriginMap:
    """(modality, grid coordinate) per non-CLS sequence position."""

    modality_ids: np.ndarray  # (N,) indices into MODALITIES
    coords: np.ndarray  # (N, 3)
    counts: dict[str, int] = field(default_factory=dict)  # visible tokens per modality

    def __len__(self) -> int:
        return len(self.modality_ids)

    def positions_of(self, modality: str) -> np.ndarray:
        return np.flatnonzero(self.modality_ids == MODALITIES.index(modality))


def assemble_input(
    token_sets: dict[str, TokenSet], plan: MaskPlan
) -> tuple[torch.Tensor, OriginMap]:
    """Concatenate the visible tokens of all modalities in registry order.

    Returns the visible-token matrix (without CLS, which the encoder owns)
    and the origin map aligned 1:1 with its rows.
    """
    extra = set(token_sets) - set(plan.visible)
    if extra:
        raise ValidationError(f"token sets {sorted(extra)} missing from the mask plan")
    chunks, mod_ids, coords, counts = [], [], [], {}
    for m in MODALITIES:
        if m not in plan.visible:
            continue
        idx = plan.visible[m]
        if m not in token_sets:
            # a fully masked modality may be absent entirely (synthesis input)
            if len(idx):
                raise ValidationError(f"plan expects visible tokens of absent modality {m!r}")
            counts[m] = 0
            continue
        ts = token_sets[m]
        if len(idx) and (idx.max() >= ts.tokens.shape[0]):
            raise ValidationError(f"plan indices out of range for modality {m!r}")
        counts[m] = len(idx)
        if len(idx) == 0:
            continue
        chunks.append(ts.tokens[torch.from_numpy(idx).long()])
        mod_ids.append(np.full(len(idx), MODALITIES.index(m)))
        coords.append(ts.grid_coords[idx])
    if not chunks:
        raise ValidationError("no visible tokens in any modality")
    tokens = torch.cat(chunks, dim=0)
    origin = OriginMap(np.concatenate(mod_ids), np.concatenate(coords), counts)
    return tokens, origin


@dataclass
class EncodedSequence:
    """Encoder output with CLS separated and per-layer taps retained."""

    tokens: torch.Tensor  # (N, token_dim), input order
    cls: torch.Tensor  # (token_dim,)
    origin: OriginMap
    taps: dict[int, torch.Tensor]  # layer index -> (N + 1, token_dim) incl. CLS at 0

    def __len__(self) -> int:
        return self.tokens.shape[0]


class SharedEncoder(nn.Module):
    """ViT-style encoder: pre-norm blocks, GELU MLP, learned CLS token."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.cls_token = nn.Parameter(torch.zeros(config.token_dim))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            Block(config.token_dim, config.heads, config.mlp_ratio) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(config.token_dim)

    def encode(self, tokens: torch.Tensor, origin: OriginMap) -> EncodedSequence:
        """Run the blocks over [CLS] ++ tokens, capturing configured taps."""
        if tokens.shape[0] < 1:
            raise ValidationError("encoder needs at least one non-CLS token")
        x = torch.cat([self.cls_token[None, :], tokens], dim=0)
        taps: dict[int, torch.Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in self.config.tap_layers:
                taps[i] = x
        x = self.norm(x)
        if not torch.isfinite(x).all():
            raise NumericError("encoder produced non-finite activations")
        return EncodedSequence(tokens=x[1:], cls=x[0], origin=origin, taps=taps)

    def encode_sets(self, token_sets: dict[str, TokenSet], plan: MaskPlan) -> EncodedSequence:
        tokens, origin = assemble_input(token_sets, plan)
        return self.encode(tokens, origin)
