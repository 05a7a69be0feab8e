"""Comparison backbone: a vanilla ViT that stacks all modalities along the
channel dimension and is MAE-pretrained with a single joint decoder.

Missing modalities are filled with the background value (0 after
normalization) because the input shape is fixed; the joint token count never
changes with modality availability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import Block, EncodedSequence, EncoderConfig, OriginMap, SharedEncoder
from .errors import ValidationError
from .masking import MaskConfig
from .tokenizer import (
    PatchGridSpec,
    grid_coords,
    grid_spec_for,
    padded_pos_embed_3d,
    patchify,
    unpatchify,
)
from .volume_io import MODALITIES, MultiModalStudy, Volume


@dataclass(frozen=True)
class BaselineConfig:
    mask_ratio: float = 0.75
    decoder_layers: int = 8
    decoder_dim: int = 384
    decoder_heads: int = 12
    decoder_mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie in (0,1)")
        if self.decoder_dim % self.decoder_heads:
            raise ValidationError("decoder_dim must be divisible by decoder_heads")


def stack_study_channels(study: MultiModalStudy) -> np.ndarray:
    """Fixed 4-channel stack in registry order; absent modalities filled with
    the background value 0."""
    if not study.present:
        raise ValidationError("study has no modalities to stack")
    out = np.zeros((len(MODALITIES),) + study.dims, dtype=np.float32)
    for i, m in enumerate(MODALITIES):
        if m in study.volumes:
            out[i] = study.volumes[m].data
    return out


def stack_patchify(stacked: np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchGridSpec]:
    """Joint patches: each grid position flattens all 4 channels' p^3 voxels."""
    per_channel = []
    grid = None
    for c in range(stacked.shape[0]):
        patches, grid = patchify(stacked[c], patch_size)
        per_channel.append(patches)
    joint = np.stack(per_channel, axis=1)  # (N, 4, p^3)
    return joint.reshape(joint.shape[0], -1), grid


def stack_unpatchify(joint: np.ndarray, grid: PatchGridSpec) -> np.ndarray:
    n, width = joint.shape
    channels = width // grid.patch_voxels
    per = joint.reshape(n, channels, grid.patch_voxels)
    return np.stack([unpatchify(per[:, c, :], grid) for c in range(channels)], axis=0)


def uniform_visible_count(n_tokens: int, mask_ratio: float) -> int:
    return int(np.floor((1.0 - mask_ratio) * n_tokens + 0.5))


class BaselineMAE(nn.Module):
    """Channel-stacked MAE-ViT sharing the encoder blocks, taps, checkpoint
    container and downstream heads with the multi-modal model."""

    kind = "baseline"

    def __init__(self, enc_config: EncoderConfig, config: BaselineConfig = BaselineConfig()):
        super().__init__()
        self.enc_config = enc_config
        self.config = config
        p3 = enc_config.patch_size**3
        self.patch_embed = nn.Linear(len(MODALITIES) * p3, enc_config.token_dim)
        self.encoder = SharedEncoder(enc_config)
        self.dec_proj = nn.Linear(enc_config.token_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.dec_blocks = nn.ModuleList(
            Block(config.decoder_dim, config.decoder_heads, config.decoder_mlp_ratio)
            for _ in range(config.decoder_layers)
        )
        self.dec_norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, len(MODALITIES) * p3)

    @property
    def patch_size(self) -> int:
        return self.enc_config.patch_size

    def backbone_parameters(self):
        yield from self.patch_embed.parameters()
        yield from self.encoder.parameters()

    def _tokenize(self, stacked: np.ndarray) -> tuple[torch.Tensor, torch.Tensor, PatchGridSpec]:
        joint, grid = stack_patchify(stacked, self.patch_size)
        ref = self.patch_embed.weight
        targets = torch.from_numpy(joint).to(dtype=ref.dtype, device=ref.device)
        pos = torch.from_numpy(
            padded_pos_embed_3d(grid.grid_dims, self.enc_config.token_dim)
        ).to(dtype=ref.dtype, device=ref.device)
        tokens = self.patch_embed(targets) + pos
        return tokens, targets, grid

    def _encode(self, tokens: torch.Tensor, coords: np.ndarray) -> EncodedSequence:
        origin = OriginMap(np.zeros(len(coords), dtype=np.int64), coords,
                           {"joint": len(coords)})
        return self.encoder.encode(tokens, origin)

    def forward_stack(
        self, stacked: np.ndarray, visible_idx: np.ndarray
    ) -> tuple[torch.Tensor, torch.Tensor, EncodedSequence]:
        """MAE forward over the joint token set: encode the visible tokens,
        decode the full sequence with mask tokens at the masked slots."""
        tokens, targets, grid = self._tokenize(stacked)
        coords = grid_coords(grid.grid_dims)
        visible_idx = np.asarray(visible_idx, dtype=np.int64)
        encoded = self._encode(tokens[torch.from_numpy(visible_idx).long()],
                               coords[visible_idx])

        n = grid.patches_per_modality
        full = torch.cat([encoded.cls[None, :], encoded.tokens], dim=0)
        projected = self.dec_proj(full)
        queries = self.mask_token.expand(n, -1).index_copy(
            0, torch.from_numpy(visible_idx).long(), projected[1:]
        )
        pos = torch.from_numpy(padded_pos_embed_3d(grid.grid_dims, self.config.decoder_dim))
        queries = queries + pos.to(dtype=queries.dtype, device=queries.device)
        x = torch.cat([projected[:1], queries], dim=0)
        for block in self.dec_blocks:
            x = block(x)
        preds = self.head(self.dec_norm(x[1:]))
        return preds, targets, encoded

    def sample_uniform_mask(
        self, n_tokens: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        v = uniform_visible_count(n_tokens, self.config.mask_ratio)
        chosen = np.sort(rng.choice(n_tokens, size=v, replace=False))
        keep = np.zeros(n_tokens, dtype=bool)
        keep[chosen] = True
        return np.flatnonzero(keep), np.flatnonzero(~keep)

    # shared pretraining-loop protocol ------------------------------------

    def masked_reconstruction_loss(
        self, study: MultiModalStudy, rng: np.random.Generator, mask: MaskConfig
    ) -> torch.Tensor:
        stacked = stack_study_channels(study)
        grid = grid_spec_for(study.dims, self.patch_size)
        visible, _ = self.sample_uniform_mask(grid.patches_per_modality, rng)
        preds, targets, _ = self.forward_stack(stacked, visible)
        return ((preds - targets) ** 2).mean()

    def reconstruct_volumes(
        self, study: MultiModalStudy, rng: np.random.Generator, mask: MaskConfig
    ) -> tuple[float, dict[str, np.ndarray]]:
        stacked = stack_study_channels(study)
        grid = grid_spec_for(study.dims, self.patch_size)
        visible, _ = self.sample_uniform_mask(grid.patches_per_modality, rng)
        preds, targets, _ = self.forward_stack(stacked, visible)
        loss = float(((preds - targets) ** 2).mean().item())
        recon = stack_unpatchify(preds.detach().cpu().numpy().astype(np.float64), grid)
        return loss, {m: recon[i] for i, m in enumerate(MODALITIES) if m in study.volumes}

    # downstream protocol --------------------------------------------------

    def encode_for_downstream(
        self, study: MultiModalStudy
    ) -> tuple[EncodedSequence, tuple[int, int, int]]:
        """Encode the full (unmasked) joint token set; sequence length is the
        grid size regardless of which modalities are present."""
        stacked = stack_study_channels(study)
        tokens, _, grid = self._tokenize(stacked)
        encoded = self._encode(tokens, grid_coords(grid.grid_dims))
        return encoded, grid.grid_dims


def baseline_synthesize(study: MultiModalStudy, target: str, model: BaselineMAE) -> Volume:
    """Background-fill the target channel, run an unmasked forward pass, and
    read off the predicted target channel."""
    if target not in MODALITIES:
        raise ValidationError(f"unknown modality {target!r}")
    context = [m for m in study.present if m != target]
    if not context:
        raise ValidationError(f"no context modalities to synthesize {target!r} from")
    filled = MultiModalStudy({m: study.volumes[m] for m in context})
    stacked = stack_study_channels(filled)
    grid = grid_spec_for(study.dims, model.patch_size)
    with torch.no_grad():
        preds, _, _ = model.forward_stack(stacked, np.arange(grid.patches_per_modality))
    recon = stack_unpatchify(preds.detach().cpu().numpy().astype(np.float32), grid)
    spacing = study.volumes[context[0]].spacing
    return Volume(recon[MODALITIES.index(target)], spacing, meta={"synthesized": target})
