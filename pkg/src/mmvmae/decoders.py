"""Per-modality cross-attention decoders and the assembled masked autoencoder.

Each decoder rebuilds every patch of its modality: visible positions carry a
projection of their encoded token, masked positions carry a learned mask
token, and the query sequence first cross-attends to the full encoded context
(CLS included) before self-attention layers and a linear patch head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import Block, EncodedSequence, EncoderConfig, SharedEncoder, assemble_input
from .errors import ValidationError
from .masking import MaskConfig, MaskPlan, full_mask_plan, no_mask_plan, sample_mask_plan
from .tokenizer import (
    ModalityAdapters,
    PatchGridSpec,
    TokenSet,
    coords_to_index,
    grid_spec_for,
    padded_pos_embed_3d,
    tokenize_volume,
    unpatchify,
)
from .volume_io import MODALITIES, MultiModalStudy, Volume


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 3
    token_dim: int = 384
    heads: int = 12
    mlp_ratio: float = 4.0

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ValidationError("decoder needs at least the cross-attention layer")
        if self.token_dim % self.heads:
            raise ValidationError(
                f"decoder token_dim {self.token_dim} not divisible by heads {self.heads}"
            )


@dataclass
class QuerySequence:
    """Full-length decoder queries in canonical token order."""

    tokens: torch.Tensor  # (patches_per_modality, decoder_dim)
    is_mask_token: np.ndarray  # (patches_per_modality,) bool provenance flags
    grid: PatchGridSpec


class ModalityDecoder(nn.Module):
    """Lightweight decoder: one cross-attention block over the encoded
    context, then self-attention blocks, then a linear head to patch voxels."""

    def __init__(self, config: DecoderConfig, encoder_dim: int, patch_voxels: int):
        super().__init__()
        self.config = config
        self.in_proj = nn.Linear(encoder_dim, config.token_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.token_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.cross = Block(
            config.token_dim, config.heads, config.mlp_ratio, context_dim=config.token_dim
        )
        self.selfs = nn.ModuleList(
            Block(config.token_dim, config.heads, config.mlp_ratio)
            for _ in range(config.layers - 1)
        )
        self.norm = nn.LayerNorm(config.token_dim)
        self.head = nn.Linear(config.token_dim, patch_voxels)


def project_context(decoder: ModalityDecoder, encoded: EncodedSequence) -> torch.Tensor:
    """Project the full encoded sequence (CLS first) into the decoder width."""
    full = torch.cat([encoded.cls[None, :], encoded.tokens], dim=0)
    return decoder.in_proj(full)


def build_queries(
    decoder: ModalityDecoder,
    modality: str,
    plan: MaskPlan,
    encoded: EncodedSequence,
    adapters: ModalityAdapters,
    grid: PatchGridSpec,
    context: torch.Tensor | None = None,
) -> QuerySequence:
    """Query sequence for one modality: projected encoded tokens at visible
    positions, the learned mask token elsewhere, plus decoder-width positional
    and (projected) modality embeddings at every position."""
    if context is None:
        context = project_context(decoder, encoded)
    n_full = grid.patches_per_modality
    positions = encoded.origin.positions_of(modality)
    canon = coords_to_index(encoded.origin.coords[positions], grid.grid_dims)
    if sorted(canon.tolist()) != sorted(np.asarray(plan.visible[modality]).tolist()):
        raise ValidationError(
            f"encoded origin does not cover the visible tokens of {modality!r}"
        )

    queries = decoder.mask_token.expand(n_full, -1)
    is_mask = np.ones(n_full, dtype=bool)
    if len(positions):
        rows = context.index_select(0, torch.from_numpy(positions + 1).long())  # row 0 is CLS
        queries = queries.index_copy(0, torch.from_numpy(canon).long(), rows)
        is_mask[canon] = False
    else:
        queries = queries.clone()

    pos = torch.from_numpy(padded_pos_embed_3d(grid.grid_dims, decoder.config.token_dim))
    queries = queries + pos.to(dtype=queries.dtype, device=queries.device)
    queries = queries + decoder.in_proj(adapters.modality_embed[modality])
    return QuerySequence(queries, is_mask, grid)


def decode_modality(
    decoder: ModalityDecoder, queries: QuerySequence, context: torch.Tensor
) -> torch.Tensor:
    """Predicted flattened patches for every position of the modality."""
    if context.shape[0] == 0:
        raise ValidationError("decoder context is empty")
    x = decoder.cross(queries.tokens, context=context)
    for block in decoder.selfs:
        x = block(x)
    return decoder.head(decoder.norm(x))


class MultiModalMAE(nn.Module):
    """Adapters + shared encoder + one reconstruction decoder per modality."""

    kind = "multimodal"

    def __init__(self, enc_config: EncoderConfig, dec_config: DecoderConfig):
        super().__init__()
        self.enc_config = enc_config
        self.dec_config = dec_config
        self.adapters = ModalityAdapters(enc_config.patch_size, enc_config.token_dim)
        self.encoder = SharedEncoder(enc_config)
        self.decoders = nn.ModuleDict(
            {
                m: ModalityDecoder(dec_config, enc_config.token_dim, enc_config.patch_size**3)
                for m in MODALITIES
            }
        )

    @property
    def patch_size(self) -> int:
        return self.enc_config.patch_size

    def backbone_parameters(self):
        """Pretrained trunk (adapters + encoder); what 'frozen' freezes."""
        yield from self.adapters.parameters()
        yield from self.encoder.parameters()

    def tokenize_study(
        self, volumes: dict[str, np.ndarray]
    ) -> tuple[dict[str, TokenSet], dict[str, torch.Tensor], PatchGridSpec]:
        token_sets, targets = {}, {}
        grid = None
        for m in MODALITIES:
            if m not in volumes:
                continue
            token_sets[m], targets[m] = tokenize_volume(volumes[m], m, self.adapters)
            grid = token_sets[m].grid
        if grid is None:
            raise ValidationError("study has no modalities to tokenize")
        return token_sets, targets, grid

    def encode_study(
        self, volumes: dict[str, np.ndarray], plan: MaskPlan
    ) -> tuple[EncodedSequence, PatchGridSpec]:
        token_sets, _, grid = self.tokenize_study(volumes)
        return self.encoder.encode_sets(token_sets, plan), grid

    def forward_study(
        self, volumes: dict[str, np.ndarray], plan: MaskPlan
    ) -> tuple[dict[str, torch.Tensor], dict[str, torch.Tensor], EncodedSequence]:
        """Masked forward pass; predictions and targets cover every patch of
        every modality named in the plan (present or fully synthetic)."""
        token_sets, targets, grid = self.tokenize_study(volumes)
        encoded = self.encoder.encode_sets(token_sets, plan)
        preds: dict[str, torch.Tensor] = {}
        for m in plan.visible:
            decoder = self.decoders[m]
            context = project_context(decoder, encoded)
            queries = build_queries(decoder, m, plan, encoded, self.adapters, grid, context)
            preds[m] = decode_modality(decoder, queries, context)
        return preds, targets, encoded

    # shared pretraining-loop protocol ------------------------------------

    def masked_reconstruction_loss(
        self, study: MultiModalStudy, rng: np.random.Generator, mask: MaskConfig
    ) -> torch.Tensor:
        counts = token_counts(study.dims, self.patch_size, study.present)
        plan = sample_mask_plan(rng, counts, mask)
        volumes = {m: study.volumes[m].data for m in study.present}
        preds, targets, _ = self.forward_study(volumes, plan)
        sq = [((preds[m] - targets[m]) ** 2).reshape(-1) for m in targets]
        return torch.cat(sq).mean()

    def reconstruct_volumes(
        self, study: MultiModalStudy, rng: np.random.Generator, mask: MaskConfig
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Masked forward pass returning the pooled loss and the full
        reconstructed volume per present modality."""
        counts = token_counts(study.dims, self.patch_size, study.present)
        plan = sample_mask_plan(rng, counts, mask)
        volumes = {m: study.volumes[m].data for m in study.present}
        preds, targets, _ = self.forward_study(volumes, plan)
        sq = [((preds[m] - targets[m]) ** 2).reshape(-1) for m in targets]
        loss = float(torch.cat(sq).mean().item())
        grid = grid_spec_for(study.dims, self.patch_size)
        recon = {
            m: unpatchify(preds[m].detach().cpu().numpy().astype(np.float64), grid)
            for m in study.present
        }
        return loss, recon

    # downstream protocol --------------------------------------------------

    def encode_for_downstream(
        self, study: MultiModalStudy
    ) -> tuple[EncodedSequence, tuple[int, int, int]]:
        """Unmasked encoding of all present modalities; the sequence length is
        (modalities x grid size), so it shrinks when a modality is excluded."""
        counts = token_counts(study.dims, self.patch_size, study.present)
        plan = no_mask_plan(counts)
        volumes = {m: study.volumes[m].data for m in study.present}
        token_sets, _, grid = self.tokenize_study(volumes)
        encoded = self.encoder.encode_sets(token_sets, plan)
        return encoded, grid.grid_dims


def token_counts(dims: tuple[int, int, int], patch_size: int, modalities) -> dict[str, int]:
    grid = grid_spec_for(dims, patch_size)
    return {m: grid.patches_per_modality for m in modalities}


def synthesize_modality(
    study: MultiModalStudy, target: str, model: MultiModalMAE
) -> Volume:
    """Generate one modality from the others: the target enters as a fully
    masked input and its decoder reads the encoded context of the rest."""
    context_mods = [m for m in study.present if m != target]
    if not context_mods:
        raise ValidationError(f"no context modalities to synthesize {target!r} from")
    counts = token_counts(study.dims, model.patch_size, context_mods + [target])
    plan = full_mask_plan(counts, target)
    volumes = {m: study.volumes[m].data for m in context_mods}
    with torch.no_grad():
        preds, _, _ = model.forward_study(volumes, plan)
    grid = grid_spec_for(study.dims, model.patch_size)
    data = unpatchify(preds[target].detach().cpu().numpy().astype(np.float32), grid)
    spacing = study.volumes[context_mods[0]].spacing
    return Volume(data, spacing, meta={"synthesized": target})
