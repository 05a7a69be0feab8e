"""Volume <-> token conversion: non-overlapping 3D patches, per-modality
linear adapters with learned modality embeddings, and fixed 3D sine-cosine
positional encodings.

Token order is canonical everywhere: z-major row-major over the patch grid,
i.e. index = z * (gy * gx) + y * gx + x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, ValidationError
from .volume_io import MODALITIES


@dataclass(frozen=True)
class PatchGridSpec:
    """Geometry of the non-overlapping patch decomposition of one volume."""

    patch_size: int
    grid_dims: tuple[int, int, int]

    @property
    def patches_per_modality(self) -> int:
        gz, gy, gx = self.grid_dims
        return gz * gy * gx

    @property
    def patch_voxels(self) -> int:
        return self.patch_size**3


def grid_spec_for(dims: tuple[int, int, int], patch_size: int) -> PatchGridSpec:
    if any(d % patch_size for d in dims):
        raise ValidationError(f"dims {dims} not divisible by patch size {patch_size}")
    return PatchGridSpec(patch_size, tuple(d // patch_size for d in dims))


def grid_coords(grid_dims: tuple[int, int, int]) -> np.ndarray:
    """(N, 3) integer (z, y, x) grid coordinates in canonical token order."""
    gz, gy, gx = grid_dims
    zz, yy, xx = np.meshgrid(np.arange(gz), np.arange(gy), np.arange(gx), indexing="ij")
    return np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)


def coords_to_index(coords: np.ndarray, grid_dims: tuple[int, int, int]) -> np.ndarray:
    gz, gy, gx = grid_dims
    return coords[:, 0] * (gy * gx) + coords[:, 1] * gx + coords[:, 2]


def patchify(data: np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchGridSpec]:
    """Split a (D, H, W) volume into flattened p^3 patches in canonical order."""
    spec = grid_spec_for(tuple(data.shape), patch_size)
    gz, gy, gx = spec.grid_dims
    p = patch_size
    patches = (
        data.reshape(gz, p, gy, p, gx, p)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(spec.patches_per_modality, p**3)
    )
    return np.ascontiguousarray(patches), spec


def unpatchify(
    patches: np.ndarray, spec: PatchGridSpec, coords: np.ndarray | None = None
) -> np.ndarray:
    """Exact inverse of :func:`patchify`.

    If ``coords`` is given, rows are placed by their (z, y, x) grid coordinate,
    so any row permutation with matching coords reconstructs the same volume.
    """
    n = spec.patches_per_modality
    if patches.shape != (n, spec.patch_voxels):
        raise ValidationError(
            f"expected patches of shape {(n, spec.patch_voxels)}, got {patches.shape}"
        )
    if coords is not None:
        order = np.argsort(coords_to_index(np.asarray(coords), spec.grid_dims), kind="stable")
        patches = patches[order]
    gz, gy, gx = spec.grid_dims
    p = spec.patch_size
    return np.ascontiguousarray(
        patches.reshape(gz, gy, gx, p, p, p)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(gz * p, gy * p, gx * p)
    )


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    omega = 1.0 / (10000.0 ** (2.0 * np.arange(half, dtype=np.float64) / dim))
    angles = positions[:, None].astype(np.float64) * omega[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed_3d(grid_dims: tuple[int, int, int], embed_dim: int) -> np.ndarray:
    """Deterministic positional table, one row per canonical grid position.

    The embedding splits into three equal axis blocks (z, y, x); each block is
    the standard 1D sine-cosine encoding of that axis's grid index.
    """
    if embed_dim % 6:
        raise ConfigurationError(f"embed_dim {embed_dim} must be divisible by 6")
    coords = grid_coords(grid_dims)
    axis_dim = embed_dim // 3
    blocks = [_sincos_1d(coords[:, axis], axis_dim) for axis in range(3)]
    return np.concatenate(blocks, axis=1)


def padded_pos_embed_3d(grid_dims: tuple[int, int, int], embed_dim: int) -> np.ndarray:
    """Positional table for widths that are not multiples of 6: the largest
    divisible prefix is sine-cosine encoded, the remainder is zero."""
    usable = embed_dim - embed_dim % 6
    if usable == embed_dim:
        return sincos_pos_embed_3d(grid_dims, embed_dim)
    if usable == 0:
        raise ConfigurationError(f"embed_dim {embed_dim} too small for a 3-axis encoding")
    table = np.zeros((int(np.prod(grid_dims)), embed_dim), dtype=np.float64)
    table[:, :usable] = sincos_pos_embed_3d(grid_dims, usable)
    return table


@dataclass
class TokenSet:
    """Per-modality token sequence with its grid bookkeeping."""

    modality: str
    tokens: torch.Tensor  # (N, token_dim)
    grid_coords: np.ndarray  # (N, 3)
    grid: PatchGridSpec

    def __post_init__(self) -> None:
        if self.tokens.shape[0] != self.grid_coords.shape[0]:
            raise ValidationError("token/coordinate count mismatch")

    @property
    def token_dim(self) -> int:
        return int(self.tokens.shape[1])


class ModalityAdapters(nn.Module):
    """One linear patch adapter and one learned embedding per registry modality."""

    def __init__(self, patch_size: int, token_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.adapters = nn.ModuleDict(
            {m: nn.Linear(patch_size**3, token_dim) for m in MODALITIES}
        )
        self.modality_embed = nn.ParameterDict(
            {m: nn.Parameter(torch.zeros(token_dim)) for m in MODALITIES}
        )
        for emb in self.modality_embed.values():
            nn.init.trunc_normal_(emb, std=0.02)

    def pos_table(self, grid_dims: tuple[int, int, int]) -> torch.Tensor:
        ref = self.adapters[MODALITIES[0]].weight
        table = padded_pos_embed_3d(grid_dims, self.token_dim)
        return torch.from_numpy(table).to(dtype=ref.dtype, device=ref.device)

    def project(self, patches: torch.Tensor, modality: str, grid: PatchGridSpec) -> TokenSet:
        """token_i = W_m patch_i + b_m + posembed(coord_i) + modality_embed_m"""
        if modality not in self.adapters:
            raise ValidationError(f"no adapter for modality {modality!r}")
        coords = grid_coords(grid.grid_dims)
        tokens = (
            self.adapters[modality](patches)
            + self.pos_table(grid.grid_dims)
            + self.modality_embed[modality]
        )
        return TokenSet(modality, tokens, coords, grid)


def tokenize_volume(
    data: np.ndarray, modality: str, adapters: ModalityAdapters
) -> tuple[TokenSet, torch.Tensor]:
    """Patchify one volume and project it; returns the token set and the raw
    flattened patches (the reconstruction targets)."""
    patches_np, grid = patchify(data, adapters.patch_size)
    ref = adapters.adapters[MODALITIES[0]].weight
    patches = torch.from_numpy(patches_np).to(dtype=ref.dtype, device=ref.device)
    return adapters.project(patches, modality, grid), patches
