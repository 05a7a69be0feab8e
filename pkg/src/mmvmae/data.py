"""Dataset assembly for the CLI and tests: deterministic phantom sets (with
an optional on-disk cache controlled by ``MMV_CACHE_DIR``) and directories of
study manifests.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

from .errors import ConfigurationError, ValidationError
from .volume_io import (
    MultiModalStudy,
    PhantomConfig,
    generate_phantom,
    load_study,
    study_for_model,
    write_study,
)


def _cache_dir() -> Path | None:
    root = os.environ.get("MMV_CACHE_DIR")
    return Path(root) if root else None


def make_phantom_dataset(
    count: int,
    seed: int,
    dims: tuple[int, int, int] = (64, 64, 64),
    patch_size: int = 16,
) -> list[MultiModalStudy]:
    """Studies for seeds ``seed .. seed+count-1``; reuses the on-disk cache
    when ``MMV_CACHE_DIR`` is set (round-trips are bit-exact)."""
    cache = _cache_dir()
    studies = []
    for i in range(count):
        cfg = PhantomConfig(dims=tuple(dims), patch_size=patch_size, seed=seed + i)
        if cache is not None:
            key = "x".join(map(str, dims)) + f"_s{seed + i}"
            study_dir = cache / "phantoms" / key
            manifest = study_dir / "study.json"
            if manifest.exists():
                studies.append(load_study(manifest))
                continue
            study = generate_phantom(cfg)
            write_study(study, study_dir)
            studies.append(study)
        else:
            studies.append(generate_phantom(cfg))
    return studies


def load_manifest_dataset(manifest_dir: Path) -> list[MultiModalStudy]:
    """Load every ``*.json`` manifest under a directory (sorted by name)."""
    manifest_dir = Path(manifest_dir)
    if not manifest_dir.is_dir():
        raise ValidationError(f"manifest directory not found: {manifest_dir}")
    manifests = sorted(manifest_dir.rglob("*.json"))
    manifests = [p for p in manifests if not p.name.endswith(".raw.json")]
    if not manifests:
        raise ValidationError(f"no study manifests under {manifest_dir}")
    return [load_study(p) for p in manifests]


def dataset_from_config(data_cfg: dict, patch_size: int) -> list[MultiModalStudy]:
    source = data_cfg.get("source", "phantom")
    if source == "phantom":
        return make_phantom_dataset(
            count=int(data_cfg.get("count", 10)),
            seed=int(data_cfg.get("seed", 0)),
            dims=tuple(data_cfg.get("dims", [64, 64, 64])),
            patch_size=patch_size,
        )
    if source == "manifest":
        if "manifest_dir" not in data_cfg:
            raise ConfigurationError("data.source='manifest' needs data.manifest_dir")
        return load_manifest_dataset(data_cfg["manifest_dir"])
    raise ConfigurationError(f"unknown data source {source!r}")


def prepare_studies(
    studies: Sequence[MultiModalStudy], data_cfg: dict
) -> list[MultiModalStudy]:
    """Model-input preparation for a whole dataset: foreground crop (when
    ``crop`` is configured) and per-modality z-score normalization."""
    crop = data_cfg.get("crop")
    crop = tuple(crop) if crop is not None else None
    return [study_for_model(s, crop) for s in studies]


def train_val_split(
    studies: Sequence[MultiModalStudy], val_count: int
) -> tuple[list[MultiModalStudy], list[MultiModalStudy]]:
    if not 0 < val_count < len(studies):
        raise ConfigurationError(
            f"val_count {val_count} must leave a non-empty train split of {len(studies)}"
        )
    return list(studies[:-val_count]), list(studies[-val_count:])
