"""Masking plans: a global mask budget split across modalities by a Dirichlet
draw, supporting anything from uniform spread to 100% masking of a modality.

The global masked count is exact per sample, not just in expectation: the
visible budget is integerized with the largest-remainder method and capacity
overflow is redistributed deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ValidationError
from .volume_io import MODALITIES


@dataclass(frozen=True)
class MaskConfig:
    global_ratio: float = 0.75
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.global_ratio < 1.0:
            raise ConfigurationError(f"global_ratio must lie in (0,1), got {self.global_ratio}")
        if self.alpha <= 0.0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")


@dataclass
class MaskPlan:
    """Per-modality partition of token indices into visible and masked."""

    visible: dict[str, np.ndarray]
    masked: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for m in self.visible:
            v, k = self.visible[m], self.masked[m]
            n = len(v) + len(k)
            combined = np.concatenate([v, k])
            if len(np.unique(combined)) != n or (n and combined.max() >= n):
                raise ValidationError(f"visible/masked sets of {m!r} are not a partition")

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.visible)

    @property
    def total_visible(self) -> int:
        return sum(len(v) for v in self.visible.values())

    @property
    def total_masked(self) -> int:
        return sum(len(k) for k in self.masked.values())


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integerize ``weights/sum(weights) * total`` so the counts sum exactly.

    Ties in the remainder ranking break toward lower index (registry order).
    """
    weights = np.asarray(weights, dtype=np.float64)
    target = weights / weights.sum() * total
    counts = np.floor(target).astype(np.int64)
    remainder = target - counts
    short = total - int(counts.sum())
    order = np.lexsort((np.arange(len(weights)), -remainder))
    counts[order[:short]] += 1
    return counts


def allocate_visible(lam: np.ndarray, v_total: int, caps: np.ndarray) -> np.ndarray:
    """Integerize a simplex point into per-modality visible counts.

    Largest-remainder integerization, then clamp to capacities with overflow
    redistributed to modalities with remaining room, largest share first.
    """
    lam = np.asarray(lam, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    if v_total > caps.sum():
        raise ValidationError(f"visible budget {v_total} exceeds total capacity {caps.sum()}")
    if v_total < 0:
        raise ValidationError("visible budget must be non-negative")
    counts = largest_remainder(lam, v_total)
    overflow = int(np.maximum(counts - caps, 0).sum())
    counts = np.minimum(counts, caps)
    if overflow:
        for idx in np.lexsort((np.arange(len(lam)), -lam)):
            take = min(int(caps[idx] - counts[idx]), overflow)
            counts[idx] += take
            overflow -= take
            if overflow == 0:
                break
    return counts


def sample_visible_allocation(
    rng: np.random.Generator,
    modalities: tuple[str, ...],
    v_total: int,
    capacities: dict[str, int],
    alpha: float = 1.0,
) -> dict[str, int]:
    """Split the visible budget across modalities with a Dirichlet(alpha) draw
    (normalized gamma variates, which are unit exponentials when alpha == 1)."""
    caps = np.array([capacities[m] for m in modalities], dtype=np.int64)
    gammas = rng.gamma(alpha, 1.0, size=len(modalities))
    lam = gammas / gammas.sum()
    counts = allocate_visible(lam, v_total, caps)
    return {m: int(c) for m, c in zip(modalities, counts)}


def sample_mask_plan(
    rng: np.random.Generator,
    tokens_per_modality: dict[str, int],
    config: MaskConfig = MaskConfig(),
    visible_counts: dict[str, int] | None = None,
) -> MaskPlan:
    """Draw a mask plan over the present modalities.

    Exactly ``round(global_ratio * total_tokens)`` tokens end up masked; the
    visible indices of each modality are a uniform subset without replacement.
    ``visible_counts`` bypasses the Dirichlet allocation when given.
    """
    modalities = tuple(m for m in MODALITIES if m in tokens_per_modality)
    if not modalities:
        raise ValidationError("no modalities to mask")
    total = sum(tokens_per_modality.values())
    k_total = _round_half_up(config.global_ratio * total)
    if visible_counts is None:
        counts = sample_visible_allocation(
            rng, modalities, total - k_total, tokens_per_modality, config.alpha
        )
    else:
        counts = visible_counts
        if any(counts[m] > tokens_per_modality[m] for m in modalities):
            raise ValidationError("visible counts exceed per-modality capacity")

    visible: dict[str, np.ndarray] = {}
    masked: dict[str, np.ndarray] = {}
    for m in modalities:
        n = tokens_per_modality[m]
        chosen = np.sort(rng.choice(n, size=counts[m], replace=False))
        keep = np.zeros(n, dtype=bool)
        keep[chosen] = True
        visible[m] = np.flatnonzero(keep)
        masked[m] = np.flatnonzero(~keep)
    return MaskPlan(visible, masked)


def full_mask_plan(tokens_per_modality: dict[str, int], target: str) -> MaskPlan:
    """Plan that fully masks ``target`` and leaves every other modality fully
    visible: the missing-input synthesis setup."""
    if target not in MODALITIES:
        raise ValidationError(f"unknown modality {target!r}")
    if target not in tokens_per_modality:
        raise ValidationError(f"target {target!r} missing from the token map")
    if len(tokens_per_modality) < 2:
        raise ValidationError("synthesis needs at least one context modality besides the target")
    visible: dict[str, np.ndarray] = {}
    masked: dict[str, np.ndarray] = {}
    for m, n in tokens_per_modality.items():
        if m == target:
            visible[m] = np.empty(0, dtype=np.int64)
            masked[m] = np.arange(n)
        else:
            visible[m] = np.arange(n)
            masked[m] = np.empty(0, dtype=np.int64)
    return MaskPlan(visible, masked)


def no_mask_plan(tokens_per_modality: dict[str, int]) -> MaskPlan:
    """All-visible plan used during finetuning and inference."""
    visible = {m: np.arange(n) for m, n in tokens_per_modality.items()}
    masked = {m: np.empty(0, dtype=np.int64) for m in tokens_per_modality}
    return MaskPlan(visible, masked)
