"""Downstream adaptation of a pretrained backbone: UNETR-style segmentation
with per-location token fusion and sliding-window inference, linear
classification over pooled tokens, warmup+cosine scheduling, minority
oversampling, and the scratch/frozen/full finetuning regimes.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .baseline import stack_study_channels
from .checkpoint import load_container, load_state_dict_arrays, save_container, state_dict_arrays
from .encoder import EncodedSequence
from .errors import ConfigurationError, NumericError, ValidationError
from .tokenizer import coords_to_index
from .volume_io import LABEL_CODES, MODALITIES, MultiModalStudy

#: BraTS codes <-> contiguous class channels used by the segmentation head
LABEL_TO_CLASS = {0: 0, 1: 1, 2: 2, 4: 3}
CLASS_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.int16)


@dataclass(frozen=True)
class SegHeadConfig:
    tap_layers: tuple[int, ...] = (3, 6, 9, 12)
    feature_size: int = 16
    classes: int = 4
    window: tuple[int, int, int] = (128, 128, 128)
    overlap: float = 0.25
    finetune_crop: tuple[int, int, int] = (128, 128, 128)

    def __post_init__(self) -> None:
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigurationError(f"overlap must lie in [0,1), got {self.overlap}")


@dataclass(frozen=True)
class ClsHeadConfig:
    classes: int = 3


# ---------------------------------------------------------------------------
# Per-location fusion
# ---------------------------------------------------------------------------


def fuse_tap(
    tap: torch.Tensor, encoded: EncodedSequence, grid_dims: tuple[int, int, int]
) -> torch.Tensor:
    """Average the tokens landing on each grid location over the modalities
    that contribute there; CLS (row 0) is excluded. Returns (gz, gy, gx, dim).

    Requires every location to be covered, which holds whenever tokenization
    ran without masking (the finetuning/inference contract).
    """
    n_grid = int(np.prod(grid_dims))
    idx_np = coords_to_index(encoded.origin.coords, grid_dims)
    idx = torch.from_numpy(idx_np).long()
    tokens = tap[1:]
    acc = torch.zeros(n_grid, tokens.shape[1], dtype=tokens.dtype, device=tokens.device)
    acc = acc.index_add(0, idx, tokens)
    counts = np.bincount(idx_np, minlength=n_grid)
    if (counts == 0).any():
        raise ValidationError("fusion found grid locations with no contributing tokens")
    acc = acc / torch.from_numpy(counts).to(dtype=tokens.dtype, device=tokens.device)[:, None]
    return acc.reshape(*grid_dims, tokens.shape[1])


def fuse_tokens_per_location(
    encoded: EncodedSequence, grid_dims: tuple[int, int, int]
) -> dict[int, torch.Tensor]:
    """Fused grid per tap layer; output length is the full grid regardless of
    how many modalities are present."""
    return {layer: fuse_tap(tap, encoded, grid_dims) for layer, tap in encoded.taps.items()}


# ---------------------------------------------------------------------------
# UNETR-style head
# ---------------------------------------------------------------------------


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.InstanceNorm3d(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
            nn.Conv3d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.InstanceNorm3d(out_ch),
            nn.LeakyReLU(0.01, inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def _deconv(in_ch: int, out_ch: int) -> nn.Module:
    return nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2)


class SkipUpsampler(nn.Module):
    """Chain of 2x deconvolutions lifting a tap grid toward voxel resolution."""

    def __init__(self, token_dim: int, out_ch: int, n_deconv: int):
        super().__init__()
        layers: list[nn.Module] = []
        in_ch = token_dim
        for k in range(n_deconv):
            layers.append(_deconv(in_ch, out_ch))
            in_ch = out_ch
            if k < n_deconv - 1:
                layers.append(ConvBlock(out_ch, out_ch))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class UNETRHead(nn.Module):
    """Progressive deconvolution decoder over encoder taps with skip
    connections, plus an input-level skip on the stacked 4-channel volume."""

    def __init__(self, patch_size: int, token_dim: int, config: SegHeadConfig):
        super().__init__()
        stages = int(round(math.log2(patch_size)))
        if 2**stages != patch_size:
            raise ConfigurationError(f"patch size {patch_size} must be a power of two")
        if len(config.tap_layers) != stages:
            raise ConfigurationError(
                f"need {stages} tap layers for patch size {patch_size}, "
                f"got {len(config.tap_layers)}"
            )
        self.config = config
        self.stages = stages
        f = config.feature_size
        self.input_block = ConvBlock(len(MODALITIES), f)
        self.skip_blocks = nn.ModuleList(
            SkipUpsampler(token_dim, f * 2**i, stages - i) for i in range(1, stages)
        )
        self.up_deconvs = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        for j in range(stages, 0, -1):
            in_ch = token_dim if j == stages else f * 2**j
            self.up_deconvs.append(_deconv(in_ch, f * 2 ** (j - 1)))
            self.up_convs.append(ConvBlock(f * 2**j, f * 2 ** (j - 1)))
        self.out = nn.Conv3d(f, config.classes, kernel_size=1)

    def forward(self, tap_grids: Sequence[torch.Tensor], stacked: torch.Tensor) -> torch.Tensor:
        """tap_grids: one (token_dim, gz, gy, gx) map per tap layer, shallow to
        deep; stacked: (4, D, H, W) input volume. Returns (classes, D, H, W)."""
        if len(tap_grids) != self.stages:
            raise ValidationError(f"expected {self.stages} tap grids, got {len(tap_grids)}")
        skips = [self.input_block(stacked[None])]
        for block, grid in zip(self.skip_blocks, tap_grids[:-1]):
            skips.append(block(grid[None]))
        x = tap_grids[-1][None]
        for level, (deconv, conv) in enumerate(zip(self.up_deconvs, self.up_convs)):
            x = deconv(x)
            skip = skips[self.stages - 1 - level]
            x = conv(torch.cat([x, skip], dim=1))
        return self.out(x)[0]


class SegmentationModel(nn.Module):
    """Backbone (multi-modal or channel-stacked) + shared UNETR-style head."""

    def __init__(self, backbone: nn.Module, config: SegHeadConfig):
        super().__init__()
        self.backbone = backbone
        self.config = config
        self.head = UNETRHead(backbone.patch_size, backbone.enc_config.token_dim, config)

    @property
    def kind(self) -> str:
        return self.backbone.kind

    @property
    def patch_size(self) -> int:
        return self.backbone.patch_size

    def forward_study(self, study: MultiModalStudy) -> torch.Tensor:
        encoded, grid_dims = self.backbone.encode_for_downstream(study)
        missing = [l for l in self.config.tap_layers if l not in encoded.taps]
        if missing:
            raise ConfigurationError(f"encoder does not tap layers {missing}")
        tap_grids = [
            fuse_tap(encoded.taps[l], encoded, grid_dims).permute(3, 0, 1, 2)
            for l in self.config.tap_layers
        ]
        ref = next(self.head.parameters())
        stacked = torch.from_numpy(stack_study_channels(study)).to(ref.dtype)
        return self.head(tap_grids, stacked)


def seg_forward(study: MultiModalStudy, model: SegmentationModel) -> torch.Tensor:
    """Per-voxel class logits (classes, D, H, W) at full resolution."""
    return model.forward_study(study)


# ---------------------------------------------------------------------------
# Losses, sliding window, classification
# ---------------------------------------------------------------------------


def one_hot_labels(labelmap: np.ndarray, classes: int = 4) -> torch.Tensor:
    lab = np.asarray(labelmap)
    bad = set(np.unique(lab)) - set(LABEL_CODES)
    if bad:
        raise ValidationError(f"labelmap contains unknown codes {sorted(bad)}")
    mapped = np.zeros(lab.shape, dtype=np.int64)
    for code, cls in LABEL_TO_CLASS.items():
        mapped[lab == code] = cls
    return F.one_hot(torch.from_numpy(mapped), classes).permute(3, 0, 1, 2)


def dice_loss(logits: torch.Tensor, labelmap: np.ndarray, eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice over the foreground classes: 1 - mean_c (2*p.g + eps) /
    (sum p + sum g + eps) with p the softmax probabilities."""
    if logits.shape[1:] != tuple(np.asarray(labelmap).shape):
        raise ValidationError(
            f"logits spatial shape {tuple(logits.shape[1:])} != labelmap "
            f"{np.asarray(labelmap).shape}"
        )
    probs = torch.softmax(logits, dim=0)
    target = one_hot_labels(labelmap, classes=logits.shape[0]).to(probs.dtype)
    dims = (1, 2, 3)
    inter = (probs * target).sum(dim=dims)
    denom = probs.sum(dim=dims) + target.sum(dim=dims)
    per_class = (2 * inter + eps) / (denom + eps)
    return 1.0 - per_class[1:].mean()


def sliding_window_starts(dim: int, window: int, overlap: float) -> list[int]:
    """Window starts 0, stride, 2*stride, ... with the last start clamped to
    dim - window; stride = window * (1 - overlap)."""
    if window > dim:
        raise ValidationError(f"window {window} exceeds axis length {dim}")
    stride = int(round(window * (1.0 - overlap)))
    if stride < 1:
        raise ConfigurationError("overlap too large: stride collapsed to zero")
    starts: list[int] = []
    s = 0
    while True:
        if s + window >= dim:
            last = min(s, dim - window)
            if not starts or starts[-1] != last:
                starts.append(last)
            return starts
        starts.append(s)
        s += stride


def sliding_window_infer(
    study: MultiModalStudy,
    model: SegmentationModel,
    window: tuple[int, int, int] | None = None,
    overlap: float | None = None,
) -> torch.Tensor:
    """Tile the study with overlapping windows, average overlapping logits
    with uniform weights. Deterministic tile order; (classes, D, H, W) out."""
    window = tuple(window if window is not None else model.config.window)
    overlap = model.config.overlap if overlap is None else overlap
    dims = study.dims
    axis_starts = [sliding_window_starts(d, w, overlap) for d, w in zip(dims, window)]

    accum = torch.zeros((model.config.classes,) + dims, dtype=torch.float32)
    counts = torch.zeros(dims, dtype=torch.float32)
    with torch.no_grad():
        for s0, s1, s2 in itertools.product(*axis_starts):
            sl = (slice(s0, s0 + window[0]), slice(s1, s1 + window[1]), slice(s2, s2 + window[2]))
            sub_vols = {
                m: type(v)(np.ascontiguousarray(v.data[sl]), v.spacing)
                for m, v in study.volumes.items()
            }
            sub = MultiModalStudy(sub_vols)
            logits = model.forward_study(sub).to(torch.float32)
            accum[(slice(None),) + sl] += logits
            counts[sl] += 1.0
    return accum / counts[None]


def predicted_labelmap(logits: torch.Tensor) -> np.ndarray:
    """argmax over class channels, mapped back to BraTS codes."""
    cls = logits.argmax(dim=0).cpu().numpy()
    return CLASS_TO_LABEL[cls]


class ClassificationModel(nn.Module):
    """Backbone + single linear layer over the pooled (tokens + CLS) feature."""

    def __init__(self, backbone: nn.Module, config: ClsHeadConfig = ClsHeadConfig()):
        super().__init__()
        self.backbone = backbone
        self.config = config
        self.head = nn.Linear(backbone.enc_config.token_dim, config.classes)

    @property
    def kind(self) -> str:
        return self.backbone.kind

    @property
    def patch_size(self) -> int:
        return self.backbone.patch_size

    def forward_study(self, study: MultiModalStudy) -> torch.Tensor:
        encoded, _ = self.backbone.encode_for_downstream(study)
        pooled = torch.cat([encoded.tokens, encoded.cls[None, :]], dim=0).mean(dim=0)
        return self.head(pooled)


def cls_forward(study: MultiModalStudy, model: ClassificationModel) -> torch.Tensor:
    """Subtype logits (3,) from the mean over all patch tokens plus CLS."""
    return model.forward_study(study)


# ---------------------------------------------------------------------------
# Schedules, sampling, finetuning
# ---------------------------------------------------------------------------


def warmup_cosine_lr(epoch: int, peak: float, warmup: int = 40, total: int = 100) -> float:
    """Linear 0 -> peak over the warmup epochs, then cosine decay to exactly 0
    at the final epoch."""
    if epoch <= 0:
        return 0.0
    if epoch <= warmup:
        return peak * epoch / warmup
    if epoch >= total:
        return 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (epoch - warmup) / (total - warmup)))


def oversampled_indices(
    labels: Sequence[int], rng: np.random.Generator, n_draws: int | None = None
) -> np.ndarray:
    """Sample indices with replacement, weighting each item inversely to its
    class count so the expected class frequencies are uniform."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ValidationError("labels must be a non-empty 1D sequence")
    counts = np.bincount(labels)
    weights = 1.0 / counts[labels]
    weights /= weights.sum()
    n = n_draws if n_draws is not None else len(labels)
    return rng.choice(len(labels), size=n, replace=True, p=weights)


def random_crop(study: MultiModalStudy, dims: tuple[int, int, int],
                rng: np.random.Generator) -> MultiModalStudy:
    """Uniform random crop used as finetuning augmentation; identity when the
    study already has the target dims."""
    if study.dims == tuple(dims):
        return study
    if any(d < t for d, t in zip(study.dims, dims)):
        raise ValidationError(f"study dims {study.dims} smaller than crop {dims}")
    starts = [int(rng.integers(0, d - t + 1)) for d, t in zip(study.dims, dims)]
    sl = tuple(slice(s, s + t) for s, t in zip(starts, dims))
    vols = {
        m: type(v)(np.ascontiguousarray(v.data[sl]), v.spacing, dict(v.meta))
        for m, v in study.volumes.items()
    }
    lab = study.labelmap[sl] if study.labelmap is not None else None
    return MultiModalStudy(vols, lab, study.class_label, dict(study.meta))


@dataclass
class FinetuneConfig:
    task: str = "segmentation"  # or "classification"
    regime: str = "full"  # scratch | frozen | full
    epochs: int = 100
    warmup_epochs: int = 40
    lr: float = 1e-4
    weight_decay: float = 0.05
    clip_norm: float = 0.5
    batch_size: int | None = None  # task default: segmentation 2, classification 16
    crop_dims: tuple[int, int, int] | None = None
    oversample: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in ("segmentation", "classification"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.regime not in ("scratch", "frozen", "full"):
            raise ConfigurationError(f"unknown regime {self.regime!r}")
        if self.batch_size is None:
            self.batch_size = 2 if self.task == "segmentation" else 16


def set_backbone_frozen(model: nn.Module, frozen: bool) -> None:
    for p in model.backbone.parameters():
        p.requires_grad = not frozen


def load_pretrained_backbone(model: nn.Module, checkpoint_path: Path) -> None:
    """Initialize a task model's backbone from a pretraining checkpoint."""
    arrays, header = load_container(checkpoint_path)
    backbone = model.backbone
    if header.get("kind") not in (backbone.kind, "task:" + backbone.kind):
        raise ConfigurationError(
            f"checkpoint kind {header.get('kind')!r} does not match backbone "
            f"{backbone.kind!r}"
        )
    wanted = {f"model/{k}" for k in backbone.state_dict()}
    missing = wanted - set(arrays)
    if missing:
        raise ConfigurationError(f"checkpoint missing backbone arrays: {sorted(missing)[:3]} ...")
    load_state_dict_arrays(backbone, {k: v for k, v in arrays.items() if k in wanted})


def _study_loss(model: nn.Module, study: MultiModalStudy, task: str) -> torch.Tensor:
    if task == "segmentation":
        if study.labelmap is None:
            raise ValidationError("segmentation finetuning needs labelmaps")
        return dice_loss(model.forward_study(study), study.labelmap)
    if study.class_label is None:
        raise ValidationError("classification finetuning needs class labels")
    logits = model.forward_study(study)
    target = torch.tensor([study.class_label])
    return F.cross_entropy(logits[None], target)


def finetune(
    model: nn.Module,
    config: FinetuneConfig,
    train: Sequence[MultiModalStudy],
    out_dir: Path,
    model_meta: dict,
    pretrained: Path | None = None,
) -> Path:
    """Finetune a task model under one of the three regimes and save the task
    checkpoint. ``scratch`` starts from the model's fresh initialization;
    ``frozen``/``full`` load the pretrained backbone first."""
    if not train:
        raise ValidationError("finetuning needs a non-empty training set")
    if config.regime in ("frozen", "full"):
        if pretrained is None:
            raise ConfigurationError(f"regime {config.regime!r} requires a pretrained checkpoint")
        load_pretrained_backbone(model, pretrained)
    set_backbone_frozen(model, config.regime == "frozen")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = out_dir / "ledger.jsonl"
    if ledger_path.exists():
        ledger_path.unlink()

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    labels = [s.class_label for s in train] if config.task == "classification" else None

    global_step = 0
    for epoch in range(1, config.epochs + 1):
        lr = warmup_cosine_lr(epoch, config.lr, config.warmup_epochs, config.epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        if config.task == "classification" and config.oversample:
            order = oversampled_indices(labels, rng)
        else:
            order = rng.permutation(len(train))

        epoch_losses, last_norm = [], 0.0
        model.train()
        for lo in range(0, len(order), config.batch_size):
            optimizer.zero_grad(set_to_none=True)
            losses = []
            for i in order[lo : lo + config.batch_size]:
                study = train[int(i)]
                if config.crop_dims is not None:
                    study = random_crop(study, config.crop_dims, rng)
                losses.append(_study_loss(model, study, config.task))
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite finetuning loss at epoch {epoch}")
            loss.backward()
            preclip = float(
                torch.nn.utils.clip_grad_norm_(trainable, config.clip_norm).item()
            )
            optimizer.step()
            epoch_losses.append(float(loss.item()))
            last_norm = min(preclip, config.clip_norm)
            global_step += 1

        row = {
            "epoch": epoch,
            "step": global_step,
            "loss": float(np.mean(epoch_losses)),
            "lr": lr,
            "grad_norm": last_norm,
        }
        with open(ledger_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    ckpt_path = out_dir / "checkpoint_task.mmvc"
    save_container(
        ckpt_path,
        state_dict_arrays(model),
        config=model_meta,
        kind="task:" + model.kind,
        extra={"task": config.task, "regime": config.regime, "epochs": config.epochs},
    )
    return ckpt_path
