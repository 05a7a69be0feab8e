"""Reconstruction objective and the pretraining loop: AdamW with decoupled
weight decay, global-norm clipping, plateau-driven learning-rate decay,
JSON-lines run ledger, and bit-stable checkpoint/resume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import load_container, load_state_dict_arrays, save_container, state_dict_arrays
from .errors import ConfigurationError, NumericError, ValidationError
from .masking import MaskConfig
from .metrics import psnr, ssim, to_metric_space
from .volume_io import MultiModalStudy


@dataclass
class PretrainConfig:
    epochs: int = 1200
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.05
    clip_norm: float = 0.5
    plateau_factor: float = 0.1
    plateau_patience: int = 50
    plateau_tol: float = 1e-6
    adam_betas: tuple[float, float] = (0.9, 0.999)
    warmup_steps: int = 0
    mask: MaskConfig = field(default_factory=MaskConfig)
    crop_dims: tuple[int, int, int] = (160, 176, 144)
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self) -> None:
        if min(self.epochs, self.batch_size, self.plateau_patience) < 1:
            raise ConfigurationError("epochs, batch_size and patience must be >= 1")
        if min(self.lr, self.weight_decay, self.clip_norm, self.plateau_factor) < 0:
            raise ConfigurationError("rates, decay and clip norm must be non-negative")


def configure_determinism(seed: int, deterministic: bool = True) -> None:
    """Seed torch and, in deterministic mode, force single-threaded
    deterministic kernels so repeated runs are bit-identical."""
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def reconstruction_loss(
    predictions: dict[str, torch.Tensor], targets: dict[str, torch.Tensor]
) -> torch.Tensor:
    """MSE pooled uniformly over every patch voxel of every present modality,
    masked and visible alike."""
    if not targets:
        raise ValidationError("no reconstruction targets")
    chunks = []
    for m, target in targets.items():
        if m not in predictions:
            raise ValidationError(f"missing prediction for modality {m!r}")
        if predictions[m].shape != target.shape:
            raise ValidationError(
                f"{m}: prediction shape {tuple(predictions[m].shape)} != "
                f"target {tuple(target.shape)}"
            )
        chunks.append(((predictions[m] - target) ** 2).reshape(-1))
    return torch.cat(chunks).mean()


def batch_loss(
    model: torch.nn.Module,
    batch: Sequence[MultiModalStudy],
    rng: np.random.Generator,
    mask: MaskConfig,
) -> torch.Tensor:
    """Mean reconstruction loss over a batch, one fresh mask draw per study.

    Works for both backbone kinds: the multi-modal model samples a Dirichlet
    mask plan, the baseline a uniform joint mask."""
    losses = [model.masked_reconstruction_loss(study, rng, mask) for study in batch]
    return torch.stack(losses).mean()


def pretrain_step(
    batch: Sequence[MultiModalStudy],
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    config: PretrainConfig,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One optimization step; returns loss and gradient norms (pre/post clip)."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, rng, config.mask)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite pretraining loss {loss.item()!r} on a batch of {len(batch)} studies"
        )
    loss.backward()
    preclip = float(
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm).item()
    )
    optimizer.step()
    return {
        "loss": float(loss.item()),
        "grad_norm_preclip": preclip,
        "grad_norm": min(preclip, config.clip_norm),
    }


class PlateauScheduler:
    """Multiply the lr by ``factor`` after ``patience`` consecutive epochs
    without a validation improvement larger than ``tol``."""

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 50, tol: float = 1e-6):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.tol = tol
        self.best = float("inf")
        self.stale = 0

    def step(self, validation_loss: float) -> float:
        if validation_loss < self.best - self.tol:
            self.best = validation_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "stale": self.stale}

    def load(self, state: dict) -> None:
        self.lr = state["lr"]
        self.best = state["best"]
        self.stale = state["stale"]


def validation_metrics(
    model: torch.nn.Module, val: Sequence[MultiModalStudy], config: PretrainConfig
) -> dict[str, float]:
    """Masked-reconstruction validation with a fixed mask seed, so the
    monitored loss is comparable across epochs. Reports loss plus PSNR/SSIM
    of the reconstructed volumes in [0, 1] metric space."""
    model.eval()
    rng = np.random.default_rng(config.seed + 0x5EED)
    losses, psnrs, ssims = [], [], []
    with torch.no_grad():
        for study in val:
            loss, recons = model.reconstruct_volumes(study, rng, config.mask)
            losses.append(loss)
            for m, recon in recons.items():
                ref, cand = to_metric_space(study.volumes[m].data, recon)
                psnrs.append(min(psnr(ref, cand), 99.0))  # cap the +inf sentinel for averaging
                if min(study.dims) >= 7:
                    ssims.append(ssim(ref, cand))
    return {
        "val_loss": float(np.mean(losses)),
        "val_psnr": float(np.mean(psnrs)),
        "val_ssim": float(np.mean(ssims)) if ssims else float("nan"),
    }


def _rng_state_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    for idx, param in enumerate(optimizer.param_groups[0]["params"]):
        state = optimizer.state.get(param)
        if not state:
            continue
        arrays[f"opt/{idx}/exp_avg"] = state["exp_avg"].detach().cpu().numpy()
        arrays[f"opt/{idx}/exp_avg_sq"] = state["exp_avg_sq"].detach().cpu().numpy()
        steps[str(idx)] = float(state["step"])
    return arrays, steps


def _load_optimizer_arrays(
    optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray], steps: dict
) -> None:
    params = optimizer.param_groups[0]["params"]
    state: dict = {}
    for idx, param in enumerate(params):
        key = f"opt/{idx}/exp_avg"
        if key not in arrays:
            continue
        state[idx] = {
            "step": torch.tensor(steps[str(idx)]),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[key])).to(param.dtype),
            "exp_avg_sq": torch.from_numpy(
                np.ascontiguousarray(arrays[f"opt/{idx}/exp_avg_sq"])
            ).to(param.dtype),
        }
    optimizer.load_state_dict(
        {"state": state, "param_groups": optimizer.state_dict()["param_groups"]}
    )


def save_train_checkpoint(
    path: Path,
    model: torch.nn.Module,
    optimizer: torch.optim.Optimizer,
    plateau: PlateauScheduler,
    epoch: int,
    global_step: int,
    rng: np.random.Generator,
    model_meta: dict,
) -> None:
    arrays = state_dict_arrays(model)
    opt_arrays, steps = _optimizer_arrays(optimizer)
    arrays.update(opt_arrays)
    extra = {
        "epoch": epoch,
        "global_step": global_step,
        "opt_steps": steps,
        "plateau": plateau.state(),
        "rng_state": _rng_state_json(rng),
    }
    save_container(path, arrays, config=model_meta, kind=model.kind, extra=extra)


def run_pretraining(
    model: torch.nn.Module,
    config: PretrainConfig,
    train: Sequence[MultiModalStudy],
    val: Sequence[MultiModalStudy],
    out_dir: Path,
    model_meta: dict,
    resume_from: Path | None = None,
) -> Path:
    """Epoch loop with per-epoch validation, run ledger, checkpoints, and
    bit-stable resume. Returns the path of the last checkpoint."""
    if not train or not val:
        raise ValidationError("pretraining needs non-empty train and validation splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ledger_path = out_dir / "ledger.jsonl"
    last_path = out_dir / "checkpoint_last.mmvc"
    best_path = out_dir / "checkpoint_best.mmvc"

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        weight_decay=config.weight_decay,
        betas=config.adam_betas,
    )
    plateau = PlateauScheduler(
        config.lr, config.plateau_factor, config.plateau_patience, config.plateau_tol
    )
    rng = np.random.default_rng(config.seed)
    start_epoch, global_step = 0, 0

    if resume_from is not None:
        arrays, header = load_container(resume_from)
        load_state_dict_arrays(model, arrays)
        _load_optimizer_arrays(optimizer, arrays, header["extra"]["opt_steps"])
        plateau.load(header["extra"]["plateau"])
        rng.bit_generator.state = json.loads(header["extra"]["rng_state"])
        start_epoch = header["extra"]["epoch"]
        global_step = header["extra"]["global_step"]
        for group in optimizer.param_groups:
            group["lr"] = plateau.lr
    elif ledger_path.exists():
        ledger_path.unlink()

    for epoch in range(start_epoch + 1, config.epochs + 1):
        order = rng.permutation(len(train))
        epoch_losses, last_norm = [], 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[lo : lo + config.batch_size]]
            if global_step < config.warmup_steps:
                scale = (global_step + 1) / config.warmup_steps
                for group in optimizer.param_groups:
                    group["lr"] = plateau.lr * scale
            else:
                for group in optimizer.param_groups:
                    group["lr"] = plateau.lr
            stats = pretrain_step(batch, model, optimizer, config, rng)
            epoch_losses.append(stats["loss"])
            last_norm = stats["grad_norm"]
            global_step += 1

        vstats = validation_metrics(model, val, config)
        lr = plateau.step(vstats["val_loss"])
        improved = plateau.best == vstats["val_loss"]
        for group in optimizer.param_groups:
            group["lr"] = lr

        row = {
            "epoch": epoch,
            "step": global_step,
            "loss": float(np.mean(epoch_losses)),
            "lr": lr,
            "grad_norm": last_norm,
            **vstats,
        }
        with open(ledger_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            save_train_checkpoint(
                last_path, model, optimizer, plateau, epoch, global_step, rng, model_meta
            )
        if improved:
            save_train_checkpoint(
                best_path, model, optimizer, plateau, epoch, global_step, rng, model_meta
            )
    return last_path
