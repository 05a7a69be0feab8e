"""Operator surface: config-driven commands for pretraining, finetuning,
missing-modality synthesis, the five-scenario evaluation matrix, and report
rendering.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .baseline import baseline_synthesize
from .checkpoint import load_container, load_state_dict_arrays
from .config import (
    build_backbone,
    build_task_model,
    load_config,
    model_meta,
    rebuild_from_header,
    section,
)
from .data import dataset_from_config, prepare_studies, train_val_split
from .decoders import synthesize_modality
from .downstream import (
    FinetuneConfig,
    finetune,
    predicted_labelmap,
    sliding_window_infer,
)
from .errors import ConfigurationError, NumericError, ValidationError
from .masking import MaskConfig
from .metrics import classification_report, compose_regions, dice, psnr, ssim, to_metric_space
from .pretraining import PretrainConfig, configure_determinism, run_pretraining
from .volume_io import MODALITIES, MultiModalStudy, write_volume_raw

SCENARIO_NAMES = ("all", "no-t1", "no-t1c", "no-t2", "no-fla")


@dataclass(frozen=True)
class ScenarioSpec:
    """One evaluation condition: all inputs, or one modality removed."""

    name: str

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_NAMES:
            raise ConfigurationError(
                f"unknown scenario {self.name!r}, expected one of {SCENARIO_NAMES}"
            )

    @property
    def excluded(self) -> Optional[str]:
        return None if self.name == "all" else self.name.removeprefix("no-")

    def apply(self, study: MultiModalStudy) -> MultiModalStudy:
        if self.excluded is None or self.excluded not in study.volumes:
            return study
        return study.without(self.excluded)


# ---------------------------------------------------------------------------
# Evaluation matrix
# ---------------------------------------------------------------------------

TASK_COLUMNS = {
    "segmentation": ("dice_tc", "dice_et", "dice_wt"),
    "classification": ("accuracy", "f1_macro", "mcc"),
    "synthesis": ("psnr", "ssim"),
}


def _load_eval_model(path: Path, task: str):
    arrays, header = load_container(path)
    model = rebuild_from_header(header)
    load_state_dict_arrays(model, arrays)
    model.eval()
    if task in ("segmentation", "classification"):
        if header["extra"].get("task") != task:
            raise ConfigurationError(
                f"{path}: checkpoint was finetuned for "
                f"{header['extra'].get('task')!r}, not {task!r}"
            )
        regime = header["extra"].get("regime", "?")
    else:
        regime = "pretrained"
    return model, regime


def _segmentation_cells(
    model, studies: Sequence[MultiModalStudy], export_dir: Optional[Path] = None
) -> dict[str, float]:
    scores = {"dice_tc": [], "dice_et": [], "dice_wt": []}
    for i, study in enumerate(studies):
        if study.labelmap is None:
            raise ValidationError("segmentation evaluation needs labelmaps")
        logits = sliding_window_infer(study, model)
        labels = predicted_labelmap(logits)
        if export_dir is not None:
            write_volume_raw(labels, export_dir / f"study{i:03d}_pred.raw")
        pred = compose_regions(labels)
        truth = compose_regions(study.labelmap)
        scores["dice_tc"].append(dice(pred.tc.astype(np.uint8), truth.tc.astype(np.uint8)))
        scores["dice_et"].append(dice(pred.et.astype(np.uint8), truth.et.astype(np.uint8)))
        scores["dice_wt"].append(dice(pred.wt.astype(np.uint8), truth.wt.astype(np.uint8)))
    return {k: float(np.mean(v)) for k, v in scores.items()}


def _classification_cells(
    model, studies: Sequence[MultiModalStudy]
) -> tuple[dict[str, float], list[dict]]:
    preds, labels, per_study = [], [], []
    with torch.no_grad():
        for i, study in enumerate(studies):
            if study.class_label is None:
                raise ValidationError("classification evaluation needs class labels")
            logits = model.forward_study(study)
            arg = int(logits.argmax().item())
            preds.append(arg)
            labels.append(study.class_label)
            per_study.append(
                {
                    "study": i,
                    "logits": [float(x) for x in logits.tolist()],
                    "prediction": arg,
                    "label": study.class_label,
                }
            )
    report = classification_report(preds, labels)
    cells = {
        "accuracy": report.accuracy,
        "f1_macro": report.f1_macro,
        "mcc": report.mcc,
    }
    return cells, per_study


def _synthesis_cells(model, studies: Sequence[MultiModalStudy], target: str) -> dict[str, float]:
    psnrs, ssims = [], []
    for study in studies:
        if target not in study.volumes:
            continue
        if model.kind == "multimodal":
            synth = synthesize_modality(study, target, model)
        else:
            synth = baseline_synthesize(study, target, model)
        ref, cand = to_metric_space(study.volumes[target].data, synth.data)
        psnrs.append(min(psnr(ref, cand), 99.0))
        ssims.append(ssim(ref, cand))
    if not psnrs:
        raise ValidationError(f"no study carries ground truth for {target!r}")
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims))}


def scenario_matrix(
    task: str,
    models: dict[str, tuple[torch.nn.Module, str]],
    studies: Sequence[MultiModalStudy],
    scenarios: Sequence[str] = SCENARIO_NAMES,
    export_dir: Optional[Path] = None,
) -> tuple[list[dict], dict[str, list[dict]]]:
    """Rows = scenario x model kind; cells are task metrics averaged over the
    studies. Unavailable cells carry a reason instead of silently vanishing.

    ``export_dir`` enables per-study prediction export (interchange-format
    labelmaps for segmentation)."""
    if task not in TASK_COLUMNS:
        raise ConfigurationError(f"unknown evaluation task {task!r}")
    rows: list[dict] = []
    cls_exports: dict[str, list[dict]] = {}
    for name in scenarios:
        spec = ScenarioSpec(name)
        for kind in sorted(models):
            model, regime = models[kind]
            row = {"scenario": name, "model": kind, "regime": regime, "status": "ok"}
            for col in TASK_COLUMNS[task]:
                row[col] = None
            excluded = spec.excluded
            try:
                if task == "synthesis":
                    if excluded is None:
                        raise ValidationError("nothing missing to synthesize")
                    row.update(_synthesis_cells(model, studies, excluded))
                else:
                    if excluded is not None and not any(
                        excluded in s.volumes for s in studies
                    ):
                        raise ValidationError(f"modality {excluded!r} not present in the data")
                    scen_studies = [spec.apply(s) for s in studies]
                    if task == "segmentation":
                        sub_dir = None
                        if export_dir is not None:
                            sub_dir = Path(export_dir) / f"predictions_{name}__{kind}"
                            sub_dir.mkdir(parents=True, exist_ok=True)
                        row.update(_segmentation_cells(model, scen_studies, sub_dir))
                    else:
                        cells, per_study = _classification_cells(model, scen_studies)
                        row.update(cells)
                        cls_exports[f"{name}__{kind}"] = per_study
            except ValidationError as exc:
                row["status"] = f"unavailable: {exc}"
            rows.append(row)
    return rows, cls_exports


# ---------------------------------------------------------------------------
# Report serialization
# ---------------------------------------------------------------------------


def write_report(
    out_dir: Path, task: str, rows: list[dict], config: dict, name: str = "report"
) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"{name}.json"
    payload = {"task": task, "config": config, "rows": rows}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")

    csv_path = out_dir / f"{name}.csv"
    columns = ["scenario", "model", "regime", "status", *TASK_COLUMNS[task]]
    with open(csv_path, "w", newline="") as fh:
        fh.write("# config = " + json.dumps(config, sort_keys=True) + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, "") if row.get(c) is not None else "" for c in columns])
    return json_path, csv_path


def render_table(rows: list[dict], columns: Sequence[str]) -> str:
    widths = [max(len(c), *(len(_fmt(r.get(c))) for r in rows)) if rows else len(c)
              for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(_fmt(row.get(c)).ljust(w) for c, w in zip(columns, widths)))
    return "\n".join(lines)


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _run_seed(config: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    return int(section(config, "run").get("seed", 0))


def cmd_pretrain(config: dict, args) -> int:
    seed = _run_seed(config, args)
    configure_determinism(seed, args.deterministic)
    model_cfg = section(config, "model", required=True)
    data_cfg = section(config, "data", required=True)
    mask_cfg = section(config, "mask")
    train_cfg = section(config, "train", required=True)

    model = build_backbone(model_cfg)
    studies = prepare_studies(
        dataset_from_config(data_cfg, int(model_cfg.get("patch_size", 16))), data_cfg
    )
    train, val = train_val_split(studies, int(data_cfg.get("val_count", 1)))
    pcfg = PretrainConfig(
        epochs=int(train_cfg.get("epochs", 1200)),
        batch_size=int(train_cfg.get("batch_size", 16)),
        lr=float(train_cfg.get("lr", 1e-4)),
        weight_decay=float(train_cfg.get("weight_decay", 0.05)),
        clip_norm=float(train_cfg.get("clip_norm", 0.5)),
        plateau_factor=float(train_cfg.get("plateau_factor", 0.1)),
        plateau_patience=int(train_cfg.get("plateau_patience", 50)),
        adam_betas=(
            float(train_cfg.get("adam_beta1", 0.9)),
            float(train_cfg.get("adam_beta2", 0.999)),
        ),
        warmup_steps=int(train_cfg.get("warmup_steps", 0)),
        mask=MaskConfig(
            global_ratio=float(mask_cfg.get("global_ratio", 0.75)),
            alpha=float(mask_cfg.get("alpha", 1.0)),
        ),
        crop_dims=tuple(data_cfg.get("crop", [160, 176, 144])),
        seed=seed,
        checkpoint_every=int(train_cfg.get("checkpoint_every", 1)),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    meta = model_meta(model_cfg)
    meta["run_config"] = config
    resume = Path(args.resume) if args.resume else None
    ckpt = run_pretraining(model, pcfg, train, val, out_dir, meta, resume_from=resume)
    print(f"pretraining finished: {ckpt}")
    return 0


def cmd_finetune(config: dict, args) -> int:
    seed = _run_seed(config, args)
    configure_determinism(seed, args.deterministic)
    task_cfg = section(config, "task", required=True)
    task = task_cfg.get("task", "segmentation")
    regime = task_cfg.get("regime", "full")
    pretrained = task_cfg.get("pretrained")
    head_cfg = section(config, "head")
    data_cfg = section(config, "data", required=True)
    train_cfg = section(config, "train")

    if regime in ("frozen", "full"):
        if not pretrained:
            raise ConfigurationError(f"regime {regime!r} requires task.pretrained")
        _, header = load_container(pretrained)
        model_cfg = header["config"]["model"]  # arch pinned by the checkpoint
    else:
        model_cfg = section(config, "model", required=True)

    model = build_task_model(task, model_cfg, head_cfg)
    studies = prepare_studies(
        dataset_from_config(data_cfg, int(model_cfg.get("patch_size", 16))), data_cfg
    )
    fcfg = FinetuneConfig(
        task=task,
        regime=regime,
        epochs=int(train_cfg.get("epochs", 100)),
        warmup_epochs=int(train_cfg.get("warmup_epochs", 40)),
        lr=float(train_cfg.get("lr", 1e-4)),
        weight_decay=float(train_cfg.get("weight_decay", 0.05)),
        clip_norm=float(train_cfg.get("clip_norm", 0.5)),
        batch_size=train_cfg.get("batch_size"),
        crop_dims=tuple(train_cfg["crop"]) if "crop" in train_cfg else None,
        oversample=bool(train_cfg.get("oversample", True)),
        seed=seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config, sort_keys=True, indent=2) + "\n")
    meta = model_meta(model_cfg, head_cfg, task)
    meta["run_config"] = config
    ckpt = finetune(
        model,
        fcfg,
        studies,
        out_dir,
        meta,
        pretrained=Path(pretrained) if pretrained else None,
    )
    print(f"finetuning finished: {ckpt}")
    return 0


def cmd_synthesize(config: dict, args) -> int:
    seed = _run_seed(config, args)
    configure_determinism(seed, args.deterministic)
    syn_cfg = section(config, "synthesize", required=True)
    data_cfg = section(config, "data", required=True)
    target = syn_cfg.get("target")
    if target not in MODALITIES:
        raise ConfigurationError(f"synthesize.target must be one of {MODALITIES}, got {target!r}")
    ckpt_path = syn_cfg.get("checkpoint")
    if not ckpt_path:
        raise ConfigurationError("synthesize.checkpoint is required")
    arrays, header = load_container(ckpt_path)
    model = rebuild_from_header(header)
    load_state_dict_arrays(model, arrays)
    model.eval()

    patch = int(header["config"]["model"].get("patch_size", 16))
    studies = prepare_studies(dataset_from_config(data_cfg, patch), data_cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, study in enumerate(studies):
        context = study.without(target) if target in study.volumes else study
        if model.kind == "multimodal":
            synth = synthesize_modality(context, target, model)
        else:
            synth = baseline_synthesize(context, target, model)
        write_volume_raw(synth.data, out_dir / f"study{i:03d}_{target}.raw", synth.spacing)
        row = {"study": i, "target": target}
        if target in study.volumes:
            ref, cand = to_metric_space(study.volumes[target].data, synth.data)
            row["psnr"] = min(psnr(ref, cand), 99.0)
            row["ssim"] = ssim(ref, cand)
        rows.append(row)
    payload = {"config": config, "rows": rows}
    (out_dir / "synthesis.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(render_table(rows, ["study", "target", "psnr", "ssim"]))
    return 0


def cmd_evaluate(config: dict, args) -> int:
    seed = _run_seed(config, args)
    configure_determinism(seed, args.deterministic)
    eval_cfg = section(config, "evaluate", required=True)
    data_cfg = section(config, "data", required=True)
    models_cfg = section(config, "models", required=True)
    task = eval_cfg.get("task", "segmentation")
    if task not in TASK_COLUMNS:
        raise ConfigurationError(f"evaluate.task must be one of {sorted(TASK_COLUMNS)}")
    scenarios = eval_cfg.get("scenarios", list(SCENARIO_NAMES))

    models: dict[str, tuple[torch.nn.Module, str]] = {}
    patch = 16
    for kind, path in sorted(models_cfg.items()):
        model, regime = _load_eval_model(Path(path), task)
        models[kind] = (model, regime)
        patch = model.patch_size
    if not models:
        raise ConfigurationError("[models] lists no checkpoints")

    studies = prepare_studies(dataset_from_config(data_cfg, patch), data_cfg)
    out_dir = Path(args.out)
    export_dir = out_dir if eval_cfg.get("export_predictions", False) else None
    rows, cls_exports = scenario_matrix(task, models, studies, scenarios, export_dir=export_dir)
    json_path, csv_path = write_report(out_dir, task, rows, config)
    if cls_exports:
        for key in sorted(cls_exports):
            with open(out_dir / f"predictions_{key}.csv", "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["study", "logit0", "logit1", "logit2", "prediction", "label"])
                for row in cls_exports[key]:
                    writer.writerow([row["study"], *row["logits"], row["prediction"], row["label"]])
    print(render_table(rows, ["scenario", "model", "regime", "status", *TASK_COLUMNS[task]]))
    print(f"report written to {json_path} and {csv_path}")
    return 0


def cmd_report(config: dict, args) -> int:
    rep_cfg = section(config, "report", required=True)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    chunks: list[str] = []
    for ledger in rep_cfg.get("ledgers", []):
        path = Path(ledger)
        if not path.exists():
            raise ValidationError(f"ledger not found: {path}")
        rows = [json.loads(line) for line in path.read_text().splitlines() if line]
        columns = ["epoch", "step", "loss", "lr", "grad_norm"]
        columns += [c for c in ("val_loss", "val_psnr", "val_ssim") if c in rows[0]]
        chunks.append(f"== {path}\n" + render_table(rows, columns))
        if rep_cfg.get("plots", True):
            _plot_ledger(rows, out_dir / (path.stem + ".png"))
    for report in rep_cfg.get("evaluations", []):
        payload = json.loads(Path(report).read_text())
        columns = ["scenario", "model", "regime", "status", *TASK_COLUMNS[payload["task"]]]
        chunks.append(f"== {report}\n" + render_table(payload["rows"], columns))
    text = "\n\n".join(chunks) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text)
    return 0


def _plot_ledger(rows: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r["epoch"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [r["loss"] for r in rows], label="train loss")
    if "val_loss" in rows[0]:
        ax.plot(epochs, [r["val_loss"] for r in rows], label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "mmvmae"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmvmae",
        description="Multi-modal masked-autoencoder pipelines for volumetric studies",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML or JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument(
            "--deterministic",
            type=lambda s: s.lower() not in ("0", "false", "no"),
            default=True,
            help="bit-stable single-threaded mode (default true)",
        )
        if name == "pretrain":
            p.add_argument("--resume", default=None, help="checkpoint to resume from")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        return COMMANDS[args.command](config, args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
