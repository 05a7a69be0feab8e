"""Config loading (TOML subset or JSON) and model construction from config
dicts, shared by the CLI and by checkpoint headers.

The TOML reader covers the flat style the commands use: ``[section]`` tables
with string/number/boolean/array values and ``#`` comments. JSON configs are
accepted everywhere a TOML one is.
"""

from __future__ import annotations

import json
from pathlib import Path

from .baseline import BaselineConfig, BaselineMAE
from .decoders import DecoderConfig, MultiModalMAE
from .downstream import ClassificationModel, ClsHeadConfig, SegHeadConfig, SegmentationModel
from .encoder import EncoderConfig
from .errors import ConfigurationError


def _parse_toml_value(raw: str, path: str):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_toml_value(item, path) for item in _split_array(inner, path)]
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"{path}: cannot parse TOML value {raw!r}") from None


def _split_array(inner: str, path: str) -> list[str]:
    items, depth, in_str, start = [], 0, False, 0
    for i, ch in enumerate(inner):
        if ch == '"':
            in_str = not in_str
        elif not in_str:
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
            elif ch == "," and depth == 0:
                items.append(inner[start:i])
                start = i + 1
    tail = inner[start:].strip()
    if tail:
        items.append(tail)
    return items


def _strip_comment(line: str) -> str:
    out, in_str = [], False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def parse_minimal_toml(text: str, path: str = "<config>") -> dict:
    """Flat-table TOML subset: sections, scalars, single-line arrays."""
    config: dict = {}
    table = config
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line).strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name or "." in name:
                raise ConfigurationError(f"{path}:{lineno}: unsupported table name {name!r}")
            table = config.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        table[key.strip()] = _parse_toml_value(value, f"{path}:{lineno}")
    return config


def load_config(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON config: {exc}") from exc
    return parse_minimal_toml(text, str(path))


def section(config: dict, name: str, required: bool = False) -> dict:
    if name not in config:
        if required:
            raise ConfigurationError(f"config is missing the [{name}] section")
        return {}
    value = config[name]
    if not isinstance(value, dict):
        raise ConfigurationError(f"[{name}] must be a table, got {type(value).__name__}")
    return value


def _as_tuple(value, name: str) -> tuple:
    if not isinstance(value, (list, tuple)):
        raise ConfigurationError(f"{name} must be an array")
    return tuple(value)


# ---------------------------------------------------------------------------
# Model construction from config dicts (also used for checkpoint headers)
# ---------------------------------------------------------------------------

MODEL_KINDS = ("multimodal", "baseline")


def encoder_config(model_cfg: dict) -> EncoderConfig:
    return EncoderConfig(
        layers=int(model_cfg.get("layers", 12)),
        token_dim=int(model_cfg.get("token_dim", 768)),
        heads=int(model_cfg.get("heads", 12)),
        mlp_ratio=float(model_cfg.get("mlp_ratio", 4.0)),
        patch_size=int(model_cfg.get("patch_size", 16)),
        tap_layers=tuple(
            int(t) for t in model_cfg.get("tap_layers", [3, 6, 9, 12])
        ),
    )


def build_backbone(model_cfg: dict):
    """Backbone from a flat model config; ``kind`` picks the architecture."""
    kind = model_cfg.get("kind", "multimodal")
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    enc = encoder_config(model_cfg)
    if kind == "multimodal":
        dec = DecoderConfig(
            layers=int(model_cfg.get("decoder_layers", 3)),
            token_dim=int(model_cfg.get("decoder_dim", 384)),
            heads=int(model_cfg.get("decoder_heads", 12)),
            mlp_ratio=float(model_cfg.get("decoder_mlp_ratio", 4.0)),
        )
        return MultiModalMAE(enc, dec)
    base = BaselineConfig(
        mask_ratio=float(model_cfg.get("mask_ratio", 0.75)),
        decoder_layers=int(model_cfg.get("decoder_layers", 8)),
        decoder_dim=int(model_cfg.get("decoder_dim", 384)),
        decoder_heads=int(model_cfg.get("decoder_heads", 12)),
        decoder_mlp_ratio=float(model_cfg.get("decoder_mlp_ratio", 4.0)),
    )
    return BaselineMAE(enc, base)


def seg_head_config(head_cfg: dict, model_cfg: dict) -> SegHeadConfig:
    tap_default = model_cfg.get("tap_layers", [3, 6, 9, 12])
    return SegHeadConfig(
        tap_layers=tuple(int(t) for t in head_cfg.get("tap_layers", tap_default)),
        feature_size=int(head_cfg.get("feature_size", 16)),
        classes=int(head_cfg.get("classes", 4)),
        window=_as_tuple(head_cfg.get("window", [128, 128, 128]), "head.window"),
        overlap=float(head_cfg.get("overlap", 0.25)),
        finetune_crop=_as_tuple(
            head_cfg.get("finetune_crop", [128, 128, 128]), "head.finetune_crop"
        ),
    )


def build_task_model(task: str, model_cfg: dict, head_cfg: dict):
    backbone = build_backbone(model_cfg)
    if task == "segmentation":
        return SegmentationModel(backbone, seg_head_config(head_cfg, model_cfg))
    if task == "classification":
        return ClassificationModel(backbone, ClsHeadConfig(int(head_cfg.get("classes", 3))))
    raise ConfigurationError(f"unknown task {task!r}")


def model_meta(model_cfg: dict, head_cfg: dict | None = None, task: str | None = None) -> dict:
    """The config dict embedded in checkpoint headers so a model can be
    rebuilt from the file alone."""
    meta = {"model": dict(model_cfg)}
    if head_cfg is not None:
        meta["head"] = dict(head_cfg)
    if task is not None:
        meta["task"] = task
    return meta


def rebuild_from_header(header: dict):
    """Reconstruct the model a checkpoint was saved from (backbone for
    pretraining checkpoints, task model for finetuned ones)."""
    meta = header.get("config", {})
    model_cfg = meta.get("model")
    if model_cfg is None:
        raise ConfigurationError("checkpoint header carries no model config")
    task = meta.get("task")
    if header.get("kind", "").startswith("task:"):
        if task is None:
            raise ConfigurationError("task checkpoint header carries no task name")
        return build_task_model(task, model_cfg, meta.get("head", {}))
    return build_backbone(model_cfg)
