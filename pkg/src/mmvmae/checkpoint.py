"""Single-file checkpoint container: a JSON header (config, array index,
arbitrary metadata) followed by the raw little-endian array bytes.

Layout: magic ``MMVC`` | u32 format version | u64 header length | header
JSON (utf-8) | concatenated C-order array payloads. Writing the same arrays
and header twice yields byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import ValidationError

MAGIC = b"MMVC"
FORMAT_VERSION = 1


def save_container(
    path: Path,
    arrays: Mapping[str, np.ndarray],
    config: dict,
    kind: str,
    extra: dict | None = None,
) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        entries.append(
            {
                "name": name,
                "dtype": str(np.dtype(arr.dtype).newbyteorder("=")),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "arrays": entries,
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_container(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    base = 16 + header_len
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start = base + entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=entry["nbytes"] // dtype.itemsize,
                            offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return arrays, header


def state_dict_arrays(module: nn.Module, prefix: str = "model/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_dict_arrays(
    module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "model/"
) -> None:
    state = {}
    for key, tensor in module.state_dict().items():
        name = prefix + key
        if name not in arrays:
            raise ValidationError(f"checkpoint is missing parameter {name!r}")
        value = torch.from_numpy(np.ascontiguousarray(arrays[name]))
        if tuple(value.shape) != tuple(tensor.shape):
            raise ValidationError(
                f"{name}: checkpoint shape {tuple(value.shape)} != model {tuple(tensor.shape)}"
            )
        state[key] = value.to(dtype=tensor.dtype)
    module.load_state_dict(state)
