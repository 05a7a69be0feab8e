"""Volumetric study ingestion, synthetic phantoms, cropping and normalization.

A study bundles one 3D volume per available acquisition sequence (t1, t1c,
t2, fla), an optional integer labelmap and an optional subtype label. All
operations here are pure functions of their inputs (and an explicit seed),
so they are safe to call from parallel workers.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError, ValidationError

MODALITIES: tuple[str, ...] = ("t1", "t1c", "t2", "fla")
CLASS_NAMES: tuple[str, ...] = ("GBM", "Astro", "Oligo")
LABEL_CODES: tuple[int, ...] = (0, 1, 2, 4)  # background, necrotic core, edema, enhancing

# Enhancing-to-core volume ratio bins separating (Oligo | Astro | GBM).
# Frozen after enumerating the generator over 1000 seeds (see tests).
CLASS_RATIO_BINS: tuple[float, float] = (0.55, 0.80)


@dataclass
class Volume:
    """A single 3D scalar volume with voxel spacing carried as metadata."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValidationError(f"volume must be 3D with positive dims, got {self.data.shape}")
        if np.issubdtype(self.data.dtype, np.floating) and not np.isfinite(self.data).all():
            raise ValidationError("volume contains non-finite intensities")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]


@dataclass
class MultiModalStudy:
    """Per-modality volumes plus optional voxel labels and subtype label.

    ``present`` is always ordered by the modality registry; every present
    volume shares the same dims, and the labelmap (when given) matches them.
    """

    volumes: dict[str, Volume]
    labelmap: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        unknown = set(self.volumes) - set(MODALITIES)
        if unknown:
            raise ValidationError(f"unknown modality name(s): {sorted(unknown)}")
        if not self.volumes:
            raise ValidationError("study has no modalities")
        dims = {v.dims for v in self.volumes.values()}
        if len(dims) != 1:
            raise ValidationError(f"modalities disagree on dims: {sorted(dims)}")
        if self.labelmap is not None:
            self.labelmap = np.asarray(self.labelmap)
            if tuple(self.labelmap.shape) != self.dims:
                raise ValidationError(
                    f"labelmap dims {self.labelmap.shape} != volume dims {self.dims}"
                )
            bad = set(np.unique(self.labelmap)) - set(LABEL_CODES)
            if bad:
                raise ValidationError(f"labelmap contains non-BraTS codes: {sorted(bad)}")
        if self.class_label is not None and self.class_label not in range(len(CLASS_NAMES)):
            raise ValidationError(f"class_label must be in 0..{len(CLASS_NAMES)-1}")

    @property
    def present(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.volumes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return next(iter(self.volumes.values())).dims

    def without(self, modality: str) -> "MultiModalStudy":
        """Copy of the study with one modality removed (missing-input scenario)."""
        if modality not in self.volumes:
            raise ValidationError(f"{modality!r} not present, cannot drop it")
        if len(self.volumes) == 1:
            raise ValidationError("cannot drop the only modality")
        vols = {m: v for m, v in self.volumes.items() if m != modality}
        return MultiModalStudy(vols, self.labelmap, self.class_label, dict(self.meta))


# ---------------------------------------------------------------------------
# Synthetic phantoms
# ---------------------------------------------------------------------------

#: base intensity per (modality, tissue); tissues keyed as
#: brain / edema / necrotic / enhancing. Contrasts follow clinical convention:
#: fla bright on edema, t1c bright on the enhancing rim, t2 bright on
#: edema+core, t1 low contrast.
DEFAULT_INTENSITY_PROFILES: dict[str, dict[str, float]] = {
    "t1": {"brain": 0.80, "edema": 0.68, "necrotic": 0.55, "enhancing": 0.75},
    "t1c": {"brain": 0.80, "edema": 0.68, "necrotic": 0.50, "enhancing": 1.45},
    "t2": {"brain": 0.70, "edema": 1.25, "necrotic": 1.10, "enhancing": 0.90},
    "fla": {"brain": 0.75, "edema": 1.40, "necrotic": 0.90, "enhancing": 0.95},
}


@dataclass
class PhantomConfig:
    """Knobs for the deterministic phantom generator."""

    dims: tuple[int, int, int] = (64, 64, 64)
    patch_size: int = 16
    tumor_region_count_range: tuple[int, int] = (1, 2)
    intensity_profiles: Mapping[str, Mapping[str, float]] = field(
        default_factory=lambda: DEFAULT_INTENSITY_PROFILES
    )
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        if any(d % self.patch_size for d in self.dims):
            raise ConfigurationError(
                f"phantom dims {self.dims} must be divisible by patch size {self.patch_size}"
            )
        lo, hi = self.tumor_region_count_range
        if not (1 <= lo <= hi):
            raise ConfigurationError("tumor_region_count_range must satisfy 1 <= lo <= hi")
        for mod, prof in self.intensity_profiles.items():
            if mod not in MODALITIES:
                raise ConfigurationError(f"intensity profile for unknown modality {mod!r}")
            if any(not (0.0 < v < 10.0) for v in prof.values()):
                raise ConfigurationError("intensity profile values must lie in (0, 10)")


def _ellipsoid_mask(dims: Sequence[int], center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    grids = np.ogrid[0 : dims[0], 0 : dims[1], 0 : dims[2]]
    acc = np.zeros(tuple(dims), dtype=np.float64)
    for g, c, a in zip(grids, center, axes):
        acc = acc + ((g - c) / max(a, 1e-6)) ** 2
    return acc <= 1.0


def _phantom_geometry(config: PhantomConfig, rng: np.random.Generator):
    """Draw brain + nested lesion geometry; shared by the full generator and
    the labels-only fast path, so both consume the rng identically."""
    dims = np.asarray(config.dims, dtype=np.float64)
    brain_center = dims / 2.0 + rng.uniform(-0.04, 0.04, size=3) * dims
    brain_axes = rng.uniform(0.30, 0.40, size=3) * dims
    brain = _ellipsoid_mask(config.dims, brain_center, brain_axes)

    lo, hi = config.tumor_region_count_range
    n_lesions = int(rng.integers(lo, hi + 1))
    labelmap = np.zeros(config.dims, dtype=np.int16)
    for _ in range(n_lesions):
        edema_axes = rng.uniform(0.10, 0.20, size=3) * dims
        slack = np.maximum(brain_axes - edema_axes, 0.0)
        center = brain_center + rng.uniform(-0.5, 0.5, size=3) * slack
        core_scale = rng.uniform(0.50, 0.80)
        rim_scale = rng.uniform(0.30, 0.85)  # necrosis fraction of the core axes

        edema = _ellipsoid_mask(config.dims, center, edema_axes) & brain
        core = _ellipsoid_mask(config.dims, center, edema_axes * core_scale) & brain
        necro = _ellipsoid_mask(config.dims, center, edema_axes * core_scale * rim_scale) & brain

        # priority: enhancing rim > necrotic > edema; never overwrite a
        # higher-priority label from an earlier lesion
        lesion_ed = edema & ~core
        lesion_et = core & ~necro
        labelmap[lesion_ed & (labelmap == 0)] = 2
        labelmap[necro & ((labelmap == 0) | (labelmap == 2))] = 1
        labelmap[lesion_et & (labelmap != 4)] = 4

    et = int((labelmap == 4).sum())
    tc = int(((labelmap == 1) | (labelmap == 4)).sum())
    ratio = et / tc if tc else 0.0
    if ratio >= CLASS_RATIO_BINS[1]:
        class_label = CLASS_NAMES.index("GBM")
    elif ratio >= CLASS_RATIO_BINS[0]:
        class_label = CLASS_NAMES.index("Astro")
    else:
        class_label = CLASS_NAMES.index("Oligo")
    return brain, labelmap, class_label


def generate_phantom_labels(config: PhantomConfig) -> tuple[np.ndarray, int]:
    """Labelmap and class label only; skips intensity rendering but draws the
    same geometry as :func:`generate_phantom` for the same seed."""
    rng = np.random.default_rng(config.seed)
    _, labelmap, class_label = _phantom_geometry(config, rng)
    return labelmap, class_label


def generate_phantom(config: PhantomConfig) -> MultiModalStudy:
    """Deterministic four-modality study with BraTS-style labels.

    The brain is an ellipsoid of smooth nonzero intensity on a zero
    background; each lesion is a nest of ellipsoids (edema > core > necrosis)
    so the enhancing rim sits inside the core-bearing region inside edema.
    """
    rng = np.random.default_rng(config.seed)
    brain, labelmap, class_label = _phantom_geometry(config, rng)

    tissue = np.full(config.dims, -1, dtype=np.int8)  # -1 background
    tissue[brain] = 0  # healthy brain
    tissue[labelmap == 2] = 1
    tissue[labelmap == 1] = 2
    tissue[labelmap == 4] = 3
    tissue_keys = ("brain", "edema", "necrotic", "enhancing")

    volumes: dict[str, Volume] = {}
    for mod in MODALITIES:
        profile = config.intensity_profiles[mod]
        base = np.zeros(config.dims, dtype=np.float64)
        for code, key in enumerate(tissue_keys):
            base[tissue == code] = profile[key]
        smooth = gaussian_filter(rng.standard_normal(config.dims), sigma=min(config.dims) / 8.0)
        span = np.abs(smooth).max()
        smooth = 1.0 + 0.12 * smooth / (span if span > 0 else 1.0)
        data = base * smooth + config.noise_sigma * rng.standard_normal(config.dims)
        data[~brain] = 0.0
        data[brain] = np.clip(data[brain], 0.02, None)  # keep foreground strictly nonzero
        volumes[mod] = Volume(data.astype(np.float32), meta={"phantom_seed": config.seed})

    return MultiModalStudy(
        volumes,
        labelmap=labelmap,
        class_label=class_label,
        meta={"phantom_seed": config.seed},
    )


# ---------------------------------------------------------------------------
# Cropping and normalization
# ---------------------------------------------------------------------------


def _crop_with_pad(data: np.ndarray, starts: Sequence[int], target: Sequence[int], fill=0):
    out = np.full(tuple(target), fill, dtype=data.dtype)
    src_slices, dst_slices = [], []
    for s, t, d in zip(starts, target, data.shape):
        src_lo, src_hi = max(s, 0), min(s + t, d)
        if src_lo >= src_hi:
            return out  # window entirely outside the volume
        src_slices.append(slice(src_lo, src_hi))
        dst_slices.append(slice(src_lo - s, src_hi - s))
    out[tuple(dst_slices)] = data[tuple(src_slices)]
    return out


def foreground_crop_pad(study: MultiModalStudy, target_dims: Sequence[int]) -> MultiModalStudy:
    """Crop/pad the study to ``target_dims`` centered on its foreground.

    The foreground box is the union bounding box of nonzero voxels across all
    present modalities; ties in centering break toward lower indices. When the
    box fits inside the target, the window is shifted to keep every nonzero
    voxel. An all-zero study falls back to a geometric center crop and flags
    it in the returned study's meta.
    """
    target = tuple(int(t) for t in target_dims)
    dims = study.dims
    union = np.zeros(dims, dtype=bool)
    for vol in study.volumes.values():
        union |= vol.data != 0

    fallback = not union.any()
    starts = []
    if fallback:
        for d, t in zip(dims, target):
            starts.append((d - t) // 2 if d >= t else -((t - d) // 2))
    else:
        nz = np.nonzero(union)
        for axis, t in enumerate(target):
            lo, hi = int(nz[axis].min()), int(nz[axis].max())
            # symmetric margins around the box; floor division biases the odd
            # voxel toward lower indices, and the box is fully covered
            # whenever its extent fits inside the window
            starts.append(lo + (hi - lo + 1 - t) // 2)

    volumes = {
        m: Volume(_crop_with_pad(v.data, starts, target), v.spacing, dict(v.meta))
        for m, v in study.volumes.items()
    }
    labelmap = None
    if study.labelmap is not None:
        labelmap = _crop_with_pad(study.labelmap, starts, target)
    meta = dict(study.meta)
    meta["crop_start"] = tuple(starts)
    if fallback:
        meta["crop_fallback_geometric_center"] = True
    return MultiModalStudy(volumes, labelmap, study.class_label, meta)


def normalize_modality(volume: Volume, scheme: str) -> Volume:
    """Normalize a single volume.

    ``zscore_foreground``: zero-mean/unit-std over nonzero voxels, background
    stays exactly 0. ``minmax_unit``: affine map of the full volume to [0, 1].
    Degenerate inputs (no foreground, constant intensities) are returned
    zero-centered with a flag in meta instead of raising.
    """
    data = volume.data.astype(np.float32)
    meta = dict(volume.meta)
    if scheme == "zscore_foreground":
        fg = data != 0
        if not fg.any():
            meta["normalize_degenerate"] = True
            return Volume(data, volume.spacing, meta)
        mean = float(data[fg].mean())
        std = float(data[fg].std())
        out = data.copy()
        if std < 1e-12:
            out[fg] = 0.0
            meta["constant_foreground"] = True
        else:
            out[fg] = (data[fg] - mean) / std
        return Volume(out, volume.spacing, meta)
    if scheme == "minmax_unit":
        lo, hi = float(data.min()), float(data.max())
        if hi - lo < 1e-12:
            meta["normalize_degenerate"] = True
            return Volume(np.zeros_like(data), volume.spacing, meta)
        return Volume((data - lo) / (hi - lo), volume.spacing, meta)
    raise ConfigurationError(f"unknown normalization scheme {scheme!r}")


def normalize_study(study: MultiModalStudy, scheme: str = "zscore_foreground") -> MultiModalStudy:
    vols = {m: normalize_modality(v, scheme) for m, v in study.volumes.items()}
    return MultiModalStudy(vols, study.labelmap, study.class_label, dict(study.meta))


# ---------------------------------------------------------------------------
# On-disk formats: raw interchange volumes, NIfTI ingestion, study manifests
# ---------------------------------------------------------------------------

_RAW_DTYPES = {"float32": "<f4", "float64": "<f8", "int16": "<i2", "int32": "<i4", "uint8": "|u1"}


def write_volume_raw(data: np.ndarray, path: Path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Interchange format: little-endian C-order array + JSON sidecar."""
    path = Path(path)
    dtype_name = str(data.dtype)
    if dtype_name not in _RAW_DTYPES:
        raise ValidationError(f"unsupported interchange dtype {dtype_name}")
    path.write_bytes(np.ascontiguousarray(data).astype(_RAW_DTYPES[dtype_name]).tobytes())
    sidecar = {
        "dims": list(data.shape),
        "spacing": list(spacing),
        "dtype": dtype_name,
        "order": "C",
        "byteorder": "little",
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def read_volume_raw(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not path.exists():
        raise FileNotFoundError(path)
    if not sidecar_path.exists():
        raise FileNotFoundError(sidecar_path)
    sidecar = json.loads(sidecar_path.read_text())
    dtype = _RAW_DTYPES.get(sidecar.get("dtype", "float32"))
    if dtype is None:
        raise ValidationError(f"unsupported interchange dtype {sidecar.get('dtype')!r}")
    data = np.frombuffer(path.read_bytes(), dtype=dtype).reshape(sidecar["dims"])
    return data.astype(sidecar["dtype"]), tuple(sidecar.get("spacing", (1.0, 1.0, 1.0)))


_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}


def read_nifti(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Minimal NIfTI-1 reader (single-file .nii / .nii.gz, common dtypes).

    Returns the volume with axes ordered (z, y, x) so the slowest-varying
    NIfTI axis comes first, matching the package's (D, H, W) convention.
    """
    path = Path(path)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:  # type: ignore[operator]
        blob = fh.read()
    if len(blob) < 348:
        raise ValidationError(f"{path}: too short to be a NIfTI-1 file")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise ValidationError(f"{path}: bad NIfTI header size")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    if not (1 <= dim[0] <= 7):
        raise ValidationError(f"{path}: bad NIfTI ndim {dim[0]}")
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise ValidationError(f"{path}: only 3D NIfTI volumes are supported")
    (datatype,) = struct.unpack_from(endian + "h", blob, 70)
    np_dtype = _NIFTI_DTYPES.get(datatype)
    if np_dtype is None:
        raise ValidationError(f"{path}: unsupported NIfTI datatype {datatype}")
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)

    nx, ny, nz = dim[1], dim[2], dim[3]
    count = nx * ny * nz
    raw = np.frombuffer(blob, dtype=np.dtype(np_dtype).newbyteorder(endian), count=count,
                        offset=int(vox_offset))
    data = raw.reshape((nz, ny, nx)).astype(np.float32)  # x varies fastest on disk
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, spacing


def _load_volume_file(path: Path) -> tuple[np.ndarray, tuple[float, float, float]]:
    name = str(path)
    if name.endswith(".nii") or name.endswith(".nii.gz"):
        return read_nifti(path)
    return read_volume_raw(path)


_MANIFEST_RESERVED = {"labelmap", "class_label", "label_remap", "spacing"}


def load_study(manifest_path: Path) -> MultiModalStudy:
    """Load a study from a JSON manifest mapping modality name -> volume file.

    Reserved keys: ``labelmap`` (volume file of integer codes), ``class_label``
    (subtype name), ``label_remap`` (code translation table applied to the
    labelmap before validation).
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    base = manifest_path.parent

    unknown = set(manifest) - set(MODALITIES) - _MANIFEST_RESERVED
    if unknown:
        raise ValidationError(f"manifest contains unknown modality name(s): {sorted(unknown)}")

    volumes: dict[str, Volume] = {}
    for mod in MODALITIES:
        if mod not in manifest:
            continue
        data, spacing = _load_volume_file(base / manifest[mod])
        volumes[mod] = Volume(data, spacing)
    if not volumes:
        raise ValidationError(f"{manifest_path}: manifest lists no modalities")

    labelmap = None
    if "labelmap" in manifest:
        labelmap, _ = _load_volume_file(base / manifest["labelmap"])
        labelmap = np.rint(labelmap).astype(np.int16)
        if "label_remap" in manifest:
            remap = {int(k): int(v) for k, v in manifest["label_remap"].items()}
            out = labelmap.copy()
            for src, dst in remap.items():
                out[labelmap == src] = dst
            labelmap = out

    class_label = None
    if "class_label" in manifest:
        name = manifest["class_label"]
        if name not in CLASS_NAMES:
            raise ValidationError(f"unknown class label {name!r}, expected one of {CLASS_NAMES}")
        class_label = CLASS_NAMES.index(name)

    return MultiModalStudy(volumes, labelmap, class_label, meta={"manifest": str(manifest_path)})


def write_study(study: MultiModalStudy, out_dir: Path) -> Path:
    """Write a study in the interchange format; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest: dict = {}
    for mod, vol in study.volumes.items():
        fname = f"{mod}.raw"
        write_volume_raw(vol.data, out_dir / fname, vol.spacing)
        manifest[mod] = fname
    if study.labelmap is not None:
        write_volume_raw(study.labelmap.astype(np.int16), out_dir / "labelmap.raw")
        manifest["labelmap"] = "labelmap.raw"
    if study.class_label is not None:
        manifest["class_label"] = CLASS_NAMES[study.class_label]
    manifest_path = out_dir / "study.json"
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest_path


def study_for_model(
    study: MultiModalStudy,
    crop_dims: Optional[Sequence[int]] = None,
    scheme: str = "zscore_foreground",
) -> MultiModalStudy:
    """Standard model-input preparation: foreground crop then normalization."""
    if crop_dims is not None and tuple(crop_dims) != study.dims:
        study = foreground_crop_pad(study, crop_dims)
    return normalize_study(study, scheme)
