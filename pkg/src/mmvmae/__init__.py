"""Multi-modal masked-autoencoder library for 3D volumetric studies."""

from .volume_io import (
    CLASS_NAMES,
    MODALITIES,
    MultiModalStudy,
    PhantomConfig,
    Volume,
    foreground_crop_pad,
    generate_phantom,
    load_study,
    normalize_modality,
    write_study,
)

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "MODALITIES",
    "MultiModalStudy",
    "PhantomConfig",
    "Volume",
    "foreground_crop_pad",
    "generate_phantom",
    "load_study",
    "normalize_modality",
    "write_study",
    "__version__",
]
