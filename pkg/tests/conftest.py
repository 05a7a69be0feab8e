import numpy as np
import pytest
import torch

from mmvmae.decoders import DecoderConfig, MultiModalMAE
from mmvmae.encoder import EncoderConfig
from mmvmae.pretraining import configure_determinism
from mmvmae.volume_io import PhantomConfig, generate_phantom, study_for_model


def pytest_configure(config):
    # bit-stable kernels for every test in the session
    configure_determinism(0, deterministic=True)


TINY_ENC = dict(layers=2, token_dim=32, heads=4, mlp_ratio=2.0, patch_size=4, tap_layers=(1, 2))
TINY_DEC = dict(layers=2, token_dim=24, heads=4, mlp_ratio=2.0)


@pytest.fixture
def tiny_model():
    """Fresh tiny multi-modal MAE (16^3 volumes, 4^3 patches) per test."""

    def build(seed: int = 0, **enc_overrides) -> MultiModalMAE:
        torch.manual_seed(seed)
        enc = EncoderConfig(**{**TINY_ENC, **enc_overrides})
        return MultiModalMAE(enc, DecoderConfig(**TINY_DEC))

    return build


@pytest.fixture
def tiny_volumes():
    """Four random 16^3 modality volumes keyed by registry name."""

    def build(seed: int = 0, dims=(16, 16, 16)) -> dict:
        rng = np.random.default_rng(seed)
        return {
            m: rng.standard_normal(dims).astype(np.float32)
            for m in ("t1", "t1c", "t2", "fla")
        }

    return build


@pytest.fixture(scope="session")
def prepared_phantoms():
    """Small prepared studies (32^3, patch 8), cached for the session."""
    cache: dict = {}

    def build(seed: int):
        if seed not in cache:
            study = generate_phantom(PhantomConfig(dims=(32, 32, 32), patch_size=8, seed=seed))
            cache[seed] = study_for_model(study)
        return cache[seed]

    return build
