import numpy as np
import pytest
import torch

from mmvmae.baseline import (
    BaselineConfig,
    BaselineMAE,
    baseline_synthesize,
    stack_patchify,
    stack_study_channels,
    stack_unpatchify,
    uniform_visible_count,
)
from mmvmae.decoders import DecoderConfig, MultiModalMAE
from mmvmae.downstream import (
    ClassificationModel,
    SegmentationModel,
    UNETRHead,
    dice_loss,
    warmup_cosine_lr,
)
from mmvmae.encoder import EncoderConfig
from mmvmae.errors import ValidationError
from mmvmae.masking import MaskConfig
from mmvmae.metrics import classification_report
from mmvmae.volume_io import MODALITIES, MultiModalStudy, PhantomConfig, generate_phantom, \
    study_for_model

TINY_ENC = dict(layers=2, token_dim=32, heads=4, mlp_ratio=2.0, patch_size=4,
                tap_layers=(1, 2))
TINY_BASE = BaselineConfig(decoder_layers=2, decoder_dim=24, decoder_heads=4,
                           decoder_mlp_ratio=2.0)


def _study(seed=0):
    return study_for_model(generate_phantom(PhantomConfig(dims=(16, 16, 16), patch_size=4,
                                                          seed=seed)))


def _baseline(seed=0):
    torch.manual_seed(seed)
    return BaselineMAE(EncoderConfig(**TINY_ENC), TINY_BASE)


def test_stack_orders_and_fills():
    study = _study()
    stacked = stack_study_channels(study)
    assert stacked.shape == (4, 16, 16, 16)
    for i, m in enumerate(MODALITIES):
        assert np.array_equal(stacked[i], study.volumes[m].data)

    dropped = stack_study_channels(study.without("t1"))
    assert not dropped[0].any()
    assert np.array_equal(dropped[1], study.volumes["t1c"].data)


def test_stack_patch_count_fixed_under_missing_modalities():
    study = _study()
    joint, grid = stack_patchify(stack_study_channels(study), 4)
    joint_dropped, grid_dropped = stack_patchify(
        stack_study_channels(study.without("fla")), 4
    )
    assert joint.shape == joint_dropped.shape == (64, 4 * 64)
    assert grid.grid_dims == grid_dropped.grid_dims


def test_stack_unpatchify_roundtrip():
    study = _study(1)
    stacked = stack_study_channels(study)
    joint, grid = stack_patchify(stacked, 4)
    assert np.array_equal(stack_unpatchify(joint, grid), stacked)


def test_uniform_visible_count_matches_stated_arithmetic():
    assert uniform_visible_count(990, 0.75) == 248  # round(0.25 * 990)
    assert uniform_visible_count(64, 0.75) == 16


def test_forward_covers_all_tokens_and_channels():
    model = _baseline()
    study = _study()
    stacked = stack_study_channels(study)
    visible, masked = model.sample_uniform_mask(64, np.random.default_rng(0))
    assert len(visible) == 16 and len(masked) == 48
    preds, targets, encoded = model.forward_stack(stacked, visible)
    assert preds.shape == targets.shape == (64, 4 * 64)
    assert len(encoded) == 16


def test_encoder_length_fixed_regardless_of_availability():
    model = _baseline()
    study = _study()
    full, _ = model.encode_for_downstream(study)
    dropped, _ = model.encode_for_downstream(study.without("t2"))
    assert len(full) == len(dropped) == 64


def test_masked_loss_protocol():
    model = _baseline()
    loss = model.masked_reconstruction_loss(_study(), np.random.default_rng(0), MaskConfig())
    assert torch.isfinite(loss)
    loss.backward()
    assert model.mask_token.grad is not None


def test_reconstruct_volumes_only_present_modalities():
    model = _baseline()
    study = _study().without("t1")
    loss, recons = model.reconstruct_volumes(study, np.random.default_rng(0), MaskConfig())
    assert set(recons) == {"t1c", "t2", "fla"}
    assert np.isfinite(loss)


def test_baseline_synthesize_dims_and_errors():
    model = _baseline()
    study = _study()
    vol = baseline_synthesize(study, "t2", model)
    assert vol.dims == study.dims
    single = MultiModalStudy({"t1": study.volumes["t1"]})
    with pytest.raises(ValidationError):
        baseline_synthesize(single, "t1", model)


def test_downstream_heads_attach_to_baseline():
    from mmvmae.downstream import SegHeadConfig, seg_forward

    model = SegmentationModel(
        _baseline(), SegHeadConfig(tap_layers=(1, 2), feature_size=4, window=(16, 16, 16))
    )
    study = _study()
    logits = seg_forward(study, model)
    assert logits.shape == (4, 16, 16, 16)

    cls = ClassificationModel(_baseline())
    assert cls.forward_study(study).shape == (3,)


def test_shared_code_paths_instrumented(monkeypatch):
    """Main model and baseline must flow through the same head, loss, metric
    and schedule implementations; only tokenization/masking/decoding differ."""
    from mmvmae.downstream import SegHeadConfig

    hits = {"head": set(), "dice": set(), "sched": set(), "report": set()}
    orig_head = UNETRHead.forward

    current = {"kind": None}

    def head_spy(self, taps, stacked):
        hits["head"].add(current["kind"])
        return orig_head(self, taps, stacked)

    monkeypatch.setattr(UNETRHead, "forward", head_spy)

    torch.manual_seed(0)
    mm = MultiModalMAE(EncoderConfig(**TINY_ENC), DecoderConfig(layers=1, token_dim=24, heads=4))
    study = _study()
    for backbone in (mm, _baseline()):
        current["kind"] = backbone.kind
        seg = SegmentationModel(backbone, SegHeadConfig(tap_layers=(1, 2), feature_size=4,
                                                        window=(16, 16, 16)))
        loss = dice_loss(seg.forward_study(study), study.labelmap)
        hits["dice"].add(backbone.kind)
        assert torch.isfinite(loss)
        warmup_cosine_lr(10, 1e-4)
        hits["sched"].add(backbone.kind)
        classification_report([0, 1, 2], [0, 1, 2])
        hits["report"].add(backbone.kind)

    assert hits["head"] == {"multimodal", "baseline"}
    assert hits["dice"] == {"multimodal", "baseline"}
