import numpy as np
import pytest
import torch

from mmvmae.decoders import (
    DecoderConfig,
    MultiModalMAE,
    build_queries,
    decode_modality,
    project_context,
    synthesize_modality,
    token_counts,
)
from mmvmae.encoder import EncodedSequence, EncoderConfig, OriginMap
from mmvmae.errors import ValidationError
from mmvmae.masking import MaskConfig, full_mask_plan, sample_mask_plan
from mmvmae.pretraining import reconstruction_loss
from mmvmae.tokenizer import grid_spec_for
from mmvmae.volume_io import MultiModalStudy, PhantomConfig, Volume, generate_phantom


def test_decoder_config_validation():
    with pytest.raises(ValidationError):
        DecoderConfig(layers=0)
    with pytest.raises(ValidationError):
        DecoderConfig(token_dim=25, heads=4)


def _plan_and_forward(model, volumes, counts_override=None):
    counts = token_counts((16, 16, 16), 4, list(volumes))
    rng = np.random.default_rng(0)
    plan = sample_mask_plan(rng, counts, MaskConfig(), visible_counts=counts_override)
    return plan, model.forward_study(volumes, plan)


def test_query_provenance_flags(tiny_model, tiny_volumes):
    model = tiny_model()
    volumes = tiny_volumes()
    counts = token_counts((16, 16, 16), 4, list(volumes))
    plan = full_mask_plan(counts, "t1")
    token_sets, _, grid = model.tokenize_study(volumes)
    encoded = model.encoder.encode_sets(token_sets, plan)

    q_masked = build_queries(model.decoders["t1"], "t1", plan, encoded, model.adapters, grid)
    assert q_masked.is_mask_token.all()
    assert q_masked.tokens.shape == (64, 24)

    q_visible = build_queries(model.decoders["t2"], "t2", plan, encoded, model.adapters, grid)
    assert not q_visible.is_mask_token.any()


def test_query_partition_arithmetic(tiny_model, tiny_volumes):
    model = tiny_model()
    volumes = tiny_volumes()
    counts = {"t1": 20, "t1c": 20, "t2": 12, "fla": 12}
    plan, (preds, targets, encoded) = _plan_and_forward(model, volumes, counts)
    grid = grid_spec_for((16, 16, 16), 4)
    q = build_queries(model.decoders["t1"], "t1", plan, encoded, model.adapters, grid)
    assert int((~q.is_mask_token).sum()) == 20
    assert int(q.is_mask_token.sum()) == 44


def test_decode_covers_all_patches(tiny_model, tiny_volumes):
    model = tiny_model()
    _, (preds, targets, _) = _plan_and_forward(model, tiny_volumes())
    for m in preds:
        assert preds[m].shape == (64, 64)  # 4^3 grid x 4^3 voxels
        assert targets[m].shape == (64, 64)


def test_decode_rejects_empty_context(tiny_model):
    model = tiny_model()
    grid = grid_spec_for((16, 16, 16), 4)
    from mmvmae.decoders import QuerySequence

    q = QuerySequence(torch.zeros(64, 24), np.ones(64, dtype=bool), grid)
    with pytest.raises(ValidationError):
        decode_modality(model.decoders["t1"], q, torch.zeros(0, 24))


def test_context_permutation_invariance(tiny_model, tiny_volumes):
    # shuffling the encoded context rows (with origins) leaves decode output
    # unchanged: cross-attention is permutation-invariant over keys/values
    model = tiny_model().double()
    volumes = {m: v.astype(np.float64) for m, v in tiny_volumes().items()}
    counts = token_counts((16, 16, 16), 4, list(volumes))
    plan = sample_mask_plan(np.random.default_rng(3), counts, MaskConfig())
    token_sets, _, grid = model.tokenize_study(volumes)
    encoded = model.encoder.encode_sets(token_sets, plan)

    decoder = model.decoders["fla"]
    ctx = project_context(decoder, encoded)
    q = build_queries(decoder, "fla", plan, encoded, model.adapters, grid, ctx)
    base = decode_modality(decoder, q, ctx)

    perm = np.random.default_rng(4).permutation(len(encoded))
    shuffled = EncodedSequence(
        tokens=encoded.tokens[torch.from_numpy(perm).long()],
        cls=encoded.cls,
        origin=OriginMap(encoded.origin.modality_ids[perm], encoded.origin.coords[perm],
                         encoded.origin.counts),
        taps=encoded.taps,
    )
    ctx2 = project_context(decoder, shuffled)
    q2 = build_queries(decoder, "fla", plan, shuffled, model.adapters, grid, ctx2)
    out = decode_modality(decoder, q2, ctx2)
    assert torch.allclose(out, base, atol=1e-9)


def test_mask_token_receives_gradient(tiny_model, tiny_volumes):
    model = tiny_model()
    plan, (preds, targets, _) = _plan_and_forward(model, tiny_volumes())
    loss = reconstruction_loss(preds, targets)
    loss.backward()
    for m in plan.visible:
        grad = model.decoders[m].mask_token.grad
        if len(plan.masked[m]):
            assert grad is not None and grad.abs().sum() > 0


def test_decoder_independence(tiny_model, tiny_volumes):
    # modality A's decoder gets zero gradient from modality B's term
    model = tiny_model()
    _, (preds, targets, _) = _plan_and_forward(model, tiny_volumes())
    loss = ((preds["t2"] - targets["t2"]) ** 2).mean()
    loss.backward()
    for name, p in model.decoders["t1"].named_parameters():
        assert p.grad is None or not p.grad.abs().sum(), name
    assert any(p.grad is not None and p.grad.abs().sum() > 0
               for p in model.decoders["t2"].parameters())


def test_origin_mismatch_rejected(tiny_model, tiny_volumes):
    model = tiny_model()
    volumes = tiny_volumes()
    counts = token_counts((16, 16, 16), 4, list(volumes))
    rng = np.random.default_rng(5)
    plan = sample_mask_plan(rng, counts, MaskConfig())
    other_plan = sample_mask_plan(rng, counts, MaskConfig())
    token_sets, _, grid = model.tokenize_study(volumes)
    encoded = model.encoder.encode_sets(token_sets, plan)
    with pytest.raises(ValidationError):
        build_queries(model.decoders["t1"], "t1", other_plan, encoded, model.adapters, grid)


def test_synthesize_output_dims(tiny_model):
    model = tiny_model()
    study = generate_phantom(PhantomConfig(dims=(16, 16, 16), patch_size=4, seed=2))
    vol = synthesize_modality(study, "fla", model)
    assert vol.dims == study.dims
    assert np.isfinite(vol.data).all()


def test_synthesize_without_context_errors(tiny_model):
    model = tiny_model()
    data = np.ones((16, 16, 16), dtype=np.float32)
    study = MultiModalStudy({"t1": Volume(data)})
    with pytest.raises(ValidationError):
        synthesize_modality(study, "t1", model)
