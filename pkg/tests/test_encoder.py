import numpy as np
import pytest
import torch

from mmvmae.encoder import EncoderConfig, SharedEncoder, assemble_input
from mmvmae.errors import ValidationError
from mmvmae.masking import full_mask_plan, no_mask_plan, sample_mask_plan
from mmvmae.tokenizer import ModalityAdapters, TokenSet, grid_coords, grid_spec_for


def _token_sets(n_per_mod=990, dim=12, mods=("t1", "t1c", "t2", "fla"), seed=0,
                grid_dims=(10, 11, 9)):
    rng = np.random.default_rng(seed)
    grid = grid_spec_for(tuple(g * 2 for g in grid_dims), 2)
    assert grid.patches_per_modality == n_per_mod
    coords = grid_coords(grid.grid_dims)
    return {
        m: TokenSet(
            m,
            torch.from_numpy(rng.standard_normal((n_per_mod, dim)).astype(np.float32)),
            coords,
            grid,
        )
        for m in mods
    }


def test_config_head_divisibility():
    with pytest.raises(ValidationError):
        EncoderConfig(token_dim=30, heads=4)
    with pytest.raises(ValidationError):
        EncoderConfig(layers=2, tap_layers=(3,))


def test_assemble_paper_arithmetic():
    sets = _token_sets()
    plan = sample_mask_plan(np.random.default_rng(0), {m: 990 for m in sets})
    tokens, origin = assemble_input(sets, plan)
    assert tokens.shape[0] == 990  # 25% of 3960 visible; CLS is the encoder's
    assert len(origin) == 990
    assert sum(origin.counts.values()) == 990


def test_assemble_missing_modality_excluded():
    sets = _token_sets(mods=("t1c", "t2", "fla"))
    plan = no_mask_plan({m: 990 for m in sets})
    tokens, origin = assemble_input(sets, plan)
    assert tokens.shape[0] == 3 * 990


def test_assemble_fully_masked_modality_empty_but_tracked():
    sets = _token_sets(n_per_mod=8, grid_dims=(2, 2, 2))
    plan = full_mask_plan({m: 8 for m in sets}, "t2")
    tokens, origin = assemble_input(sets, plan)
    assert tokens.shape[0] == 3 * 8
    assert origin.counts["t2"] == 0
    assert len(origin.positions_of("t2")) == 0


def test_assemble_plan_mismatch_errors():
    sets = _token_sets(n_per_mod=8, grid_dims=(2, 2, 2))
    plan = no_mask_plan({"t1": 8})  # plan misses three present modalities
    with pytest.raises(ValidationError):
        assemble_input(sets, plan)


def test_encode_shape_and_taps():
    torch.manual_seed(0)
    cfg = EncoderConfig(layers=3, token_dim=24, heads=4, mlp_ratio=2.0,
                        patch_size=4, tap_layers=(1, 3))
    enc = SharedEncoder(cfg)
    sets = _token_sets(n_per_mod=8, dim=24, grid_dims=(2, 2, 2))
    plan = sample_mask_plan(np.random.default_rng(1), {m: 8 for m in sets})
    out = enc.encode_sets(sets, plan)
    assert len(out) == plan.total_visible
    assert set(out.taps) == {1, 3}
    assert all(t.shape[0] == len(out) + 1 for t in out.taps.values())
    assert out.cls.shape == (24,)


def test_encode_rejects_empty():
    torch.manual_seed(0)
    enc = SharedEncoder(EncoderConfig(layers=1, token_dim=24, heads=4, tap_layers=(1,)))
    from mmvmae.encoder import OriginMap

    with pytest.raises(ValidationError):
        enc.encode(torch.zeros(0, 24), OriginMap(np.zeros(0, dtype=int), np.zeros((0, 3))))


def test_token_permutation_equivariance():
    # permuting two same-modality tokens (embeddings attached) permutes the
    # outputs identically: attention has no positional bias of its own
    torch.manual_seed(0)
    cfg = EncoderConfig(layers=2, token_dim=32, heads=4, mlp_ratio=2.0,
                        patch_size=4, tap_layers=(1, 2))
    enc = SharedEncoder(cfg).double()
    rng = np.random.default_rng(2)
    tokens = torch.from_numpy(rng.standard_normal((10, 32)))
    from mmvmae.encoder import OriginMap

    coords = grid_coords((10, 1, 1))
    origin = OriginMap(np.zeros(10, dtype=int), coords)
    base = enc.encode(tokens, origin)

    perm = list(range(10))
    perm[2], perm[7] = perm[7], perm[2]
    swapped = enc.encode(tokens[perm], OriginMap(np.zeros(10, dtype=int), coords[perm]))
    assert torch.allclose(swapped.tokens, base.tokens[perm], atol=1e-12)
    assert torch.allclose(swapped.cls, base.cls, atol=1e-12)


def test_forward_is_deterministic_and_batch_independent():
    torch.manual_seed(0)
    cfg = EncoderConfig(layers=2, token_dim=24, heads=4, tap_layers=(2,))
    enc = SharedEncoder(cfg)
    sets = _token_sets(n_per_mod=8, dim=24, grid_dims=(2, 2, 2))
    plan = no_mask_plan({m: 8 for m in sets})
    a = enc.encode_sets(sets, plan)
    b = enc.encode_sets(sets, plan)  # same item forwarded again
    assert torch.equal(a.tokens, b.tokens)
    assert torch.equal(a.cls, b.cls)
