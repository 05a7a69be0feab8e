import numpy as np
import pytest
import torch

from mmvmae.checkpoint import (
    load_container,
    load_state_dict_arrays,
    save_container,
    state_dict_arrays,
)
from mmvmae.errors import ValidationError


def test_container_roundtrip_bitexact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b/step": np.array([7], dtype=np.int64),
        "c/big": rng.standard_normal((2, 3, 4)).astype(np.float64),
    }
    path = tmp_path / "x.mmvc"
    save_container(path, arrays, config={"model": {"token_dim": 32}}, kind="multimodal",
                   extra={"epoch": 3})
    loaded, header = load_container(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype
    assert header["kind"] == "multimodal"
    assert header["config"]["model"]["token_dim"] == 32
    assert header["extra"]["epoch"] == 3


def test_container_deterministic_bytes(tmp_path):
    arrays = {"w": np.arange(12, dtype=np.float32).reshape(3, 4)}
    save_container(tmp_path / "a.mmvc", arrays, config={}, kind="k")
    save_container(tmp_path / "b.mmvc", arrays, config={}, kind="k")
    assert (tmp_path / "a.mmvc").read_bytes() == (tmp_path / "b.mmvc").read_bytes()


def test_container_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.mmvc"
    bad.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValidationError):
        load_container(bad)
    with pytest.raises(FileNotFoundError):
        load_container(tmp_path / "missing.mmvc")


def test_module_state_roundtrip(tmp_path):
    torch.manual_seed(0)
    a = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.LayerNorm(8))
    torch.manual_seed(99)
    b = torch.nn.Sequential(torch.nn.Linear(4, 8), torch.nn.LayerNorm(8))
    path = tmp_path / "m.mmvc"
    save_container(path, state_dict_arrays(a), config={}, kind="module")
    arrays, _ = load_container(path)
    load_state_dict_arrays(b, arrays)
    x = torch.randn(5, 4)
    assert torch.equal(a(x), b(x))


def test_state_load_rejects_mismatches(tmp_path):
    a = torch.nn.Linear(4, 8)
    path = tmp_path / "m.mmvc"
    save_container(path, state_dict_arrays(a), config={}, kind="module")
    arrays, _ = load_container(path)
    wrong = torch.nn.Linear(4, 9)
    with pytest.raises(ValidationError):
        load_state_dict_arrays(wrong, arrays)
    with pytest.raises(ValidationError):
        load_state_dict_arrays(torch.nn.Bilinear(2, 2, 2), arrays)
