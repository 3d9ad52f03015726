import struct

import numpy as np
import pytest

from dvoxres.checkpoint import MAGIC, load_checkpoint, read_checkpoint, save_checkpoint, transfer_weights
from dvoxres.errors import FormatError, TransferError
from dvoxres.model import ModelConfig, build_model

SMALL = (2, 3, 3, 4, 4, 5)


@pytest.fixture
def trained(tmp_path):
    m = build_model(ModelConfig(widths=SMALL, deform_conv_idx={4}, seed=9))
    rng = np.random.default_rng(0)
    for p in m.parameters(trainable_only=False):
        p.data[...] = rng.normal(size=p.data.shape)
    return m


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_round_trip_bitwise(tmp_path, dtype):
    m = build_model(ModelConfig(widths=SMALL, deform_voxres_idx={2}), dtype=dtype)
    m.forward(np.random.default_rng(1).normal(size=(2, 1, 8, 8, 8)), "train")  # move running stats
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, optimizer_state={"optim.m.conv1.weight": np.ones(3)}, metadata={"epoch": 4, "seed": 1})
    back = load_checkpoint(path)
    assert back.config == m.config
    a, b = m.named_tensors(), back.named_tensors()
    assert a.keys() == b.keys()
    for name in a:
        assert a[name].data.dtype == b[name].data.dtype
        assert a[name].data.tobytes() == b[name].data.tobytes()
        assert a[name].trainable == b[name].trainable
    ck = read_checkpoint(path)
    assert ck.metadata == {"epoch": 4, "seed": 1}
    assert np.array_equal(ck.optimizer_state["optim.m.conv1.weight"], np.ones(3))


def test_transfer_into_superset_preserves_logits(tmp_path, trained):
    src = build_model(ModelConfig(widths=SMALL, seed=2), dtype="f64")
    rng = np.random.default_rng(5)
    for p in src.parameters(trainable_only=False):
        p.data[...] = np.abs(rng.normal(size=p.data.shape)) if "running_var" in p.name else rng.normal(size=p.data.shape)
    path = tmp_path / "src.ckpt"
    save_checkpoint(src, path)
    target = load_checkpoint(path, ModelConfig(widths=SMALL, deform_conv_idx={4}, deform_voxres_idx={2}))
    assert sorted(target.offset_predictors()) == ["conv4.offset", "voxres2.conv1.offset", "voxres2.conv2.offset"]
    x = rng.normal(size=(3, 1, 12, 12, 12))
    assert np.array_equal(src.forward(x, "eval"), target.forward(x, "eval"))


def test_transfer_from_deformable_into_regular_ignores_offsets(tmp_path, trained):
    path = tmp_path / "d.ckpt"
    save_checkpoint(trained, path)
    m = load_checkpoint(path, ModelConfig(widths=SMALL))
    assert m.offset_predictors() == []
    assert np.array_equal(m.named_tensors()["conv4.weight"].data, trained.named_tensors()["conv4.weight"].data)


def test_transfer_shape_conflict_lists_name(trained):
    src = {n: p.data for n, p in trained.named_tensors().items()}
    src["conv2.weight"] = np.zeros((1, 1, 1, 1, 1), np.float32)
    with pytest.raises(TransferError, match="conv2.weight"):
        transfer_weights(src, build_model(ModelConfig(widths=SMALL)))


def test_transfer_missing_base_tensor(trained):
    src = {n: p.data for n, p in trained.named_tensors().items() if n != "head.bias"}
    with pytest.raises(TransferError, match="head.bias"):
        transfer_weights(src, build_model(ModelConfig(widths=SMALL)))


def test_bad_magic_version_and_checksum(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained, path)
    raw = bytearray(path.read_bytes())

    bad = bytearray(raw)
    bad[0:8] = b"NOTACKPT"
    (tmp_path / "magic.ckpt").write_bytes(bad)
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    bad = bytearray(raw)
    bad[8:12] = struct.pack("<I", 99)
    (tmp_path / "ver.ckpt").write_bytes(bad)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "ver.ckpt")

    bad = bytearray(raw)
    bad[len(bad) // 2] ^= 0xFF
    (tmp_path / "crc.ckpt").write_bytes(bad)
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "crc.ckpt")

    (tmp_path / "short.ckpt").write_bytes(raw[:40])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.ckpt")
    assert raw.startswith(MAGIC)


def test_save_is_atomic_overwrite(tmp_path, trained):
    path = tmp_path / "m.ckpt"
    save_checkpoint(trained, path)
    first = path.read_bytes()
    save_checkpoint(trained, path)
    assert path.read_bytes() == first
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
