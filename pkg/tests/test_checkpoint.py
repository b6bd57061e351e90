import struct
import zlib

import numpy as np
import pytest

from atcn.checkpoint import (
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from atcn.errors import CheckpointError
from atcn.model import ModelConfig, build
from atcn.train import Ranger, TrainConfig


def model_and_optimizer():
    model = build(ModelConfig(channels=8, groups=2, reduction=4, seed=4))
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data += rng.normal(0, 0.01, p.shape)
    model.set_buffers({k: v + rng.uniform(0.1, 1.0, v.shape) for k, v in model.buffers().items()})
    opt = Ranger(model.parameters(), TrainConfig())
    for p in model.parameters():
        p.grad[...] = rng.normal(size=p.shape)
    opt.step(1e-3)
    return model, opt


def _reseal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_roundtrip_is_bitwise(tmp_path):
    model, opt = model_and_optimizer()
    cfg = TrainConfig(epochs=9)
    curve = [{"epoch": 0, "train_loss_mm": 1.5, "val_mpjpe_mm": 2.5, "lr": 1e-3}]
    save_checkpoint(model, tmp_path / "m.atcn", optimizer=opt, epoch=1, train_config=cfg, curve=curve)
    state = load_checkpoint(tmp_path / "m.atcn")
    loaded = state["model"]
    for a, b in zip(model.parameters(), loaded.parameters()):
        assert a.name == b.name and a.data.tobytes() == b.data.tobytes()
    for k, v in model.buffers().items():
        assert loaded.buffers()[k].tobytes() == v.tobytes()
    assert state["epoch"] == 1 and state["step_count"] == 1 and state["curve"] == curve
    assert TrainConfig.from_dict(state["train_config"]) == cfg
    for k, v in opt.state_arrays().items():
        assert state["optimizer"][k].tobytes() == v.tobytes()
    # saving what was loaded reproduces the file exactly
    opt2 = Ranger(loaded.parameters(), cfg)
    opt2.load_state(state["optimizer"], state["step_count"])
    save_checkpoint(loaded, tmp_path / "again.atcn", optimizer=opt2, epoch=1, train_config=cfg, curve=curve)
    assert (tmp_path / "again.atcn").read_bytes() == (tmp_path / "m.atcn").read_bytes()


def test_loaded_model_predicts_identically(tmp_path):
    model, _ = model_and_optimizer()
    save_checkpoint(model, tmp_path / "m.atcn")
    window = np.random.default_rng(1).uniform(-0.5, 0.5, (27, 17, 2))
    assert load_checkpoint(tmp_path / "m.atcn")["model"].forward(window).tobytes() == model.forward(window).tobytes()


def test_encoding_is_deterministic():
    model, opt = model_and_optimizer()
    assert encode_checkpoint(model, opt) == encode_checkpoint(model, opt)
    assert encode_checkpoint(model).startswith(MAGIC)


@pytest.mark.parametrize("offset", [0, 7, 40, -100, -1])
def test_any_flipped_byte_is_rejected(offset):
    data = bytearray(encode_checkpoint(model_and_optimizer()[0]))
    data[offset] ^= 0x01
    with pytest.raises(CheckpointError):
        decode_checkpoint(bytes(data))


def test_corrupted_file_is_rejected(tmp_path):
    save_checkpoint(model_and_optimizer()[0], tmp_path / "m.atcn")
    raw = bytearray((tmp_path / "m.atcn").read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    (tmp_path / "m.atcn").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "m.atcn")


@pytest.mark.parametrize("keep", [0, 4, 16, 1000])
def test_truncation_is_rejected(keep):
    data = encode_checkpoint(model_and_optimizer()[0])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:keep])


def test_bad_magic_is_rejected():
    data = encode_checkpoint(model_and_optimizer()[0])
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(_reseal(b"ATCN2" + data[5:-4]))


def test_unknown_version_is_rejected():
    body = encode_checkpoint(model_and_optimizer()[0])[:-4]
    body = body.replace(b'"format":"ATCN1"', b'"format":"ATCN9"')
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(_reseal(body))


def test_missing_parameter_is_rejected(tmp_path):
    model, _ = model_and_optimizer()
    data = encode_checkpoint(model)
    body = data[:-4].replace(b"bottom.w", b"bottom.q")
    (tmp_path / "m.atcn").write_bytes(_reseal(body))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "m.atcn")


def test_atomic_save_leaves_no_temp_files(tmp_path):
    model, _ = model_and_optimizer()
    for _ in range(3):
        save_checkpoint(model, tmp_path / "m.atcn")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["m.atcn"]
