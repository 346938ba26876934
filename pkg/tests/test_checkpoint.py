import struct

import numpy as np
import pytest

from mavnet.autodiff import OptimizerConfig
from mavnet.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from mavnet.data import generate_synthetic
from mavnet.model import Model, ModelConfig
from mavnet.train import RunConfig, train


def trained_model(steps=3):
    model = Model(ModelConfig.default(), seed=1)
    cfg = RunConfig(max_steps=steps, seed=2)
    train(model, generate_synthetic(0, 8), cfg)
    return model, cfg


def test_save_load_save_byte_identical(tmp_path):
    model, cfg = trained_model()
    a = save_checkpoint(tmp_path / "a.mavn", model, 3, cfg.optimizer, {"note": "x"})
    ckpt = load_checkpoint(a)
    b = ckpt.save(tmp_path / "b.mavn")
    assert a.read_bytes() == b.read_bytes()
    again = ckpt.to_model()
    for p, q in zip(model.parameters(), again.parameters()):
        assert p.name == q.name
        assert p.value.tobytes() == q.value.tobytes()
        assert p.adam_m.tobytes() == q.adam_m.tobytes() and p.adam_v.tobytes() == q.adam_v.tobytes()
        assert p.t == q.t == 3
    assert ckpt.step == 3 and ckpt.meta["note"] == "x"
    assert ckpt.optimizer == OptimizerConfig()


def test_header_layout(tmp_path):
    model = Model(ModelConfig.default())
    data = Checkpoint.from_model(model).to_bytes()
    assert data[:4] == b"MAVN"
    assert struct.unpack("<I", data[4:8])[0] == 1
    n = struct.unpack("<I", data[8:12])[0]
    assert data[12:12 + n].decode().startswith('{"blocks"')


def test_without_optimizer_state(tmp_path):
    model = Model(ModelConfig.default(num_classes=4))
    ckpt = Checkpoint.from_bytes(Checkpoint.from_model(model).to_bytes())
    assert ckpt.optimizer is None and ckpt.adam_state == {}
    assert ckpt.to_model().config.num_classes == 4


def test_rejects_bad_files(tmp_path):
    data = Checkpoint.from_model(Model(ModelConfig.default()), 0, OptimizerConfig()).to_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version 7"):
        Checkpoint.from_bytes(data[:4] + struct.pack("<I", 7) + data[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        Checkpoint.from_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(data + b"\0")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.mavn")


def test_rejects_mismatched_tensors():
    ckpt = Checkpoint.from_model(Model(ModelConfig.default()))
    name = next(iter(ckpt.tensors))
    ckpt.tensors[name] = np.zeros((1, 2), np.float32)
    with pytest.raises(CheckpointError, match="shape"):
        ckpt.to_model()
    del ckpt.tensors[name]
    with pytest.raises(CheckpointError, match="do not match"):
        ckpt.to_model()
