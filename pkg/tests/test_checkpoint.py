import numpy as np
import pytest

from segatt import checkpoint
from segatt.length import StaticLengthTable
from segatt.model import SegmentalModel
from conftest import small_config


def test_round_trip_with_static_and_extras(tmp_path):
    model = SegmentalModel.init(small_config(), 3)
    model.static_table = StaticLengthTable(np.array([1.0, 2.0, 3.5, 4.0]), 7)
    extra = {"opt.m.out.b2": np.arange(4.0)}
    checkpoint.save(tmp_path / "m.ckpt", model, {"epoch": 2}, extra)
    back, meta, arrays = checkpoint.load(tmp_path / "m.ckpt")
    assert back.config == model.config
    assert meta == {"epoch": 2}
    assert np.array_equal(arrays["opt.m.out.b2"], extra["opt.m.out.b2"])
    assert np.array_equal(back.static_table.mu, model.static_table.mu)
    assert back.static_table.delta_max == 7
    for name, p in model.params.items():
        assert np.array_equal(p.data, back.params[name].data)
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_bytes_are_deterministic():
    model = SegmentalModel.init(small_config(), 1)
    assert checkpoint.dumps(model, {"a": 1}) == checkpoint.dumps(model.clone(), {"a": 1})


def test_corruption_and_garbage_rejected():
    blob = checkpoint.dumps(SegmentalModel.init(small_config(), 0))
    for pos in (10, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(checkpoint.ChecksumError):
            checkpoint.loads(bytes(bad))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"not a checkpoint at all, clearly" * 2)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-40])
