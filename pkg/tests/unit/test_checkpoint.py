"""
Unit tests for the checkpoint file format
"""

import struct

import numpy as np
import pytest

from checkpoint import MAGIC, CheckpointFormatError, load_checkpoint, save_checkpoint


class TestCheckpoint:
    """Binary parameter files"""

    def test_arrays_are_bit_exact(self, tmp_path, rng):
        arrays = {
            "decoder.0.weight": rng.standard_normal((3, 4)),
            "decoder.0.bias": np.array([np.pi, -0.0, 1e-310]),
            "decoder.scale_raw": np.array([[0.5]]),
        }
        path = save_checkpoint(tmp_path / "epoch_0001.ckpt", arrays, {"epoch": 1, "train": {"seed": 3}})
        loaded, meta = load_checkpoint(path)
        assert list(loaded) == list(arrays)
        for name, array in arrays.items():
            assert loaded[name].shape == array.shape
            assert loaded[name].tobytes() == array.astype("<f8").tobytes()
        assert meta == {"epoch": 1, "train": {"seed": 3}}

    def test_header_layout(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(2)})
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        (length,) = struct.unpack_from("<Q", raw, 8)
        assert len(raw) == 16 + length + 16

    def test_no_temporary_file_left(self, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(2)})
        assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]

    def test_bad_magic(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(2)})
        raw = bytearray(path.read_bytes())
        raw[:8] = b"NOTACKPT"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(MAGIC[:4])
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_checkpoint(tmp_path / "absent.ckpt")
