import os
import sys

ROOT = os.path.dirname(os.path.dirname(__file__))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

import struct

import numpy as np
import pytest

from topodispatch.checkpoint import MAGIC, read_tensors, write_tensors
from topodispatch.errors import CheckpointError


def _sample():
    return {
        "actor/w": np.arange(6, dtype=np.float64).reshape(2, 3) / 7.0,
        "actor/b": np.array([1e-300, -0.0, np.pi]),
        "meta": np.array(3.5),
        "empty": np.zeros((0, 4)),
    }


def test_tensors_survive_bit_exact(tmp_path):
    path = write_tensors(tmp_path / "t.bin", _sample())
    back = read_tensors(path)
    assert list(back) == list(_sample())
    for name, value in _sample().items():
        assert back[name].shape == value.shape
        assert back[name].tobytes() == value.tobytes()
    assert not (tmp_path / "t.bin.tmp").exists()


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"PK\x03\x04rest")
    with pytest.raises(CheckpointError):
        read_tensors(path)
    with pytest.raises(CheckpointError):
        read_tensors(tmp_path / "absent.bin")


def test_rejects_newer_format(tmp_path):
    path = tmp_path / "v.bin"
    path.write_bytes(MAGIC + struct.pack("<II", 99, 0))
    with pytest.raises(CheckpointError, match="version 99"):
        read_tensors(path)


def test_rejects_truncation_and_trailing_bytes(tmp_path):
    data = write_tensors(tmp_path / "t.bin", _sample()).read_bytes()
    cut = tmp_path / "cut.bin"
    cut.write_bytes(data[:-5])
    with pytest.raises(CheckpointError):
        read_tensors(cut)
    padded = tmp_path / "pad.bin"
    padded.write_bytes(data + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        read_tensors(padded)
