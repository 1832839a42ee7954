import struct

import numpy as np
import pytest
import torch

from micap.checkpoint import Checkpoint, decode_checkpoint, load_checkpoint, save_checkpoint
from micap.errors import (
    CheckpointVersionError,
    NotACheckpointError,
    PayloadLengthError,
    ShapeManifestError,
)
from micap.model import MICapModel

from conftest import tiny_config


@pytest.fixture
def ckpt(tiny_model):
    return Checkpoint.from_model(tiny_model, {"step": 0, "note": "unit"})


def test_save_load_save_is_byte_identical(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.metadata == {"step": 0, "note": "unit"}


def test_payload_is_eight_bytes_per_parameter(ckpt, tiny_model):
    data = ckpt.to_bytes()
    (meta_len,) = struct.unpack_from("<Q", data, 12)
    n = sum(p.numel() for p in tiny_model.parameters())
    assert len(data) - 12 - 8 - meta_len == 8 * n


def test_loaded_model_reproduces_outputs(ckpt, tiny_model, tiny_archive):
    torch.manual_seed(99)
    fresh = MICapModel(tiny_config(len(tiny_archive.vocab))).eval()
    decode_checkpoint(ckpt.to_bytes()).load_into(fresh)
    for (n, a), (_, b) in zip(tiny_model.named_parameters(), fresh.named_parameters()):
        assert torch.equal(a, b), n


def test_truncated_payload(ckpt):
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        decode_checkpoint(ckpt.to_bytes()[:-8])


def test_foreign_magic(ckpt):
    with pytest.raises(NotACheckpointError, match="not a checkpoint"):
        decode_checkpoint(b"PK\x03\x04" + ckpt.to_bytes()[4:])


def test_other_version(ckpt):
    data = ckpt.to_bytes()
    with pytest.raises(CheckpointVersionError):
        decode_checkpoint(b"MICAP-CKPT-2" + data[12:])


def test_shape_mismatch_on_load(ckpt, tiny_archive):
    other = MICapModel(tiny_config(len(tiny_archive.vocab), dim=8))
    with pytest.raises(ShapeManifestError):
        ckpt.load_into(other)


def test_empty_file(tmp_path):
    (tmp_path / "x").write_bytes(b"")
    with pytest.raises(NotACheckpointError):
        load_checkpoint(tmp_path / "x")


def test_little_endian_float64_payload():
    ck = Checkpoint({}, {"w": np.array([1.5, -2.0])})
    assert ck.to_bytes().endswith(struct.pack("<2d", 1.5, -2.0))
