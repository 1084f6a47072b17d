import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_model_cfg
from scvc.checkpoint import (LoadReport, apply_checkpoint, decode, encode, load_checkpoint,
                             model_tensors, save_checkpoint)
from scvc.errors import (BadMagicError, CheckpointError, TruncatedCheckpointError,
                         VersionMismatchError)
from scvc.model import VoiceConverter
from scvc.training import parameter_digest


def test_header_layout():
    data = encode({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert data[:4] == b"VCDZ"
    assert struct.unpack("<II", data[4:12]) == (1, 1)
    assert struct.unpack("<I", data[12:16]) == (2,)
    assert data[16:18] == b"ab"
    assert data[18:20] == bytes([0, 2])
    assert struct.unpack("<QQ", data[20:36]) == (1, 2)
    assert np.frombuffer(data[36:], dtype="<f4").tolist() == [1.0, 2.0]


def test_scalar_tensor():
    out = decode(encode({"s": np.float32(3.5)}))
    assert out["s"].shape == () and out["s"] == 3.5


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=3),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.text(min_size=1, max_size=8))
def test_round_trip_is_bit_exact(arr, name):
    data = encode({name: arr})
    back = decode(data)[name]
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    assert encode({name: back}) == data


def test_bad_magic():
    with pytest.raises(BadMagicError):
        decode(b"XXXX" + bytes(8))


def test_version_mismatch():
    data = bytearray(encode({"a": np.zeros(2, np.float32)}))
    data[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError):
        decode(bytes(data))


def test_corrupted_length_field_is_truncation():
    data = bytearray(encode({"a": np.zeros(2, np.float32)}))
    data[12:16] = struct.pack("<I", 1000)
    with pytest.raises(TruncatedCheckpointError):
        decode(bytes(data))


@pytest.mark.parametrize("cut", [3, 10, 20, 30])
def test_truncated_files(cut):
    data = encode({"a": np.zeros((2, 3), np.float32)})
    with pytest.raises(CheckpointError):
        decode(data[:cut])


def test_unknown_dtype_and_trailing_bytes():
    data = bytearray(encode({"a": np.zeros(1, np.float32)}))
    with pytest.raises(CheckpointError):
        decode(bytes(data) + b"\0")
    data[17] = 7
    with pytest.raises(CheckpointError, match="dtype"):
        decode(bytes(data))


def test_model_save_load_save_is_byte_identical(tmp_path):
    model = VoiceConverter.build(tiny_model_cfg(), 1)
    model.trained_steps = 12
    save_checkpoint(tmp_path / "a.ckpt", model_tensors(model))
    other = VoiceConverter.build(tiny_model_cfg(), 2)
    report = apply_checkpoint(other, load_checkpoint(tmp_path / "a.ckpt"))
    assert report.initialized == ()
    assert other.trained_steps == 12
    save_checkpoint(tmp_path / "b.ckpt", model_tensors(other))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert parameter_digest(model) == parameter_digest(other)


def test_speaker_only_checkpoint_reports_initialized_groups(tmp_path):
    src = VoiceConverter.build(tiny_model_cfg(), 1)
    save_checkpoint(tmp_path / "spk.ckpt", model_tensors(src, ("speaker_encoder", "ge2e")))
    dst = VoiceConverter.build(tiny_model_cfg(), 2)
    init_decoder = parameter_digest(dst.decoder)
    report = apply_checkpoint(dst, load_checkpoint(tmp_path / "spk.ckpt"))
    assert report == LoadReport(("speaker_encoder", "ge2e"), ("content_encoder", "decoder"))
    assert "loaded groups: speaker_encoder, ge2e" in str(report)
    assert parameter_digest(dst.speaker_encoder) == parameter_digest(src.speaker_encoder)
    assert parameter_digest(dst.decoder) == init_decoder


def test_partial_group_and_shape_errors():
    model = VoiceConverter.build(tiny_model_cfg(), 0)
    tensors = {k: v.numpy() for k, v in model_tensors(model, ("decoder",)).items()}
    partial = dict(tensors)
    partial.pop(next(k for k in partial if k.startswith("decoder.")))
    with pytest.raises(CheckpointError, match="missing"):
        apply_checkpoint(model, partial)
    with pytest.raises(CheckpointError, match="unknown"):
        apply_checkpoint(model, {**tensors, "mystery.w": np.zeros(1, np.float32)})
    bigger = VoiceConverter.build(tiny_model_cfg(dec_channels=5), 0)
    with pytest.raises(CheckpointError, match="shape"):
        apply_checkpoint(bigger, tensors)


def test_float64_models_are_stored_as_float32():
    model = VoiceConverter.build(tiny_model_cfg(), 0).double()
    out = decode(encode(model_tensors(model)))
    assert all(v.dtype == np.float32 for v in out.values())
    ref = model.decoder.state_dict()["proj.weight"].float().numpy()
    assert np.array_equal(out["decoder.proj.weight"], ref)
    assert torch.is_tensor(model_tensors(model)["meta.trained_steps"])
