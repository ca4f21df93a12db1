import numpy as np
import pytest

from src.setup.exceptions import CheckpointError
from src.training_pipeline.checkpoints import (
    MAGIC, decode_tensors, encode_tensors, load_model, load_tensors, save_model, save_tensors
)


def test_model_checkpoint_round_trip(tmp_path, small_model, blobs):
    small_model.train().forward(blobs.features[:8])  # move the running statistics away from their defaults
    path = tmp_path / "model.ftck"
    save_model(path, small_model, meta={"client_id": 2})

    restored = load_model(path)
    assert restored.mode == "eval"
    assert restored.architecture() == small_model.architecture()
    for name, array in small_model.state_dict().items():
        np.testing.assert_array_equal(restored.state_dict()[name], array)

    _, meta = load_tensors(path)
    assert meta["client_id"] == 2


def test_file_layout_starts_with_magic_and_manifest_length():
    payload = encode_tensors({"x": np.array([1.0, 2.0], dtype=np.float32)})
    assert payload[:4] == MAGIC
    manifest_length = int.from_bytes(payload[4:8], "little")
    assert len(payload) == 8 + manifest_length + 2 * 4


def test_bad_magic_is_rejected():
    payload = b"NOPE" + encode_tensors({"x": np.zeros(2)})[4:]
    with pytest.raises(CheckpointError):
        decode_tensors(payload)


@pytest.mark.parametrize("cut", [3, 12, -1])
def test_truncated_files_are_rejected(cut):
    payload = encode_tensors({"x": np.zeros((2, 3))})
    with pytest.raises(CheckpointError):
        decode_tensors(payload[:cut])


def test_trailing_bytes_are_rejected():
    payload = encode_tensors({"x": np.zeros(3)})
    with pytest.raises(CheckpointError):
        decode_tensors(payload + b"\x00\x00\x00\x00")


def test_plain_tensor_files_are_not_models(tmp_path):
    path = tmp_path / "tensors.ftck"
    save_tensors(path, {"samples": np.ones((2, 2))})
    with pytest.raises(CheckpointError):
        load_model(path)
