"""
Reading and writing .ftck files.

Layout of a file:

    b"FTCK" | manifest length (uint32, little-endian) | manifest (UTF-8 JSON) | float32 blob (little-endian)

The manifest is {"tensors": [{"name": ..., "shape": [...]}, ...], "meta": {...}} and the
blob holds the tensors back to back in manifest order.
"""
import json
import struct
from pathlib import Path

import numpy as np
from loguru import logger

from src.setup.exceptions import CheckpointError
from src.training_pipeline.models import BnMlpModel


MAGIC = b"FTCK"
_HEADER = struct.Struct("<4sI")
_BLOB_DTYPE = np.dtype("<f4")


def encode_tensors(tensors: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    manifest = {
        "tensors": [{"name": name, "shape": [int(size) for size in np.shape(array)]} for name, array in tensors.items()],
        "meta": meta or {}
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(array, dtype=_BLOB_DTYPE).tobytes() for array in tensors.values())
    return _HEADER.pack(MAGIC, len(manifest_bytes)) + manifest_bytes + blob


def decode_tensors(payload: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    """
    Parse the bytes of a .ftck file.

    Raises:
        CheckpointError: on a bad magic number, an unreadable manifest, or a blob whose
                         length disagrees with the manifest.
    """
    if len(payload) < _HEADER.size:
        raise CheckpointError(f"{source} is too short to be a checkpoint")

    magic, manifest_length = _HEADER.unpack_from(payload)
    if magic != MAGIC:
        raise CheckpointError(f"{source} does not start with the checkpoint magic bytes")

    manifest_end = _HEADER.size + manifest_length
    if manifest_end > len(payload):
        raise CheckpointError(f"{source} is truncated inside its manifest")

    try:
        manifest = json.loads(payload[_HEADER.size: manifest_end].decode("utf-8"))
        entries = [(str(entry["name"]), tuple(int(size) for size in entry["shape"])) for entry in manifest["tensors"]]
        meta = dict(manifest.get("meta", {}))
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"{source} has an unreadable manifest: {error}") from error

    counts = [int(np.prod(shape, dtype=np.int64)) for _, shape in entries]
    expected_length = manifest_end + sum(counts) * _BLOB_DTYPE.itemsize
    if len(payload) != expected_length:
        raise CheckpointError(f"{source} holds {len(payload)} bytes, but its manifest describes {expected_length}")

    values = np.frombuffer(payload, dtype=_BLOB_DTYPE, offset=manifest_end)
    tensors = {}
    offset = 0
    for (name, shape), count in zip(entries, counts):
        tensors[name] = values[offset: offset + count].astype(np.float32).reshape(shape)
        offset += count

    return tensors, meta


def save_tensors(path: Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(tensors, meta=meta))
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")


def load_tensors(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    return decode_tensors(path.read_bytes(), source=str(path))


def save_model(path: Path, model: BnMlpModel, meta: dict | None = None) -> None:
    """
    Save the parameters and running statistics of a model along with its architecture,
    which is all that is needed to rebuild it.
    """
    full_meta = {**(meta or {}), "architecture": model.architecture(), "kind": "bn_mlp"}
    save_tensors(path, tensors=model.state_dict(), meta=full_meta)


def load_model(path: Path) -> BnMlpModel:
    """
    Rebuild a model from a .ftck checkpoint. The model comes back in eval mode.

    Raises:
        CheckpointError: if the file is corrupt or is not a model checkpoint.
    """
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "bn_mlp" or "architecture" not in meta:
        raise CheckpointError(f"{path} is not a model checkpoint")

    try:
        return BnMlpModel.from_state_dict(architecture=meta["architecture"], state=tensors)
    except (KeyError, TypeError, ValueError) as error:
        raise CheckpointError(f"{path} does not describe a usable model: {error}") from error
