"""Flat tensor container: a text manifest plus one raw little-endian float32 blob.

Every stored array is widened to float32 in the blob; the manifest keeps the
logical dtype so uint8 payloads (byte strings) and small int64 counters restore
bit-exactly. Round-tripping float32 model weights is the common case and is
exact by construction.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "tensors.bin"
_FORMAT_TAG = "tensor-container 1"
_DTYPES = {"float32": np.float32, "int64": np.int64, "uint8": np.uint8}


class CheckpointError(RuntimeError):
    """Manifest or blob is missing, malformed, or inconsistent."""


def _as_array(value) -> np.ndarray:
    if torch.is_tensor(value):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        arr = arr.astype(np.float32)
    if arr.dtype.name not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {arr.dtype.name}; use float32, int64 or uint8")
    return arr


def save_tensors(directory, tensors: Mapping[str, "np.ndarray | torch.Tensor"]) -> None:
    """Write all named arrays to `directory` (created if needed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [_FORMAT_TAG]
    blob = bytearray()
    for name in sorted(tensors):
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name may not contain whitespace: {name!r}")
        arr = _as_array(tensors[name])
        widened = arr.astype("<f4")
        if arr.dtype != np.float32 and not np.array_equal(widened.astype(arr.dtype), arr):
            raise CheckpointError(f"{name}: values not exactly representable in float32")
        shape = "()" if arr.ndim == 0 else ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{arr.dtype.name}\t{shape}\t{len(blob)}")
        blob.extend(widened.tobytes())
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(directory / BLOB_NAME, "wb") as fh:
        fh.write(bytes(blob))


def _parse_shape(field: str) -> tuple[int, ...]:
    if field == "()":
        return ()
    try:
        return tuple(int(part) for part in field.split(","))
    except ValueError as exc:
        raise CheckpointError(f"bad shape field {field!r}") from exc


def load_tensors(directory) -> dict[str, torch.Tensor]:
    """Read a container back into name -> torch tensor (logical dtypes restored)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _FORMAT_TAG:
        raise CheckpointError(f"manifest format not recognized in {manifest_path}")
    try:
        blob = (directory / BLOB_NAME).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"missing tensor blob: {directory / BLOB_NAME}") from exc

    out: dict[str, torch.Tensor] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise CheckpointError(f"manifest line {lineno}: expected 4 tab-separated fields")
        name, dtype_name, shape_field, offset_field = parts
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"manifest line {lineno}: unknown dtype {dtype_name!r}")
        shape = _parse_shape(shape_field)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        offset = int(offset_field)
        end = offset + 4 * count
        if offset < 0 or end > len(blob):
            raise CheckpointError(f"manifest line {lineno}: blob range [{offset}, {end}) out of bounds")
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arr = flat.reshape(shape).astype(_DTYPES[dtype_name])
        out[name] = torch.from_numpy(arr.copy())
    return out


def bytes_to_array(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype=np.uint8).copy()


def array_to_bytes(arr) -> bytes:
    return bytes(bytearray(np.asarray(arr, dtype=np.uint8)))


def module_digest(module: torch.nn.Module) -> str:
    """Hash of all parameters and buffers; equal iff bit-identical."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def checkpoint_exists(directory) -> bool:
    directory = Path(directory)
    return os.path.isfile(directory / MANIFEST_NAME) and os.path.isfile(directory / BLOB_NAME)
