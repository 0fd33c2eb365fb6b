#  Licensed under the Apache License, Version 2.0 (the "License");
#  you may not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#       http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing, software
#  distributed under the License is distributed on an "AS IS" BASIS,
#  WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
#  See the License for the specific language governing permissions and
#  limitations under the License.

"""Binary file formats.

TensorContainer (``.cvt``)::

    b"CVT1" | u32 LE header length | UTF-8 JSON header | row-major payload

    header = {"dtype": "f32le" | "u8", "shape": [...], "axes": [...],
              "meta": {...}, "normalization": {...}}

Checkpoint (``.cvc``)::

    b"CVC1" | u32 LE manifest length | UTF-8 JSON manifest | containers...

    manifest = {"config": {...}, "step": int, "extra": {...},
                "tensors": {name: {"offset": int, "length": int}}}

Offsets are relative to the first byte after the manifest. JSON is written
with sorted keys so identical content gives identical bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from heart_models.errors import ContainerFormatError

logger = logging.getLogger(__name__)

CONTAINER_MAGIC = b"CVT1"
CHECKPOINT_MAGIC = b"CVC1"
_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}
_LENGTH = struct.Struct("<I")


def _dtype_code(array: np.ndarray) -> str:
    if array.dtype == np.uint8:
        return "u8"
    if array.dtype.kind == "f":
        return "f32le"
    raise ContainerFormatError(f"Unsupported array dtype {array.dtype}; containers hold float32 or uint8.")


def _canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_container(
    array: np.ndarray,
    axes: Optional[Sequence[str]] = None,
    meta: Optional[Dict[str, Any]] = None,
    normalization: Optional[Dict[str, float]] = None,
) -> bytes:
    code = _dtype_code(np.asarray(array))
    data = np.ascontiguousarray(array, dtype=_DTYPES[code])
    axes = list(axes) if axes is not None else [f"d{i}" for i in range(data.ndim)]
    if len(axes) != data.ndim:
        raise ContainerFormatError(f"{len(axes)} axis names for a {data.ndim}D array.")
    header = _canonical_json(
        {
            "dtype": code,
            "shape": [int(s) for s in data.shape],
            "axes": axes,
            "meta": meta or {},
            "normalization": normalization or {},
        }
    )
    return CONTAINER_MAGIC + _LENGTH.pack(len(header)) + header + data.tobytes(order="C")


def decode_container(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, Dict[str, Any], int]:
    """Decode one container starting at ``offset``; returns (array, header, end offset)."""
    if buffer[offset : offset + 4] != CONTAINER_MAGIC:
        raise ContainerFormatError(f"Unknown container magic {buffer[offset:offset + 4]!r} (expected {CONTAINER_MAGIC!r}).")
    if len(buffer) < offset + 8:
        raise ContainerFormatError("Container truncated inside the header length.")
    (header_length,) = _LENGTH.unpack_from(buffer, offset + 4)
    start = offset + 8
    try:
        header = json.loads(buffer[start : start + header_length].decode("utf-8"))
        dtype = _DTYPES[header["dtype"]]
        shape = tuple(int(s) for s in header["shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise ContainerFormatError(f"Invalid container header: {e}") from e
    payload_start = start + header_length
    payload_length = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    end = payload_start + payload_length
    if len(buffer) < end:
        raise ContainerFormatError(f"Container payload truncated: need {payload_length} bytes, have {len(buffer) - payload_start}.")
    array = np.frombuffer(buffer, dtype=dtype, count=payload_length // dtype.itemsize, offset=payload_start)
    return array.reshape(shape).copy(), header, end


def write_container(path: Path, array: np.ndarray, **kwargs) -> Path:
    path = Path(path)
    path.write_bytes(encode_container(array, **kwargs))
    return path


def read_container(path: Path) -> Tuple[np.ndarray, Dict[str, Any]]:
    path = Path(path)
    buffer = path.read_bytes()
    try:
        array, header, end = decode_container(buffer)
    except ContainerFormatError as e:
        raise ContainerFormatError(f"{path}: {e}") from e
    if end != len(buffer):
        raise ContainerFormatError(f"{path}: {len(buffer) - end} trailing bytes after the payload.")
    return array, header


@dataclass
class Checkpoint:
    """Named tensors plus the run configuration that produced them."""

    config: Dict[str, Any]
    step: int
    tensors: Dict[str, np.ndarray]
    extra: Dict[str, Any] = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name: array for name, array in self.tensors.items() if name.startswith(prefix)}


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    blobs = []
    directory = {}
    offset = 0
    for name in sorted(checkpoint.tensors):
        blob = encode_container(checkpoint.tensors[name], meta={"name": name})
        directory[name] = {"offset": offset, "length": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    manifest = _canonical_json(
        {
            "config": checkpoint.config,
            "step": int(checkpoint.step),
            "extra": checkpoint.extra,
            "tensors": directory,
        }
    )
    return CHECKPOINT_MAGIC + _LENGTH.pack(len(manifest)) + manifest + b"".join(blobs)


def decode_checkpoint(buffer: bytes) -> Checkpoint:
    if buffer[:4] != CHECKPOINT_MAGIC:
        raise ContainerFormatError(f"Unknown checkpoint magic {buffer[:4]!r} (expected {CHECKPOINT_MAGIC!r}).")
    if len(buffer) < 8:
        raise ContainerFormatError("Checkpoint truncated inside the manifest length.")
    (manifest_length,) = _LENGTH.unpack_from(buffer, 4)
    try:
        manifest = json.loads(buffer[8 : 8 + manifest_length].decode("utf-8"))
        directory = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as e:
        raise ContainerFormatError(f"Invalid checkpoint manifest: {e}") from e
    base = 8 + manifest_length
    tensors = {}
    for name, entry in directory.items():
        start = base + int(entry["offset"])
        array, header, end = decode_container(buffer, start)
        if end - start != int(entry["length"]) or header.get("meta", {}).get("name") != name:
            raise ContainerFormatError(f"Checkpoint entry '{name}' does not match its directory record.")
        tensors[name] = array
    return Checkpoint(
        config=manifest.get("config", {}),
        step=int(manifest.get("step", 0)),
        tensors=tensors,
        extra=manifest.get("extra", {}),
    )


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(checkpoint))
    tmp.replace(path)
    logger.info(f"Saved checkpoint step={checkpoint.step} with {len(checkpoint.tensors)} tensors to {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        return decode_checkpoint(path.read_bytes())
    except ContainerFormatError as e:
        raise ContainerFormatError(f"{path}: {e}") from e
