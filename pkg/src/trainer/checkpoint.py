"""
Checkpoint file format.

    MAGIC (4 bytes, b"DDL1")
    header length (uint64, little-endian)
    header (UTF-8 JSON, sorted keys): config, step, rng_state, optimizer_step, tensors
    tensor blobs, concatenated in header order, raw little-endian scalars

Each tensors entry is {"name", "dtype", "shape"}; names are prefixed "param/", "adam_m/" or "adam_v/".
"""
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

MAGIC = b"DDL1"
HEADER_LENGTH = struct.Struct("<Q")
SUPPORTED_BLOB_DTYPES = ("float32", "float64")

PARAM_PREFIX = "param/"
ADAM_M_PREFIX = "adam_m/"
ADAM_V_PREFIX = "adam_v/"
HEADER_KEYS = ("config", "optimizer_step", "rng_state", "step", "tensors")
TENSOR_KEYS = ("dtype", "name", "shape")


class CheckpointFormatError(Exception):
    pass


@dataclass
class Checkpoint:
    config: dict
    step: int
    params: Dict[str, np.ndarray]
    optimizer: dict = field(default_factory=lambda: {"t": 0, "m": {}, "v": {}})
    rng_state: dict = field(default_factory=dict)


def _blob(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    tensors = {}
    for prefix, group in ((PARAM_PREFIX, checkpoint.params), (ADAM_M_PREFIX, checkpoint.optimizer["m"]),
                          (ADAM_V_PREFIX, checkpoint.optimizer["v"])):
        for name in sorted(group):
            tensors[prefix + name] = np.asarray(group[name])
    entries = []
    for name, array in tensors.items():
        if array.dtype.name not in SUPPORTED_BLOB_DTYPES:
            raise CheckpointFormatError(f"Tensor '{name}' has unsupported dtype {array.dtype}")
        entries.append({"name": name, "dtype": array.dtype.name, "shape": list(array.shape)})
    header = {"config": checkpoint.config, "step": int(checkpoint.step), "rng_state": checkpoint.rng_state,
              "optimizer_step": int(checkpoint.optimizer["t"]), "tensors": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, HEADER_LENGTH.pack(len(header_bytes)), header_bytes]
    parts.extend(_blob(array) for array in tensors.values())
    return b"".join(parts)


def _require_keys(section, keys, what: str) -> None:
    if not isinstance(section, dict):
        raise CheckpointFormatError(f"Checkpoint {what} must be a JSON object")
    missing = [key for key in keys if key not in section]
    if missing:
        raise CheckpointFormatError(f"Checkpoint {what} is missing {', '.join(missing)}")


def decode_checkpoint(payload: bytes) -> Checkpoint:
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"Not a checkpoint or unsupported format version: expected magic {MAGIC!r}, "
                                    f"found {payload[:len(MAGIC)]!r}")
    offset = len(MAGIC)
    if len(payload) < offset + HEADER_LENGTH.size:
        raise CheckpointFormatError("Checkpoint is truncated inside the header length")
    (header_length,) = HEADER_LENGTH.unpack_from(payload, offset)
    offset += HEADER_LENGTH.size
    if len(payload) < offset + header_length:
        raise CheckpointFormatError("Checkpoint is truncated inside the header")
    try:
        header = json.loads(payload[offset:offset + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"Checkpoint header is not valid JSON: {err}") from err
    _require_keys(header, HEADER_KEYS, "header")
    offset += header_length

    groups = {PARAM_PREFIX: {}, ADAM_M_PREFIX: {}, ADAM_V_PREFIX: {}}
    for entry in header["tensors"]:
        _require_keys(entry, TENSOR_KEYS, "tensor entry")
        if entry["dtype"] not in SUPPORTED_BLOB_DTYPES:
            raise CheckpointFormatError(f"Tensor '{entry['name']}' has unsupported dtype {entry['dtype']}")
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if len(payload) < offset + nbytes:
            raise CheckpointFormatError(f"Checkpoint is truncated inside tensor '{entry['name']}'")
        array = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        offset += nbytes
        prefix, _, name = entry["name"].partition("/")
        group = groups.get(prefix + "/")
        if group is None:
            raise CheckpointFormatError(f"Unknown tensor group in '{entry['name']}'")
        group[name] = array.reshape(shape).astype(np.dtype(entry["dtype"]))
    if offset != len(payload):
        raise CheckpointFormatError(f"Checkpoint has {len(payload) - offset} unexpected trailing bytes")
    return Checkpoint(config=header["config"], step=header["step"], params=groups[PARAM_PREFIX],
                      optimizer={"t": header["optimizer_step"], "m": groups[ADAM_M_PREFIX],
                                 "v": groups[ADAM_V_PREFIX]},
                      rng_state=header["rng_state"])


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = encode_checkpoint(checkpoint)
    with open(path, "wb") as checkpoint_file:
        checkpoint_file.write(payload)
    logging.info(f"Saved checkpoint at step {checkpoint.step} to {path} ({len(payload)} bytes)")


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CheckpointFormatError(f"Checkpoint file '{path}' does not exist")
    with open(path, "rb") as checkpoint_file:
        return decode_checkpoint(checkpoint_file.read())
