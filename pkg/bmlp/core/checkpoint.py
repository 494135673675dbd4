"""
Checkpoint file format (version 1)

    offset  size  field
    0       4     magic b"BMLP"
    4       4     format version, u32 little-endian
    8       4     header length n, u32 little-endian
    12      n     msgpack header: {"hyper", "vocab", "tensors": [[name, shape], ...]}
    12+n    ...   tensors in header order, little-endian float64, C order
    end-32  32    sha256 of every preceding byte

Writes go to a temporary sibling first and are renamed into place.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import msgpack
import numpy as np
from loguru import logger
from pydantic import ValidationError

from ..errors import CheckpointVersionError, CorruptCheckpointError, HyperParamMismatchError
from .encoding import Vocab
from .model import HyperParams, ModelParams

MAGIC = b"BMLP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DIGEST = 32
_TENSOR_DTYPE = np.dtype("<f8")


def save_checkpoint(
    params: ModelParams, hyper: HyperParams, vocab: Vocab, path: Union[str, Path]
) -> Path:
    path = Path(path)
    named = list(params.named())
    header = msgpack.packb(
        {
            "hyper": hyper.model_dump(mode="json"),
            "vocab": vocab.to_dict(),
            "tensors": [[name, list(t.shape)] for name, t in named],
        },
        use_bin_type=True,
    )
    blob = bytearray(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
    blob += header
    for _, t in named:
        blob += np.ascontiguousarray(t, dtype=_TENSOR_DTYPE).tobytes()
    blob += hashlib.sha256(blob).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)
    logger.info(f"Checkpoint saved: {path} ({len(named)} tensors, {params.count():,} params)")
    return path


def load_checkpoint(
    path: Union[str, Path], expected: Optional[HyperParams] = None
) -> Tuple[ModelParams, HyperParams, Vocab]:
    """
    Read a checkpoint written by ``save_checkpoint``.

    With ``expected`` given, its architecture must match the stored one;
    training-only fields (lr, epochs, dropout, ...) may differ.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PREFIX.size + _DIGEST:
        raise CorruptCheckpointError(f"{path}: truncated ({len(data)} bytes)")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or modified)")

    start = _PREFIX.size
    try:
        header = msgpack.unpackb(body[start:start + header_len], raw=False)
        hyper = HyperParams.model_validate(header["hyper"])
        vocab = Vocab.from_dict(header["vocab"])
        index = [(str(name), tuple(int(s) for s in shape)) for name, shape in header["tensors"]]
    except (msgpack.exceptions.ExtraData, msgpack.exceptions.UnpackException,
            ValueError, KeyError, TypeError, ValidationError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from exc

    if expected is not None and expected.architecture() != hyper.architecture():
        diff = {
            k: (v, expected.architecture()[k])
            for k, v in hyper.architecture().items()
            if expected.architecture()[k] != v
        }
        raise HyperParamMismatchError(f"{path}: stored vs requested architecture differ: {diff}")

    params = ModelParams.allocate(hyper, vocab.n_items, vocab.n_behaviors)
    targets = params.tensors()
    if [(n, s) for n, s in index] != [(n, t.shape) for n, t in targets.items()]:
        raise CorruptCheckpointError(f"{path}: tensor index does not match the stored hyperparameters")

    offset = start + header_len
    for name, shape in index:
        count = int(np.prod(shape))
        nbytes = count * _TENSOR_DTYPE.itemsize
        if offset + nbytes > len(body):
            raise CorruptCheckpointError(f"{path}: tensor '{name}' runs past end of file")
        stored = np.frombuffer(body, dtype=_TENSOR_DTYPE, count=count, offset=offset)
        targets[name][...] = stored.reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    logger.info(f"Checkpoint loaded: {path} ({hyper.label()})")
    return params, hyper, vocab
