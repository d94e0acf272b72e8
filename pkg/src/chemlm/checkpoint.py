"""Self-describing checkpoint container.

Layout (all integers little-endian)::

    b"MLFC1\\n"
    u32 header length, header: UTF-8 ``key=value`` lines (values are JSON)
    u32 tensor count
    per tensor: u16 name length, name, u8 dtype code, u8 ndim,
                ndim x u64 dims, raw little-endian payload
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"MLFC1\n"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _encode_header(header: dict) -> bytes:
    lines = []
    for key, value in header.items():
        if "=" in key or "\n" in key:
            raise ValueError(f"invalid header key {key!r}")
        lines.append(f"{key}={json.dumps(value, sort_keys=True)}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_header(raw: bytes) -> dict:
    header = {}
    for line in raw.decode("utf-8").splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        header[key] = json.loads(value)
    return header


def write_container(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write; an existing file is replaced only after a complete write."""
    path = Path(path)
    chunks = [MAGIC]
    hb = _encode_header(header)
    chunks += [struct.pack("<I", len(hb)), hb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not an MLFC1 checkpoint")
    try:
        off = len(MAGIC)
        (hlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        header = _decode_header(buf[off : off + hlen])
        off += hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            code, ndim = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", buf, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointFormatError(f"{path}: truncated payload for {name!r}")
            tensors[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return header, tensors


def save_checkpoint(path, state, header: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    """Store an :class:`~chemlm.model.EncoderState` plus optional extra tensors."""
    hdr = {"model." + k: v for k, v in state.config.to_dict().items()}
    hdr.update(header or {})
    tensors = {"param." + k: t.data for k, t in state.params.items()}
    tensors.update({"buffer." + k: v for k, v in state.buffers.items()})
    tensors.update(extra or {})
    write_container(path, hdr, tensors)


def load_checkpoint(path):
    """Return ``(state, header, extra_tensors)``."""
    from .model import EncoderConfig, EncoderState
    from .nncore import Tensor

    header, tensors = read_container(path)
    cfg = {k[len("model.") :]: v for k, v in header.items() if k.startswith("model.")}
    config = EncoderConfig(**cfg)
    params, buffers, extra = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            params[name[6:]] = Tensor(arr, True, name[6:])
        elif name.startswith("buffer."):
            buffers[name[7:]] = arr
        else:
            extra[name] = arr
    return EncoderState(config, params, buffers), header, extra
