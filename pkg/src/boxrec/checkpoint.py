"""Binary checkpoint format.

Little-endian. Header: magic ``BOXREC01`` then u32 ``d, L, N, M, mode_tag,
n_items``. Then one record per tensor until EOF::

    u32 name_len | name (utf-8) | u32 rank | u32 extents[rank]
    | float32 payload | u64 checksum

The checksum is an 8-byte BLAKE2b digest of the record bytes before it.
The full encoder config lives in a ``.cfg`` sidecar next to the file.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from . import config as configio
from .autodiff import Tensor
from .encoder import EncoderConfig
from .errors import DataError
from .geometry import MODES

MAGIC = b"BOXREC01"
_HEADER = struct.Struct("<6I")


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".cfg")


def save_checkpoint(path, config: EncoderConfig, params: dict[str, Tensor]) -> None:
    n_items = params["item_embeddings"].shape[0] - 1
    chunks = [MAGIC, _HEADER.pack(config.d, config.L, config.N, config.M,
                                  MODES.index(config.mode), n_items)]
    for name, tensor in params.items():
        raw_name = name.encode("utf-8")
        value = np.ascontiguousarray(tensor.value, dtype="<f4")
        record = b"".join([
            struct.pack("<I", len(raw_name)),
            raw_name,
            struct.pack("<I", value.ndim),
            struct.pack(f"<{value.ndim}I", *value.shape),
            value.tobytes(),
        ])
        chunks.append(record)
        chunks.append(_checksum(record))
    path = Path(path)
    path.write_bytes(b"".join(chunks))
    configio.write_config_file(sidecar_path(path), configio.as_dict(config))


def load_checkpoint(path) -> tuple[dict, dict[str, Tensor]]:
    """Read header fields and parameters; raises DataError on any corruption."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    try:
        d, L, N, M, tag, n_items = _HEADER.unpack_from(data, 8)
    except struct.error:
        raise DataError(f"{path}: truncated header") from None
    header = {"d": d, "L": L, "N": N, "M": M, "mode": MODES[tag], "n_items": n_items}
    pos = 8 + _HEADER.size
    params = {}
    try:
        while pos < len(data):
            start = pos
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            payload = data[pos:pos + nbytes]
            if len(payload) != nbytes:
                raise DataError(f"{path}: truncated tensor {name}")
            pos += nbytes
            stored = data[pos:pos + 8]
            pos += 8
            if stored != _checksum(data[start:pos - 8]):
                raise DataError(f"{path}: checksum mismatch in tensor {name}")
            value = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            params[name] = Tensor(value, requires_grad=True, name=name)
    except (struct.error, UnicodeDecodeError):
        raise DataError(f"{path}: corrupt tensor record") from None
    return header, params


def load_model(path) -> tuple[EncoderConfig, dict[str, Tensor]]:
    """Checkpoint plus its sidecar config, cross-checked against the header."""
    header, params = load_checkpoint(path)
    cfg_path = sidecar_path(path)
    if cfg_path.exists():
        config = configio.build(EncoderConfig, configio.read_config_file(cfg_path))
    else:
        config = EncoderConfig(d=header["d"], L=header["L"], N=header["N"],
                               M=header["M"], mode=header["mode"])
    for key in ("d", "L", "N", "M", "mode"):
        if getattr(config, key) != header[key]:
            raise DataError(f"{path}: sidecar {key}={getattr(config, key)} "
                            f"disagrees with header {header[key]}")
    return config, params
