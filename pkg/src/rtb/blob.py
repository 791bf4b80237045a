"""Binary weight-blob serialization.

Layout: 8-byte magic ``RTBWGT01``, then one record per tensor:
``u32 name length | name utf-8 | u32 rank | u32 dims... | float32 payload``,
all little-endian.  Records are written in sorted name order.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ParseError
from .tensor import Tensor

MAGIC = b"RTBWGT01"


def save_weights(path, weights: dict):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name in sorted(weights):
            arr = weights[name].data if isinstance(weights[name], Tensor) else np.asarray(weights[name])
            payload = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", payload.ndim))
            fh.write(struct.pack(f"<{payload.ndim}I", *payload.shape))
            fh.write(payload.tobytes())


def load_weights(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ParseError(f"bad weight blob magic {data[:8]!r}")
    pos = 8
    out = {}
    while pos < len(data):
        if pos + 4 > len(data):
            raise ParseError("truncated weight blob record header")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        count = 1
        for d in dims:
            count *= d
        end = pos + 4 * count
        if end > len(data):
            raise ParseError(f"truncated payload for tensor {name!r}")
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(dims)
        pos = end
        out[name] = Tensor(arr.astype(np.float64))
    return out
