"""Standalone TFRB writer.

The layout mirrors the consumer's published format byte for byte; keeping an
independent implementation here is deliberate, so that exports exercise the
format contract rather than shared code. All integers little-endian:

    magic "TFRB" | u16 version=1 | u32 D | u64 record count
    per record: u8 label | u8 tag length | tag UTF-8 | u32 N | N*D float32
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np

MAGIC = b"TFRB"
VERSION = 1
MAX_TAG_BYTES = 64


def write_tfrb(
    path: str | Path,
    dim: int,
    records: Iterable[tuple[int, str, np.ndarray]],
) -> int:
    """Write (label, tag, tokens) triples; returns the record count.

    Tokens are downcast to little-endian float32; the cls row must already be
    row 0. The write is atomic.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    body: list[bytes] = []
    count = 0
    for label, tag, tokens in records:
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label}")
        tag_bytes = tag.encode("utf-8")
        if len(tag_bytes) > MAX_TAG_BYTES:
            raise ValueError(f"tag longer than {MAX_TAG_BYTES} bytes: {tag!r}")
        arr = np.ascontiguousarray(tokens, dtype="<f4")
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != dim:
            raise ValueError(f"tokens must be (N>=1, {dim}), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tokens contain NaN or Inf")
        body.append(struct.pack("<BB", label, len(tag_bytes)))
        body.append(tag_bytes)
        body.append(struct.pack("<I", arr.shape[0]))
        body.append(arr.tobytes())
        count += 1

    path = Path(path)
    data = struct.pack("<4sHIQ", MAGIC, VERSION, dim, count) + b"".join(body)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise
    return count
