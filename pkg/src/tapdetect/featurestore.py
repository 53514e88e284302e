"""Token-feature datasets and the TFRB binary file format.

A record is one image's frozen-encoder output: an ``N x D`` float32 token
matrix whose row 0 is the ``cls`` token and rows ``1..N-1`` are patch tokens,
plus a binary label (0 = real, 1 = generated/inpainted) and a short source
tag. Records in one dataset share the embedding dimension ``D`` but may have
different token counts ``N`` (variable-resolution encoders).

TFRB layout, all integers little-endian:

    bytes 0-3   magic ``TFRB``
    u16         format version (currently 1)
    u32         embedding dimension D
    u64         record count
    per record:
        u8      label (0 or 1)
        u8      tag byte length L (max 64)
        L bytes tag, UTF-8
        u32     token count N (>= 1)
        N*D     IEEE-754 binary32 values, row-major, cls row first

Files round-trip bit-exactly: values are stored and reloaded as the same
float32 bit patterns. Datasets are immutable after loading and safe to share
across threads; writing is single-writer.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .rng import fisher_yates_permutation

MAGIC = b"TFRB"
FORMAT_VERSION = 1
MAX_TAG_BYTES = 64

_HEADER = struct.Struct("<4sHIQ")
_REC_HEAD = struct.Struct("<BB")
_REC_N = struct.Struct("<I")


class FeatureStoreError(Exception):
    """Base class for TFRB validation and parsing failures."""


class BadMagicError(FeatureStoreError):
    """File does not start with the TFRB magic bytes."""


class UnsupportedVersionError(FeatureStoreError):
    """File declares a format version this reader does not understand."""


class TruncatedRecordError(FeatureStoreError):
    """File ends before the declared content is complete."""


class NonFiniteValueError(FeatureStoreError):
    """A token value is NaN or infinite."""


class InvalidRecordError(FeatureStoreError):
    """A record violates the dataset contract (label, tag, or dimensions)."""


@dataclass(eq=False)
class TokenFeatureRecord:
    label: int
    tag: str
    tokens: np.ndarray  # (N, D) float32, row 0 is the cls token

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def cls_token(self) -> np.ndarray:
        return self.tokens[0]

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[1:]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenFeatureRecord):
            return NotImplemented
        return (
            self.label == other.label
            and self.tag == other.tag
            and self.tokens.shape == other.tokens.shape
            and self.tokens.tobytes() == other.tokens.tobytes()
        )


@dataclass(eq=False)
class FeatureDataset:
    dim: int
    records: list[TokenFeatureRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return self.dim == other.dim and self.records == other.records

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def tags(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.tag, None)
        return list(seen)


@dataclass
class Batch:
    records: list[TokenFeatureRecord]
    labels: list[int]

    def __len__(self) -> int:
        return len(self.records)


def make_record(label: int, tag: str, tokens: np.ndarray) -> TokenFeatureRecord:
    """Build a record, normalizing tokens to a little-endian float32 matrix."""
    arr = np.ascontiguousarray(tokens, dtype="<f4")
    if arr.ndim != 2:
        raise InvalidRecordError(f"tokens must be 2-d, got shape {arr.shape}")
    rec = TokenFeatureRecord(label=int(label), tag=tag, tokens=arr)
    _validate_record(rec, arr.shape[1], index=None)
    return rec


def _validate_record(rec: TokenFeatureRecord, dim: int, index: int | None) -> None:
    where = "record" if index is None else f"record {index}"
    if rec.label not in (0, 1):
        raise InvalidRecordError(f"{where}: label must be 0 or 1, got {rec.label}")
    tag_bytes = rec.tag.encode("utf-8")
    if len(tag_bytes) > MAX_TAG_BYTES:
        raise InvalidRecordError(
            f"{where}: tag exceeds {MAX_TAG_BYTES} UTF-8 bytes"
        )
    if rec.tokens.ndim != 2:
        raise InvalidRecordError(f"{where}: tokens must be 2-d")
    n, d = rec.tokens.shape
    if n < 1:
        raise InvalidRecordError(f"{where}: token count must be >= 1")
    if d != dim:
        raise InvalidRecordError(
            f"{where}: token dimension {d} does not match dataset dimension {dim}"
        )
    if not np.isfinite(rec.tokens).all():
        raise NonFiniteValueError(f"{where}: tokens contain NaN or Inf")


def validate_dataset(dataset: FeatureDataset) -> None:
    if dataset.dim < 1:
        raise InvalidRecordError(f"dataset dimension must be positive, got {dataset.dim}")
    for i, rec in enumerate(dataset.records):
        _validate_record(rec, dataset.dim, index=i)


def write_feature_file(dataset: FeatureDataset, path: str | Path) -> None:
    """Serialize a dataset to TFRB.

    The dataset is validated in full before any bytes are written; an invalid
    dataset never leaves a file behind. The write itself is atomic (temp file
    plus rename).
    """
    validate_dataset(dataset)
    path = Path(path)
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, dataset.dim, len(dataset.records))]
    for rec in dataset.records:
        tag_bytes = rec.tag.encode("utf-8")
        chunks.append(_REC_HEAD.pack(rec.label, len(tag_bytes)))
        chunks.append(tag_bytes)
        chunks.append(_REC_N.pack(rec.tokens.shape[0]))
        chunks.append(np.ascontiguousarray(rec.tokens, dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
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


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedRecordError(
                f"file ends inside {what}: needed {n} bytes at offset {self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def read_feature_file(path: str | Path) -> FeatureDataset:
    """Parse a TFRB file, validating structure, labels, and finiteness."""
    data = Path(path).read_bytes()
    cur = _Cursor(data)
    magic = cur.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, got {magic!r}")
    (version,) = struct.unpack("<H", cur.take(2, "version"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported TFRB version {version}")
    (dim,) = struct.unpack("<I", cur.take(4, "dimension"))
    if dim < 1:
        raise InvalidRecordError("header dimension must be positive")
    (count,) = struct.unpack("<Q", cur.take(8, "record count"))

    records: list[TokenFeatureRecord] = []
    for i in range(count):
        label, tag_len = _REC_HEAD.unpack(cur.take(2, f"record {i} header"))
        if label not in (0, 1):
            raise InvalidRecordError(f"record {i}: label must be 0 or 1, got {label}")
        if tag_len > MAX_TAG_BYTES:
            raise InvalidRecordError(f"record {i}: tag length {tag_len} exceeds {MAX_TAG_BYTES}")
        raw_tag = cur.take(tag_len, f"record {i} tag")
        try:
            tag = raw_tag.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidRecordError(f"record {i}: tag is not valid UTF-8") from exc
        (n,) = _REC_N.unpack(cur.take(4, f"record {i} token count"))
        if n < 1:
            raise InvalidRecordError(f"record {i}: token count must be >= 1")
        raw = cur.take(n * dim * 4, f"record {i} tokens")
        tokens = np.frombuffer(raw, dtype="<f4").reshape(n, dim).copy()
        if not np.isfinite(tokens).all():
            raise NonFiniteValueError(f"record {i}: tokens contain NaN or Inf")
        records.append(TokenFeatureRecord(label=label, tag=tag, tokens=tokens))

    if cur.pos != len(data):
        raise InvalidRecordError(
            f"{len(data) - cur.pos} trailing bytes after last record"
        )
    return FeatureDataset(dim=dim, records=records)


def batch_iter(
    dataset: FeatureDataset,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> Iterator[Batch]:
    """Yield one epoch of batches; the last batch may be short.

    Without a seed, records come in file order. With a seed, order is the
    Fisher-Yates permutation pinned in :mod:`tapdetect.rng`, a pure function
    of (seed, len(dataset)). Iterators over the same dataset are independent.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset.records)
    if n == 0:
        raise ValueError("cannot iterate an empty dataset")
    if shuffle_seed is None:
        order = list(range(n))
    else:
        order = fisher_yates_permutation(n, shuffle_seed)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        recs = [dataset.records[i] for i in idx]
        yield Batch(records=recs, labels=[r.label for r in recs])
