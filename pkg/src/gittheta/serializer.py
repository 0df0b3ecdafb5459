"""Self-describing binary container for labeled tensors.

Layout (all integers little-endian)::

    b"THB1" | u32 count | count x entry | sha256(preceding bytes)
    entry := u16 name_len | name (utf-8) | u8 dtype | u8 rank | u64 x rank | payload

Entries are stored sorted by name. The optional compressed form is
``b"THBZ" + zlib(container)``; object ids are computed over whichever bytes
are stored, so a repository fixes the choice once.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from collections.abc import Iterable

from .errors import CorruptContainer, DuplicateLabel, InvalidTensor
from .model import Dtype, Tensor

MAGIC = b"THB1"
MAGIC_COMPRESSED = b"THBZ"
DIGEST_SIZE = 32
_ZLIB_LEVEL = 6


def serialize(tensors: Iterable[tuple[str, Tensor]], *, compress: bool = False) -> bytes:
    items = list(tensors)
    labels = [label for label, _ in items]
    if len(set(labels)) != len(labels):
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        raise DuplicateLabel(f"duplicate labels {dupes}")
    items.sort(key=lambda item: item[0])

    parts = [MAGIC, struct.pack("<I", len(items))]
    for label, tensor in items:
        name = label.encode("utf-8")
        if len(name) > 0xFFFF:
            raise InvalidTensor(f"label {label[:32]!r}... longer than 65535 bytes")
        if len(tensor.shape) > 0xFF:
            raise InvalidTensor(f"rank {len(tensor.shape)} exceeds 255")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BB", tensor.dtype.code, len(tensor.shape)))
        parts.append(struct.pack(f"<{len(tensor.shape)}Q", *tensor.shape))
        parts.append(tensor.data)
    body = b"".join(parts)
    blob = body + hashlib.sha256(body).digest()
    if compress:
        return MAGIC_COMPRESSED + zlib.compress(blob, _ZLIB_LEVEL)
    return blob


def deserialize(blob: bytes) -> list[tuple[str, Tensor]]:
    blob = bytes(blob)
    if blob[:4] == MAGIC_COMPRESSED:
        try:
            blob = zlib.decompress(blob[4:])
        except zlib.error as exc:
            raise CorruptContainer("format", f"bad compressed stream: {exc}") from exc
        if blob[:4] == MAGIC_COMPRESSED:
            raise CorruptContainer("magic", "nested compressed container")
    if len(blob) < 4 or blob[:4] != MAGIC:
        if len(blob) < 4 and MAGIC.startswith(blob):
            raise CorruptContainer("length", f"container truncated at {len(blob)} bytes")
        raise CorruptContainer("magic", f"bad magic {blob[:4]!r}")

    end = len(blob) - DIGEST_SIZE
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if n < 0 or pos + n > end:
            raise CorruptContainer(
                "length", f"need {n} bytes at offset {pos}, only {max(end - pos, 0)} left"
            )
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: list[tuple[str, Tensor]] = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            label = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptContainer("format", f"label is not utf-8: {exc}") from exc
        code, rank = struct.unpack("<BB", take(2))
        try:
            dtype = Dtype.from_code(code)
        except ValueError as exc:
            raise CorruptContainer("format", str(exc)) from exc
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        numel = 1
        for extent in shape:
            numel *= extent
        data = take(numel * dtype.width)
        if out and label <= out[-1][0]:
            raise CorruptContainer("order", f"label {label!r} out of order or duplicated")
        out.append((label, Tensor(dtype, shape, data)))
    if pos != end:
        raise CorruptContainer("length", f"{end - pos} trailing bytes before digest")
    if hashlib.sha256(blob[:end]).digest() != blob[end:]:
        raise CorruptContainer("digest", "integrity digest mismatch")
    return out

