"""Versioned binary container: magic bytes, u32 version, then length-prefixed
records. Each record is a JSON header (array dtypes/shapes plus JSON-able
metadata) followed by raw array bytes in sorted-name order.

The encoding is deliberately boring: fixed little-endian framing and raw
C-order buffers, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import FormatVersionError, ParseError

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_record(arrays, meta):
    """Serialize one record: dict of ndarrays plus a JSON-able meta dict."""
    names = sorted(arrays)
    header = {
        "arrays": {
            name: {"dtype": arrays[name].dtype.str, "shape": list(arrays[name].shape)}
            for name in names
        },
        "meta": meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [np.ascontiguousarray(arrays[name]).tobytes() for name in names]
    return _U32.pack(len(header_bytes)) + header_bytes + b"".join(blobs)


def decode_record(payload, base_offset=0):
    """Inverse of :func:`encode_record`; raises ParseError on truncation."""
    if len(payload) < 4:
        raise ParseError("record truncated before header length", base_offset)
    (header_len,) = _U32.unpack_from(payload, 0)
    if len(payload) < 4 + header_len:
        raise ParseError("record truncated inside header", base_offset + 4)
    try:
        header = json.loads(payload[4 : 4 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ParseError("record header is not valid JSON", base_offset + 4) from None
    arrays = {}
    cursor = 4 + header_len
    for name in sorted(header["arrays"]):
        spec = header["arrays"][name]
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        n_items = int(np.prod(shape, dtype=np.int64))
        nbytes = dtype.itemsize * n_items
        if len(payload) < cursor + nbytes:
            raise ParseError(
                f"record truncated inside array {name!r}", base_offset + cursor
            )
        arrays[name] = np.frombuffer(
            payload[cursor : cursor + nbytes], dtype=dtype
        ).reshape(shape).copy()
        cursor += nbytes
    return arrays, header["meta"]


def write_container(path, magic, version, records):
    """Write records (already-encoded bytes or (arrays, meta) tuples)."""
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(_U32.pack(version))
        fh.write(_U32.pack(len(records)))
        for record in records:
            payload = (
                record
                if isinstance(record, (bytes, bytearray))
                else encode_record(*record)
            )
            fh.write(_U64.pack(len(payload)))
            fh.write(payload)


def read_container(path, magic, version):
    """Read all records; raises on magic/version mismatch or corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(magic) + 8:
        raise ParseError("file shorter than container header", 0)
    if blob[: len(magic)] != magic:
        raise ParseError(
            f"bad magic {blob[:len(magic)]!r}, expected {magic!r}", 0
        )
    offset = len(magic)
    (found_version,) = _U32.unpack_from(blob, offset)
    offset += 4
    if found_version != version:
        raise FormatVersionError(
            f"container version {found_version} is not supported (expected {version})"
        )
    (count,) = _U32.unpack_from(blob, offset)
    offset += 4
    records = []
    for _ in range(count):
        if len(blob) < offset + 8:
            raise ParseError("file truncated before record length", offset)
        (length,) = _U64.unpack_from(blob, offset)
        offset += 8
        if len(blob) < offset + length:
            raise ParseError("file truncated inside record", offset)
        records.append(decode_record(blob[offset : offset + length], offset))
        offset += length
    return records
