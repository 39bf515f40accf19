"""Binary container shared by dataset and checkpoint files.

Layout (all integers little-endian):

    magic      6 bytes, e.g. b"UNFDS1" / b"UNFCK1"
    header_len 8-byte unsigned length of the JSON header
    header     UTF-8 JSON; carries "version": 1 and
               "blocks": [[name, [dims...]], ...] declaring the payload
    payload    raw float64 little-endian blocks, C-order, in declared order

Round-trips are bitwise lossless for all float payloads.
"""

import json
import struct
import numpy as np

from .errors import FormatError, VersionError

VERSION = 1
_MAGIC_LEN = 6


def write_container(path, magic: bytes, header: dict, blocks) -> None:
    """blocks: ordered (name, float64 array) pairs."""
    if len(magic) != _MAGIC_LEN:
        raise ValueError(f"magic must be {_MAGIC_LEN} bytes")
    header = dict(header)
    header["version"] = VERSION
    header["blocks"] = [[name, list(arr.shape)] for name, arr in blocks]
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path, magic: bytes):
    """Returns (header dict, {name: array}).  Raises FormatError/VersionError."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:_MAGIC_LEN] != magic:
        raise FormatError(f"bad magic, expected {magic!r}", offset=0)
    if len(raw) < _MAGIC_LEN + 8:
        raise FormatError("truncated before header length", offset=len(raw))
    (head_len,) = struct.unpack_from("<Q", raw, _MAGIC_LEN)
    head_start = _MAGIC_LEN + 8
    if len(raw) < head_start + head_len:
        raise FormatError("truncated inside header", offset=len(raw))
    try:
        header = json.loads(raw[head_start:head_start + head_len].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise FormatError(f"header is not valid JSON: {e}", offset=head_start) from e
    if header.get("version") != VERSION:
        raise VersionError(f"unsupported container version {header.get('version')!r}")
    if "blocks" not in header:
        raise FormatError("header missing block table", offset=head_start)
    offset = head_start + head_len
    out = {}
    for name, dims in header["blocks"]:
        count = int(np.prod(dims)) if dims else 1
        nbytes = 8 * count
        if len(raw) < offset + nbytes:
            raise FormatError(f"truncated inside block {name!r}", offset=len(raw))
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype="<f8").reshape(dims)
        out[name] = arr.astype(np.float64)  # own, writable copy
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after declared blocks", offset=offset)
    return header, out
