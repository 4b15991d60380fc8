"""The "TACO" bitstream container: header, entropy-coded streams, checksum.

Layout (all integers little-endian):

====== ====== =================================================
offset size   field
====== ====== =================================================
0      4      magic ``b"TACO"``
4      1      format version (currently 1)
5      1      coder id: 0 = reference range coder, 1 = rANS
6      8      model id (digest prefix of config + weights)
14     2      lambda tag (index into the standard grid; 0xFFFF = custom)
16     4      original height
20     4      original width
24     4      padded height
28     4      padded width
32     1      CDF precision
33     4      tail mass (float32)
37     1      stream count
38     4 * n  per-stream byte lengths
...    ...    stream payloads, in header order (z first, then y)
end-4  4      CRC-32 over the concatenated stream payloads
====== ====== =================================================

Captions are never stored: decoding is text-free by design.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

from .errors import ContainerError

MAGIC = b"TACO"
FORMAT_VERSION = 1
CODER_REFERENCE = 0
CODER_RANS = 1

_FIXED = struct.Struct("<4sBB8sHIIIIBfB")


@dataclass(frozen=True)
class ContainerHeader:
    coder_id: int
    model_id: bytes
    lambda_tag: int
    original_height: int
    original_width: int
    padded_height: int
    padded_width: int
    cdf_precision: int
    tail_mass: float
    stream_lengths: tuple[int, ...]
    version: int = FORMAT_VERSION

    def validate(self) -> None:
        if self.coder_id not in (CODER_REFERENCE, CODER_RANS):
            raise ContainerError(f"unknown coder id {self.coder_id}")
        if len(self.model_id) != 8:
            raise ContainerError("model id must be exactly 8 bytes")
        for name, value in (
            ("original_height", self.original_height),
            ("original_width", self.original_width),
            ("padded_height", self.padded_height),
            ("padded_width", self.padded_width),
        ):
            if not 0 < value < 1 << 32:
                raise ContainerError(f"{name} {value} not representable in 32 bits")
        if (self.padded_height < self.original_height
                or self.padded_width < self.original_width):
            raise ContainerError("padded dimensions smaller than original")
        if self.padded_height % 16 or self.padded_width % 16:
            raise ContainerError("padded dimensions must be multiples of 16")
        if not 0 < len(self.stream_lengths) <= 255:
            raise ContainerError("stream count must be 1..255")


def write_container(header: ContainerHeader, streams: list[bytes]) -> bytes:
    """Serialize header + streams + trailing payload checksum."""
    if len(streams) != len(header.stream_lengths):
        raise ContainerError("stream count does not match header")
    for i, (stream, length) in enumerate(zip(streams, header.stream_lengths)):
        if len(stream) != length:
            raise ContainerError(
                f"stream {i} is {len(stream)} bytes but header says {length}"
            )
    header.validate()
    out = bytearray(
        _FIXED.pack(
            MAGIC,
            header.version,
            header.coder_id,
            header.model_id,
            header.lambda_tag,
            header.original_height,
            header.original_width,
            header.padded_height,
            header.padded_width,
            header.cdf_precision,
            header.tail_mass,
            len(streams),
        )
    )
    for length in header.stream_lengths:
        out += struct.pack("<I", length)
    payload = b"".join(streams)
    out += payload
    out += struct.pack("<I", zlib.crc32(payload))
    return bytes(out)


def read_container(blob: bytes) -> tuple[ContainerHeader, list[bytes]]:
    """Parse and validate a container; returns the header and its streams."""
    if len(blob) < _FIXED.size:
        raise ContainerError("container shorter than its fixed header")
    (magic, version, coder_id, model_id, lambda_tag, oh, ow, ph, pw,
     precision, tail_mass, stream_count) = _FIXED.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError(
            f"bad magic {magic!r}; this is not a {MAGIC.decode()} container"
        )
    if version != FORMAT_VERSION:
        raise ContainerError(
            f"unsupported container version {version} (this build reads "
            f"{FORMAT_VERSION})"
        )
    offset = _FIXED.size
    table_end = offset + 4 * stream_count
    if len(blob) < table_end:
        raise ContainerError("container truncated inside the stream-length table")
    lengths = struct.unpack_from(f"<{stream_count}I", blob, offset)
    offset = table_end

    payload_len = sum(lengths)
    expected_total = offset + payload_len + 4
    if len(blob) < expected_total:
        raise ContainerError("container truncated inside a stream payload")
    if len(blob) > expected_total:
        raise ContainerError("trailing bytes after the container checksum")

    payload = blob[offset : offset + payload_len]
    (stored_crc,) = struct.unpack_from("<I", blob, offset + payload_len)
    actual_crc = zlib.crc32(payload)
    if stored_crc != actual_crc:
        raise ContainerError(
            f"payload checksum mismatch (stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x})"
        )

    streams = []
    cursor = 0
    for length in lengths:
        streams.append(payload[cursor : cursor + length])
        cursor += length
    header = ContainerHeader(
        coder_id=coder_id,
        model_id=model_id,
        lambda_tag=lambda_tag,
        original_height=oh,
        original_width=ow,
        padded_height=ph,
        padded_width=pw,
        cdf_precision=precision,
        tail_mass=tail_mass,
        stream_lengths=tuple(lengths),
        version=version,
    )
    header.validate()
    return header, streams
