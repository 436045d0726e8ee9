"""Fixed 1088-byte packet representation and the replay trace container.

Every packet is seventeen 64-byte blocks: block 0 (reg0) holds control
metadata, blocks 1..16 hold the 1024-byte payload consumed by the BNN
executor. reg0 layout, all fields little-endian:

    offset 0   slot_id          u32   selects the resident model slot
    offset 4   format_version   u32   parser compatibility guard
    offset 8   control          8 B   opaque, reserved for packet actions
    offset 16  padding          48 B  spare metadata, kept out of the payload

Payload bits map LSB-first: bit j of payload byte i is input index i*8+j,
with bit value 1 read as +1 and 0 as -1.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable, Sequence

import numpy as np

FRAME_LEN = 1088
META_LEN = 64
PAYLOAD_LEN = FRAME_LEN - META_LEN
PAYLOAD_BITS = PAYLOAD_LEN * 8
EXPECTED_FORMAT_VERSION = 1

CONTROL_OFFSET = 8
CONTROL_LEN = 8
PADDING_OFFSET = 16
PADDING_LEN = 48

_REG0_HEAD = struct.Struct("<II")

TRACE_MAGIC = b"BSWT"
TRACE_VERSION = 1
TRACE_HEADER = struct.Struct("<4sIQ")
TRACE_RECORD_LEN = 8 + FRAME_LEN


class FrameError(ValueError):
    """Base class for malformed-frame conditions."""


class WrongLength(FrameError):
    """Frame is not exactly FRAME_LEN bytes."""


class VersionMismatch(FrameError):
    """reg0 format_version differs from the expected version."""


class WrongPayloadLength(FrameError):
    """Payload handed to build_frame is not exactly PAYLOAD_LEN bytes."""


class TraceError(ValueError):
    """Base class for malformed trace files."""


class BadMagic(TraceError):
    pass


class TruncatedFile(TraceError):
    pass


class NonMonotonicTime(TraceError):
    pass


class Reg0Metadata:
    """Parsed reg0 control block. Fields beyond slot_id and format_version
    are carried opaque."""

    __slots__ = ("slot_id", "format_version", "control", "padding")

    def __init__(self, slot_id: int, format_version: int,
                 control: bytes = b"\x00" * CONTROL_LEN,
                 padding: bytes = b"\x00" * PADDING_LEN):
        self.slot_id = slot_id
        self.format_version = format_version
        self.control = control
        self.padding = padding

    def __eq__(self, other):
        if not isinstance(other, Reg0Metadata):
            return NotImplemented
        return (self.slot_id == other.slot_id
                and self.format_version == other.format_version
                and bytes(self.control) == bytes(other.control)
                and bytes(self.padding) == bytes(other.padding))

    def __repr__(self):
        return (f"Reg0Metadata(slot_id={self.slot_id}, "
                f"format_version={self.format_version})")


class PayloadView:
    """Read-only bit view over a packed payload region; copies nothing.

    For frames the region is bytes [64, 1088) of the frame buffer (8192
    bits). Standalone packed buffers of any byte length are accepted so
    small models can be exercised with the same view type.
    """

    __slots__ = ("_buf", "_offset", "_nbytes")

    def __init__(self, buf, offset: int = 0, nbytes: int | None = None):
        if nbytes is None:
            nbytes = len(buf) - offset
        if nbytes < 0 or offset + nbytes > len(buf):
            raise ValueError("payload region exceeds buffer")
        self._buf = buf
        self._offset = offset
        self._nbytes = nbytes

    @property
    def nbits(self) -> int:
        return self._nbytes * 8

    def packed(self) -> memoryview:
        """Raw payload bytes, zero-copy."""
        return memoryview(self._buf)[self._offset:self._offset + self._nbytes]

    def bit(self, index: int) -> int:
        """Bit at input position index (byte index*8+j convention, LSB first)."""
        if not 0 <= index < self.nbits:
            raise IndexError(index)
        return (self._buf[self._offset + (index >> 3)] >> (index & 7)) & 1

    def words(self) -> np.ndarray:
        """Payload as little-endian uint64 words, zero-padded to a word
        boundary. Zero-copy when the region is word-sized and the buffer
        is contiguous."""
        if self._nbytes % 8 == 0:
            return np.frombuffer(self._buf, dtype=np.uint64,
                                 count=self._nbytes // 8, offset=self._offset)
        n_words = (self._nbytes + 7) // 8
        padded = np.zeros(n_words * 8, dtype=np.uint8)
        padded[:self._nbytes] = np.frombuffer(self._buf, dtype=np.uint8,
                                              count=self._nbytes,
                                              offset=self._offset)
        return padded.view(np.uint64)

    def signs(self) -> np.ndarray:
        """Payload bits as an int8 vector of +1/-1 (bit 1 -> +1)."""
        raw = np.frombuffer(self._buf, dtype=np.uint8, count=self._nbytes,
                            offset=self._offset)
        bits = np.unpackbits(raw, bitorder="little")
        return (bits.astype(np.int8) << 1) - 1


def parse_frame(data, expected_version: int = EXPECTED_FORMAT_VERSION
                ) -> tuple[Reg0Metadata, PayloadView]:
    """Split a raw frame into reg0 metadata and the payload view.

    Reads fixed offsets only; raises WrongLength for any size other than
    FRAME_LEN and VersionMismatch when format_version differs from
    expected_version.
    """
    if len(data) != FRAME_LEN:
        raise WrongLength(f"frame is {len(data)} bytes, expected {FRAME_LEN}")
    slot_id, version = _REG0_HEAD.unpack_from(data, 0)
    if version != expected_version:
        raise VersionMismatch(
            f"format_version {version}, expected {expected_version}")
    meta = Reg0Metadata(
        slot_id, version,
        bytes(data[CONTROL_OFFSET:CONTROL_OFFSET + CONTROL_LEN]),
        bytes(data[PADDING_OFFSET:PADDING_OFFSET + PADDING_LEN]))
    return meta, PayloadView(data, META_LEN, PAYLOAD_LEN)


def build_frame(slot_id: int, payload: bytes,
                control: bytes = b"\x00" * CONTROL_LEN,
                format_version: int = EXPECTED_FORMAT_VERSION) -> bytes:
    """Assemble a frame; parse_frame(build_frame(s, x, c)) recovers
    (s, format_version, c, x) exactly. Padding is zero-filled."""
    if len(payload) != PAYLOAD_LEN:
        raise WrongPayloadLength(
            f"payload is {len(payload)} bytes, expected {PAYLOAD_LEN}")
    if len(control) != CONTROL_LEN:
        raise ValueError(f"control field is {len(control)} bytes, expected {CONTROL_LEN}")
    if not 0 <= slot_id < 2 ** 32:
        raise ValueError(f"slot_id {slot_id} out of u32 range")
    return (_REG0_HEAD.pack(slot_id, format_version) + control
            + b"\x00" * PADDING_LEN + payload)


def write_trace(path_or_file, records: Sequence[tuple[int, bytes]]) -> None:
    """Write (emit_time_ns, frame) records to the trace container.

    emit times must be nondecreasing and every frame exactly FRAME_LEN
    bytes; the result is byte-for-byte recoverable with read_trace.
    """
    if hasattr(path_or_file, "write"):
        _write_trace_file(path_or_file, records)
    else:
        with open(path_or_file, "wb") as fh:
            _write_trace_file(fh, records)


def _write_trace_file(fh: BinaryIO, records: Sequence[tuple[int, bytes]]) -> None:
    fh.write(TRACE_HEADER.pack(TRACE_MAGIC, TRACE_VERSION, len(records)))
    prev = 0
    pack_time = struct.Struct("<Q").pack
    for i, (emit_ns, frame) in enumerate(records):
        if emit_ns < prev:
            raise NonMonotonicTime(
                f"record {i}: emit_time {emit_ns} < previous {prev}")
        if len(frame) != FRAME_LEN:
            raise WrongLength(f"record {i}: frame is {len(frame)} bytes")
        fh.write(pack_time(emit_ns))
        fh.write(frame)
        prev = emit_ns


def read_trace(path_or_file) -> list[tuple[int, bytes]]:
    """Read a trace file, validating magic, version, count, total length,
    and emit-time monotonicity."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if len(data) < TRACE_HEADER.size:
        raise TruncatedFile(f"file is {len(data)} bytes, header needs "
                            f"{TRACE_HEADER.size}")
    magic, version, count = TRACE_HEADER.unpack_from(data, 0)
    if magic != TRACE_MAGIC:
        raise BadMagic(f"magic {magic!r}, expected {TRACE_MAGIC!r}")
    if version != TRACE_VERSION:
        raise TraceError(f"trace version {version}, expected {TRACE_VERSION}")
    expected_len = TRACE_HEADER.size + count * TRACE_RECORD_LEN
    if len(data) != expected_len:
        raise TruncatedFile(
            f"file is {len(data)} bytes, header declares {expected_len}")
    unpack_time = struct.Struct("<Q").unpack_from
    records: list[tuple[int, bytes]] = []
    prev = 0
    pos = TRACE_HEADER.size
    for i in range(count):
        (emit_ns,) = unpack_time(data, pos)
        if emit_ns < prev:
            raise NonMonotonicTime(
                f"record {i}: emit_time {emit_ns} < previous {prev}")
        records.append((emit_ns, data[pos + 8:pos + TRACE_RECORD_LEN]))
        pos += TRACE_RECORD_LEN
        prev = emit_ns
    return records


def iter_frames(records: Iterable[tuple[int, bytes]]) -> Iterable[bytes]:
    """Frames of a record sequence, in order."""
    for _, frame in records:
        yield frame
