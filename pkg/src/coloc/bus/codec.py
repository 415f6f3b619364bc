"""Binary "location data" frames.

Layout (little-endian)::

    magic  'L' 'D'         2 bytes
    version                1 byte   (= 1)
    tag_id                 u16
    epoch_micros           u64
    count                  u8       (>= 1)
    count x entry          anchor_id u16, distance_mm u32, quality u8
    crc16                  u16      CRC-16/CCITT-FALSE over all preceding bytes
"""
from __future__ import annotations

import binascii
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..geometry import RangingPair
from ..twr import RangeMeasurement

MAGIC = b"LD"
VERSION = 1
HEADER = struct.Struct("<2sBHQB")
ENTRY = struct.Struct("<HIB")
CRC = struct.Struct("<H")
MAX_ENTRIES = 255
MAX_FRAME = HEADER.size + MAX_ENTRIES * ENTRY.size + CRC.size


class FrameError(ValueError):
    pass


class EncodingError(FrameError):
    pass


class FramingError(FrameError):
    """Bytes at the read position do not start a frame."""


class IntegrityError(FrameError):
    """CRC mismatch."""


class NeedMoreBytes(FrameError):
    def __init__(self, needed: int):
        super().__init__(f"need {needed} more bytes")
        self.needed = needed


def crc16_ccitt_false(data: bytes) -> int:
    # crc_hqx is the MSB-first 0x1021 CRC; seeding with 0xFFFF gives CCITT-FALSE
    return binascii.crc_hqx(data, 0xFFFF)


@dataclass(frozen=True)
class FrameEntry:
    anchor_id: int
    distance_mm: int
    quality: int


@dataclass(frozen=True)
class WireFrame:
    tag_id: int
    epoch_micros: int
    entries: tuple[FrameEntry, ...]

    @property
    def count(self) -> int:
        return len(self.entries)


def frame_length(count: int) -> int:
    return HEADER.size + count * ENTRY.size + CRC.size


def encode_frame(tag_id: int, epoch_micros: int, entries: Sequence[FrameEntry | tuple]) -> bytes:
    entries = [e if isinstance(e, FrameEntry) else FrameEntry(*e) for e in entries]
    if not 1 <= len(entries) <= MAX_ENTRIES:
        raise EncodingError(f"entry count {len(entries)} outside 1..{MAX_ENTRIES}")
    try:
        body = HEADER.pack(MAGIC, VERSION, tag_id, epoch_micros, len(entries))
        body += b"".join(ENTRY.pack(e.anchor_id, e.distance_mm, e.quality) for e in entries)
    except struct.error as exc:
        raise EncodingError(str(exc)) from None
    return body + CRC.pack(crc16_ccitt_false(body))


def encode(frame: WireFrame) -> bytes:
    return encode_frame(frame.tag_id, frame.epoch_micros, frame.entries)


def decode_frame(buf: bytes | bytearray | memoryview, offset: int = 0) -> tuple[WireFrame, int]:
    """Decode one frame starting exactly at ``offset``.

    Returns ``(frame, bytes_consumed)``. Raises :class:`NeedMoreBytes`,
    :class:`FramingError` or :class:`IntegrityError`.
    """
    view = memoryview(buf)[offset:]
    if len(view) < 2:
        if len(view) == 1 and view[0] != MAGIC[0]:
            raise FramingError("bad magic")
        raise NeedMoreBytes(HEADER.size - len(view))
    if bytes(view[:2]) != MAGIC:
        raise FramingError("bad magic")
    if len(view) < HEADER.size:
        raise NeedMoreBytes(HEADER.size - len(view))
    _magic, version, tag_id, epoch_micros, count = HEADER.unpack_from(view)
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if count == 0:
        raise FramingError("zero entry count")
    total = frame_length(count)
    if len(view) < total:
        raise NeedMoreBytes(total - len(view))
    body = view[: total - CRC.size]
    (crc,) = CRC.unpack_from(view, total - CRC.size)
    if crc != crc16_ccitt_false(bytes(body)):
        raise IntegrityError(f"crc mismatch (tag {tag_id}, epoch {epoch_micros})")
    entries = tuple(
        FrameEntry(*ENTRY.unpack_from(view, HEADER.size + i * ENTRY.size)) for i in range(count)
    )
    return WireFrame(tag_id, epoch_micros, entries), total


class StreamDecoder:
    """Incremental decoder with byte-wise resynchronisation.

    ``resync_bytes`` counts bytes skipped while hunting for a frame start;
    ``crc_errors`` counts frames dropped on a checksum mismatch (their first
    byte is skipped and the scan resumes).
    """

    def __init__(self):
        self._buf = bytearray()
        self.resync_bytes = 0
        self.crc_errors = 0
        self.frames_decoded = 0

    def feed(self, data: bytes) -> list[WireFrame]:
        self._buf += data
        out = []
        pos = 0
        while pos < len(self._buf):
            try:
                frame, used = decode_frame(self._buf, pos)
            except NeedMoreBytes:
                break
            except IntegrityError:
                self.crc_errors += 1
                pos += 1
                continue
            except FramingError:
                self.resync_bytes += 1
                pos += 1
                continue
            out.append(frame)
            pos += used
        del self._buf[:pos]
        self.frames_decoded += len(out)
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def to_millimetres(distance_m: float) -> int:
    mm = int(distance_m * 1000.0 + 0.5)
    return max(mm, 0)


def measurements_to_frame(tag_id: int, epoch_time: float, measurements: Iterable[RangeMeasurement]) -> WireFrame:
    entries = []
    for m in measurements:
        if m.pair.tag != tag_id:
            raise EncodingError(f"measurement for tag {m.pair.tag} in frame of tag {tag_id}")
        entries.append(FrameEntry(m.pair.anchor, to_millimetres(m.distance), m.quality))
    return WireFrame(tag_id, int(round(epoch_time * 1e6)), tuple(entries))


def frame_to_measurements(frame: WireFrame, first_sequence: int = 0) -> list[RangeMeasurement]:
    t = frame.epoch_micros / 1e6
    return [
        RangeMeasurement(RangingPair(frame.tag_id, e.anchor_id), e.distance_mm / 1000.0, t,
                         first_sequence + i, e.quality)
        for i, e in enumerate(frame.entries)
    ]
