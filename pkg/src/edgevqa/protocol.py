"""Wire formats: media datagram packets and length-prefixed JSON data messages.

Everything in this module is a pure function over bytes; see
docs/wire-format.md for the byte layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable

MAGIC = b"\x45\x50"
PROTOCOL_VERSION = 1
HEADER_LEN = 24
MAX_PAYLOAD = 1200
MIN_MTU_PAYLOAD = 64
FRAME_HEADER_LEN = 5  # width u16, height u16, pixel_format u8

# magic(2) version(1) flags(1) stream_id(2) frame_id(4)
# fragment_index(2) fragment_count(2) capture_ts_us(8) payload_len(2)
_HEADER = struct.Struct(">2sBBHIHHQH")
_FRAME_HEADER = struct.Struct(">HHB")

MESSAGE_TYPES = frozenset({"query", "answer", "control", "transcript", "telemetry"})


class ProtocolError(Exception):
    """Base class for wire-format violations."""


class InvalidPacket(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class MixedFrame(ProtocolError):
    pass


class ConflictingDuplicate(ProtocolError):
    pass


class MalformedJson(ProtocolError):
    pass


class UnknownMessageType(ProtocolError):
    pass


class PixelFormat(IntEnum):
    JPEG = 0
    RAW_RGB8 = 1


@dataclass(frozen=True)
class MediaPacket:
    """One datagram of the media stream; a frame is 1..n of these."""

    stream_id: int
    frame_id: int
    fragment_index: int
    fragment_count: int
    capture_ts_us: int
    payload: bytes
    flags: int = 0

    def validate(self) -> None:
        if not 0 <= self.stream_id <= 0xFFFF:
            raise InvalidPacket(f"stream_id out of range: {self.stream_id}")
        if not 0 <= self.frame_id <= 0xFFFFFFFF:
            raise InvalidPacket(f"frame_id out of range: {self.frame_id}")
        if not 0 <= self.capture_ts_us <= 0xFFFFFFFFFFFFFFFF:
            raise InvalidPacket(f"capture_ts_us out of range: {self.capture_ts_us}")
        if self.fragment_count < 1 or self.fragment_count > 0xFFFF:
            raise InvalidPacket(f"fragment_count out of range: {self.fragment_count}")
        if not 0 <= self.fragment_index < self.fragment_count:
            raise InvalidPacket(
                f"fragment_index {self.fragment_index} not below count {self.fragment_count}"
            )
        if len(self.payload) > MAX_PAYLOAD:
            raise InvalidPacket(f"payload {len(self.payload)} exceeds {MAX_PAYLOAD}")
        # bit0 is reserved for future encryption and the remaining bits are
        # undefined; reject them all so corrupted headers cannot slip through.
        if self.flags != 0:
            raise InvalidPacket(f"reserved flags set: {self.flags:#04x}")


@dataclass(frozen=True)
class FrameEnvelope:
    """One captured RGB frame; the unit handed to/from the media transport."""

    frame_id: int
    capture_ts_us: int
    width: int
    height: int
    pixel_format: PixelFormat
    data: bytes = field(repr=False)

    def validate(self) -> None:
        if self.pixel_format == PixelFormat.RAW_RGB8:
            expected = self.width * self.height * 3
            if len(self.data) != expected:
                raise InvalidPacket(
                    f"RAW_RGB8 size mismatch: {len(self.data)} != {self.width}x{self.height}x3"
                )


def encode_media_packet(p: MediaPacket) -> bytes:
    """Serialize a packet to its fixed 24-byte header plus payload."""
    p.validate()
    header = _HEADER.pack(
        MAGIC,
        PROTOCOL_VERSION,
        p.flags,
        p.stream_id,
        p.frame_id,
        p.fragment_index,
        p.fragment_count,
        p.capture_ts_us,
        len(p.payload),
    )
    return header + p.payload


def decode_media_packet(b: bytes) -> MediaPacket:
    """Parse bytes back into a MediaPacket, rejecting anything inconsistent."""
    if len(b) < 2:
        raise Truncated(f"{len(b)} bytes, need at least the 2-byte magic")
    if b[:2] != MAGIC:
        raise BadMagic(f"magic {b[:2]!r}")
    if len(b) < HEADER_LEN:
        raise Truncated(f"{len(b)} bytes, header needs {HEADER_LEN}")
    (_, version, flags, stream_id, frame_id, frag_index, frag_count, ts, payload_len) = (
        _HEADER.unpack_from(b)
    )
    if version != PROTOCOL_VERSION:
        raise UnsupportedVersion(f"version {version}")
    if payload_len > MAX_PAYLOAD:
        raise InvalidPacket(f"payload_len {payload_len} exceeds {MAX_PAYLOAD}")
    if len(b) < HEADER_LEN + payload_len:
        raise Truncated(f"{len(b)} bytes, expected {HEADER_LEN + payload_len}")
    if len(b) > HEADER_LEN + payload_len:
        raise InvalidPacket(f"{len(b) - HEADER_LEN - payload_len} trailing bytes")
    p = MediaPacket(
        stream_id=stream_id,
        frame_id=frame_id,
        fragment_index=frag_index,
        fragment_count=frag_count,
        capture_ts_us=ts,
        payload=b[HEADER_LEN:],
        flags=flags,
    )
    p.validate()
    return p


def _serialize_frame(f: FrameEnvelope) -> bytes:
    return _FRAME_HEADER.pack(f.width, f.height, int(f.pixel_format)) + f.data


def fragment_frame(
    f: FrameEnvelope, stream_id: int, mtu_payload: int = MAX_PAYLOAD
) -> list[MediaPacket]:
    """Split a frame into MTU-sized packets (at least one, even when empty).

    The first payload starts with a 5-byte frame header (width, height,
    pixel_format) so the receiver can rebuild the envelope.
    """
    if not MIN_MTU_PAYLOAD <= mtu_payload <= MAX_PAYLOAD:
        raise InvalidPacket(f"mtu_payload {mtu_payload} outside [{MIN_MTU_PAYLOAD}, {MAX_PAYLOAD}]")
    f.validate()
    blob = _serialize_frame(f)
    chunks = [blob[i : i + mtu_payload] for i in range(0, len(blob), mtu_payload)] or [b""]
    return [
        MediaPacket(
            stream_id=stream_id,
            frame_id=f.frame_id,
            fragment_index=i,
            fragment_count=len(chunks),
            capture_ts_us=f.capture_ts_us,
            payload=chunk,
        )
        for i, chunk in enumerate(chunks)
    ]


def reassemble_frame(packets: Iterable[MediaPacket]) -> FrameEnvelope | None:
    """Rebuild a frame from its fragments.

    Returns None while fragments are missing. Duplicate fragments with
    identical payloads are ignored; the same index with different bytes is a
    ConflictingDuplicate, and fragments disagreeing on frame metadata are
    rejected rather than assembled into a silently wrong frame.
    """
    by_index: dict[int, MediaPacket] = {}
    first: MediaPacket | None = None
    for p in packets:
        if first is None:
            first = p
        elif p.frame_id != first.frame_id:
            raise MixedFrame(f"frame {p.frame_id} mixed into {first.frame_id}")
        elif (
            p.fragment_count != first.fragment_count
            or p.capture_ts_us != first.capture_ts_us
            or p.stream_id != first.stream_id
        ):
            raise InvalidPacket(f"fragment metadata disagrees within frame {first.frame_id}")
        seen = by_index.get(p.fragment_index)
        if seen is not None:
            if seen.payload != p.payload:
                raise ConflictingDuplicate(
                    f"fragment {p.fragment_index} of frame {p.frame_id} has two payloads"
                )
            continue
        by_index[p.fragment_index] = p
    if first is None:
        return None
    if len(by_index) < first.fragment_count:
        return None
    blob = b"".join(by_index[i].payload for i in range(first.fragment_count))
    if len(blob) < FRAME_HEADER_LEN:
        raise InvalidPacket(f"reassembled frame of {len(blob)} bytes has no frame header")
    width, height, pf = _FRAME_HEADER.unpack_from(blob)
    try:
        pixel_format = PixelFormat(pf)
    except ValueError:
        raise InvalidPacket(f"unknown pixel_format {pf}") from None
    frame = FrameEnvelope(
        frame_id=first.frame_id,
        capture_ts_us=first.capture_ts_us,
        width=width,
        height=height,
        pixel_format=pixel_format,
        data=blob[FRAME_HEADER_LEN:],
    )
    frame.validate()
    return frame


def encode_data_message(body: dict) -> bytes:
    """Frame a JSON object as 4-byte big-endian length prefix + UTF-8 body."""
    mtype = body.get("type") if isinstance(body, dict) else None
    if not isinstance(body, dict) or mtype is None:
        raise MalformedJson("body must be a JSON object with a 'type' field")
    if mtype not in MESSAGE_TYPES:
        raise UnknownMessageType(f"type {mtype!r}")
    raw = json.dumps(body, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def decode_data_message(b: bytes) -> dict:
    """Parse one length-prefixed message occupying the whole buffer."""
    if len(b) < 4:
        raise Truncated(f"{len(b)} bytes, need 4-byte length prefix")
    (length,) = struct.unpack_from(">I", b)
    if len(b) < 4 + length:
        raise Truncated(f"{len(b)} bytes, prefix promises {4 + length}")
    if len(b) > 4 + length:
        raise InvalidPacket(f"{len(b) - 4 - length} trailing bytes")
    return parse_message_body(b[4:])


def parse_message_body(raw: bytes) -> dict:
    """Validate a message body: UTF-8 JSON object with a recognized type."""
    try:
        body = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedJson(str(e)) from None
    if not isinstance(body, dict) or "type" not in body:
        raise MalformedJson("body is not a JSON object with a 'type' field")
    if body["type"] not in MESSAGE_TYPES:
        raise UnknownMessageType(f"type {body['type']!r}")
    return body
