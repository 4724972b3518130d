"""Runtime media/data channels: jitter buffer, adaptive bitrate, sockets.

Media rides UDP datagrams in the MediaPacket format; everything else rides a
TCP stream carrying length-prefixed DataMessages. Channels come into being
through a tiny hello handshake (see dial_peer / PeerListener) that also
exchanges each side's UDP media port.
"""

from __future__ import annotations

import asyncio
import io
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from edgevqa.clock import SYSTEM_CLOCK
from edgevqa.protocol import (
    MAX_PAYLOAD,
    FrameEnvelope,
    MediaPacket,
    PixelFormat,
    ProtocolError,
    decode_media_packet,
    encode_data_message,
    encode_media_packet,
    fragment_frame,
    parse_message_body,
    reassemble_frame,
)

logger = logging.getLogger(__name__)

JPEG_QUALITY_LADDER = (90, 75, 60, 45, 30)


class TransportError(Exception):
    pass


class ChannelClosed(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


class InvalidReport(TransportError):
    pass


class HandshakeError(TransportError):
    pass


@dataclass
class JitterStats:
    frames_released: int = 0
    frames_dropped: int = 0
    late_packets: int = 0
    duplicate_packets: int = 0
    conflicting_packets: int = 0
    corrupt_frames: int = 0
    received_packets: int = 0
    lost_fragments: int = 0


@dataclass
class _PartialFrame:
    fragment_count: int
    first_arrival_us: int
    fragments: dict[int, MediaPacket] = field(default_factory=dict)


class JitterBuffer:
    """Reorders fragments into frames, releasing them in strict frame order.

    A frame releases the moment it completes if it directly follows the last
    consumed frame_id (streams start at frame 0); otherwise it waits until
    its deadline (first fragment arrival + target_delay_ms) so delayed
    predecessors get their chance. Incomplete frames are dropped at their
    deadline or when they fall out of the reorder window; anything older
    than what was already consumed is counted late and never released.
    """

    def __init__(self, target_delay_ms: float = 50.0, reorder_window: int = 16):
        self.target_delay_ms = target_delay_ms
        self.reorder_window = reorder_window
        self.stats = JitterStats()
        self._partials: dict[int, _PartialFrame] = {}
        self._floor = -1  # highest frame_id released or dropped
        self._newest_seen = -1

    def push(self, packet: MediaPacket, arrival_ts_us: int) -> list[FrameEnvelope]:
        self.stats.received_packets += 1
        fid = packet.frame_id
        self._newest_seen = max(self._newest_seen, fid)
        if fid <= self._floor:
            self.stats.late_packets += 1
            return self._drain(arrival_ts_us)
        part = self._partials.get(fid)
        if part is None:
            part = _PartialFrame(packet.fragment_count, arrival_ts_us)
            self._partials[fid] = part
        seen = part.fragments.get(packet.fragment_index)
        if seen is not None:
            if seen.payload == packet.payload:
                self.stats.duplicate_packets += 1
            else:
                self.stats.conflicting_packets += 1  # keep first arrival
        else:
            part.fragments[packet.fragment_index] = packet
        return self._drain(arrival_ts_us)

    def poll(self, now_us: int) -> list[FrameEnvelope]:
        """Flush frames whose deadlines passed while no packets arrived."""
        return self._drain(now_us)

    def pending(self) -> int:
        return len(self._partials)

    def _drain(self, now_us: int) -> list[FrameEnvelope]:
        released: list[FrameEnvelope] = []
        while self._partials:
            fid = min(self._partials)
            part = self._partials[fid]
            expired = now_us >= part.first_arrival_us + int(self.target_delay_ms * 1000)
            out_of_window = self._newest_seen - fid > self.reorder_window
            complete = len(part.fragments) == part.fragment_count
            if complete and (fid == self._floor + 1 or expired or out_of_window):
                del self._partials[fid]
                self._floor = fid
                try:
                    frame = reassemble_frame(part.fragments.values())
                except ProtocolError:
                    self.stats.corrupt_frames += 1
                    self.stats.frames_dropped += 1
                    continue
                assert frame is not None
                self.stats.frames_released += 1
                released.append(frame)
            elif not complete and (expired or out_of_window):
                del self._partials[fid]
                self._floor = fid
                self.stats.frames_dropped += 1
                self.stats.lost_fragments += part.fragment_count - len(part.fragments)
            else:
                break
        return released


class BitrateController:
    """AIMD sender rate: multiplicative decrease on loss, additive otherwise."""

    def __init__(
        self,
        rate_kbps: float = 2000.0,
        min_kbps: float = 100.0,
        max_kbps: float = 8000.0,
        additive_step_kbps: float = 50.0,
        multiplicative_decrease: float = 0.85,
    ):
        self.min_kbps = min_kbps
        self.max_kbps = max_kbps
        self.additive_step_kbps = additive_step_kbps
        self.multiplicative_decrease = multiplicative_decrease
        self.rate_kbps = min(max(rate_kbps, min_kbps), max_kbps)

    def on_feedback(self, sent: int, lost: int, interval_ms: float) -> float:
        if lost < 0 or sent < lost:
            raise InvalidReport(f"report sent={sent} lost={lost}")
        if lost > 0:
            self.rate_kbps = max(self.min_kbps, self.rate_kbps * self.multiplicative_decrease)
        else:
            self.rate_kbps = min(
                self.max_kbps,
                self.rate_kbps + self.additive_step_kbps * (interval_ms / 1000.0),
            )
        return self.rate_kbps


class DataChannel:
    """Reliable, ordered DataMessage stream over a TCP connection."""

    def __init__(
        self,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
        remote_peer_id: str | None = None,
    ):
        self._reader = reader
        self._writer = writer
        self._send_lock = asyncio.Lock()
        self._closed = False
        self.remote_peer_id = remote_peer_id

    @property
    def closed(self) -> bool:
        return self._closed

    async def send(self, body: dict) -> None:
        wire = encode_data_message(body)
        async with self._send_lock:
            if self._closed:
                raise ChannelClosed("send on closed channel")
            try:
                self._writer.write(wire)
                await self._writer.drain()
            except (ConnectionError, RuntimeError) as e:
                self._closed = True
                raise ChannelClosed(str(e)) from None

    async def recv(self) -> dict:
        if self._closed:
            raise ChannelClosed("recv on closed channel")
        try:
            prefix = await self._reader.readexactly(4)
            length = int.from_bytes(prefix, "big")
            raw = await self._reader.readexactly(length)
        except (asyncio.IncompleteReadError, ConnectionError):
            self._closed = True
            raise ChannelClosed("peer closed") from None
        return parse_message_body(raw)

    async def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        try:
            self._writer.close()
            await self._writer.wait_closed()
        except (ConnectionError, RuntimeError):
            pass


class UdpEndpoint:
    """Thin wrapper over an asyncio datagram transport bound to a local port."""

    def __init__(self, transport: asyncio.DatagramTransport, protocol: "_DatagramRelay"):
        self._transport = transport
        self._protocol = protocol

    @classmethod
    async def create(cls, host: str = "127.0.0.1", port: int = 0) -> "UdpEndpoint":
        loop = asyncio.get_running_loop()
        transport, protocol = await loop.create_datagram_endpoint(
            _DatagramRelay, local_addr=(host, port)
        )
        return cls(transport, protocol)

    @property
    def port(self) -> int:
        return self._transport.get_extra_info("sockname")[1]

    def set_receiver(self, cb: Callable[[bytes, tuple], None]) -> None:
        self._protocol.on_datagram = cb

    def sendto(self, data: bytes, addr: tuple[str, int]) -> None:
        self._transport.sendto(data, addr)

    def close(self) -> None:
        self._transport.close()


class _DatagramRelay(asyncio.DatagramProtocol):
    def __init__(self):
        self.on_datagram: Callable[[bytes, tuple], None] | None = None

    def datagram_received(self, data: bytes, addr: tuple) -> None:
        if self.on_datagram is not None:
            self.on_datagram(data, addr)


@dataclass
class SendReport:
    packets: int
    bytes: int
    jpeg_quality: int | None = None


class MediaSender:
    """Sends frames as fragmented datagrams within the bitrate budget.

    When the encoded frame exceeds the per-frame byte budget
    (rate_kbps * 125 / fps), JPEG frames are re-encoded down the quality
    ladder; a frame still over budget at the lowest rung (or any
    non-requantizable frame over budget) is skipped with FrameTooLarge.
    """

    def __init__(
        self,
        udp: UdpEndpoint,
        remote_addr: tuple[str, int],
        stream_id: int,
        *,
        mtu_payload: int = MAX_PAYLOAD,
        fps: float = 10.0,
        controller: BitrateController | None = None,
    ):
        self.udp = udp
        self.remote_addr = remote_addr
        self.stream_id = stream_id
        self.mtu_payload = mtu_payload
        self.fps = fps
        self.controller = controller or BitrateController()
        self.frames_sent = 0
        self.frames_skipped = 0
        self.packets_sent = 0
        self.bytes_sent = 0
        self._interval_packets = 0
        self._closed = False

    def frame_budget_bytes(self) -> int:
        return int(self.controller.rate_kbps * 125.0 / self.fps)

    def send_frame(self, f: FrameEnvelope) -> SendReport:
        if self._closed:
            raise ChannelClosed("media sender closed")
        budget = self.frame_budget_bytes()
        data, quality = f.data, None
        if len(data) > budget:
            if f.pixel_format != PixelFormat.JPEG:
                self.frames_skipped += 1
                raise FrameTooLarge(f"{len(data)} bytes over budget {budget}, not JPEG")
            data, quality = _requantize_jpeg(data, budget)
            if data is None:
                self.frames_skipped += 1
                raise FrameTooLarge(f"over budget {budget} at minimum quality")
        packets = fragment_frame(replace(f, data=data), self.stream_id, self.mtu_payload)
        total = 0
        for p in packets:
            wire = encode_media_packet(p)
            self.udp.sendto(wire, self.remote_addr)
            total += len(wire)
        self.frames_sent += 1
        self.packets_sent += len(packets)
        self._interval_packets += len(packets)
        self.bytes_sent += total
        return SendReport(packets=len(packets), bytes=total, jpeg_quality=quality)

    def take_interval_packets(self) -> int:
        n, self._interval_packets = self._interval_packets, 0
        return n

    def close(self) -> None:
        self._closed = True


def _requantize_jpeg(data: bytes, budget: int) -> tuple[bytes | None, int | None]:
    from PIL import Image

    try:
        img = Image.open(io.BytesIO(data)).convert("RGB")
    except Exception:
        return None, None
    for q in JPEG_QUALITY_LADDER:
        out = io.BytesIO()
        img.save(out, format="JPEG", quality=q)
        if out.tell() <= budget:
            return out.getvalue(), q
    return None, None


@dataclass
class ReceiverReport:
    received: int
    lost: int
    interval_ms: float


class MediaReceiver:
    """Demuxes inbound datagrams per stream into jitter buffers."""

    def __init__(self, udp: UdpEndpoint, clock=SYSTEM_CLOCK, poll_interval_ms: float = 10.0):
        self.udp = udp
        self.clock = clock
        self.poll_interval_ms = poll_interval_ms
        self.bad_packets = 0
        self.unknown_stream_packets = 0
        self._streams: dict[int, dict] = {}
        self._poll_task: asyncio.Task | None = None
        udp.set_receiver(self._on_datagram)

    def register_stream(
        self,
        stream_id: int,
        on_frame: Callable[[FrameEnvelope], None],
        *,
        target_delay_ms: float = 50.0,
        reorder_window: int = 16,
    ) -> JitterBuffer:
        buf = JitterBuffer(target_delay_ms=target_delay_ms, reorder_window=reorder_window)
        self._streams[stream_id] = {
            "jitter": buf,
            "on_frame": on_frame,
            "last_received": 0,
            "last_lost": 0,
            "last_report_us": self.clock.now_us(),
        }
        if self._poll_task is None or self._poll_task.done():
            self._poll_task = asyncio.ensure_future(self._poll_loop())
        return buf

    def unregister_stream(self, stream_id: int) -> None:
        self._streams.pop(stream_id, None)

    def _on_datagram(self, data: bytes, addr: tuple) -> None:
        try:
            packet = decode_media_packet(data)
        except ProtocolError:
            self.bad_packets += 1
            return
        stream = self._streams.get(packet.stream_id)
        if stream is None:
            self.unknown_stream_packets += 1
            return
        for frame in stream["jitter"].push(packet, self.clock.now_us()):
            stream["on_frame"](frame)

    async def _poll_loop(self) -> None:
        while self._streams:
            await asyncio.sleep(self.poll_interval_ms / 1000.0)
            now = self.clock.now_us()
            for stream in list(self._streams.values()):
                for frame in stream["jitter"].poll(now):
                    stream["on_frame"](frame)

    def take_receiver_report(self, stream_id: int) -> ReceiverReport:
        """Per-interval delivery stats, for telemetry back to the sender."""
        stream = self._streams[stream_id]
        stats: JitterStats = stream["jitter"].stats
        now = self.clock.now_us()
        received = stats.received_packets - stream["last_received"]
        lost = stats.lost_fragments - stream["last_lost"]
        interval_ms = (now - stream["last_report_us"]) / 1000.0
        stream["last_received"] = stats.received_packets
        stream["last_lost"] = stats.lost_fragments
        stream["last_report_us"] = now
        return ReceiverReport(received=received, lost=lost, interval_ms=interval_ms)

    def close(self) -> None:
        self._streams.clear()
        if self._poll_task is not None:
            self._poll_task.cancel()
        self.udp.close()


async def dial_peer(
    candidates: Iterable[tuple[str, int]],
    *,
    session_id: str,
    my_peer_id: str,
    my_udp_port: int,
    connect_timeout: float = 3.0,
) -> tuple[DataChannel, tuple[str, int]]:
    """Probe candidate (host, port) pairs in the given order.

    Returns the established data channel plus the remote media address
    (candidate host, UDP port advertised in the hello_ack).
    """
    last_error: Exception | None = None
    for host, port in candidates:
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(host, port), connect_timeout
            )
        except (OSError, asyncio.TimeoutError) as e:
            last_error = e
            continue
        channel = DataChannel(reader, writer)
        try:
            await channel.send(
                {
                    "type": "control",
                    "action": "hello",
                    "session_id": session_id,
                    "peer": my_peer_id,
                    "udp_port": my_udp_port,
                }
            )
            ack = await asyncio.wait_for(channel.recv(), connect_timeout)
        except (ChannelClosed, ProtocolError, asyncio.TimeoutError) as e:
            last_error = e
            await channel.close()
            continue
        if ack.get("action") != "hello_ack" or ack.get("session_id") != session_id:
            await channel.close()
            last_error = HandshakeError(f"unexpected handshake reply: {ack}")
            continue
        channel.remote_peer_id = ack.get("peer")
        return channel, (host, int(ack["udp_port"]))
    raise HandshakeError(f"no candidate accepted the handshake: {last_error}")


@dataclass
class IncomingPeer:
    session_id: str
    remote_peer_id: str
    channel: DataChannel
    remote_host: str
    remote_udp_port: int

    @property
    def remote_media_addr(self) -> tuple[str, int]:
        return (self.remote_host, self.remote_udp_port)


class PeerListener:
    """Accepts handshake dials for sessions registered ahead of time."""

    def __init__(self, host: str = "127.0.0.1"):
        self._host = host
        self._server: asyncio.base_events.Server | None = None
        self._expected: dict[str, dict] = {}

    @classmethod
    async def create(cls, host: str = "127.0.0.1", port: int = 0) -> "PeerListener":
        listener = cls(host)
        listener._server = await asyncio.start_server(listener._on_connection, host, port)
        return listener

    @property
    def port(self) -> int:
        return self._server.sockets[0].getsockname()[1]

    def expect_session(
        self, session_id: str, my_peer_id: str, my_udp_port: int
    ) -> "asyncio.Future[IncomingPeer]":
        fut: asyncio.Future[IncomingPeer] = asyncio.get_running_loop().create_future()
        self._expected[session_id] = {
            "peer_id": my_peer_id,
            "udp_port": my_udp_port,
            "future": fut,
        }
        return fut

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        channel = DataChannel(reader, writer)
        try:
            hello = await asyncio.wait_for(channel.recv(), 5.0)
        except (ChannelClosed, ProtocolError, asyncio.TimeoutError):
            await channel.close()
            return
        session_id = hello.get("session_id")
        entry = self._expected.pop(session_id, None) if hello.get("action") == "hello" else None
        if entry is None:
            try:
                await channel.send(
                    {"type": "control", "action": "error", "error": "UnknownSession"}
                )
            except ChannelClosed:
                pass
            await channel.close()
            return
        await channel.send(
            {
                "type": "control",
                "action": "hello_ack",
                "session_id": session_id,
                "peer": entry["peer_id"],
                "udp_port": entry["udp_port"],
            }
        )
        channel.remote_peer_id = hello.get("peer")
        peer = IncomingPeer(
            session_id=session_id,
            remote_peer_id=hello.get("peer", ""),
            channel=channel,
            remote_host=writer.get_extra_info("peername")[0],
            remote_udp_port=int(hello.get("udp_port", 0)),
        )
        if not entry["future"].done():
            entry["future"].set_result(peer)

    def close(self) -> None:
        self._server.close()
