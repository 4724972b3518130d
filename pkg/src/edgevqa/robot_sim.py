"""Dataset-replay robot: streams frames, issues queries, collects answers.

Stands in for the physical robot: negotiates a session through signaling,
sends each item's image over the media channel, waits for the gateway's
frame ack so the query is bound to that exact frame, then sends the query
and records capture/response timestamps on the shared benchmark clock.
"""

from __future__ import annotations

import asyncio
import io
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from edgevqa.clock import SYSTEM_CLOCK
from edgevqa.dataset import DatasetItem, DatasetManifest
from edgevqa.envelopes import AnswerEnvelope, QueryEnvelope
from edgevqa.protocol import FrameEnvelope, PixelFormat
from edgevqa.signaling import Candidate, SignalingClient, SignalingError, SignalingFailed
from edgevqa.transport import (
    BitrateController,
    ChannelClosed,
    DataChannel,
    FrameTooLarge,
    InvalidReport,
    MediaSender,
    PeerListener,
    UdpEndpoint,
)
from edgevqa.trace import LatencyTrace

logger = logging.getLogger(__name__)


class SessionLost(Exception):
    pass


@dataclass
class ReplayPlan:
    manifest: DatasetManifest
    fps: float = 10.0
    schedule: str = "per_frame"  # per_frame | paced:<interval_ms> | burst:<n>
    answer_timeout_s: float = 60.0
    ack_timeout_s: float = 10.0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        parse_schedule(self.schedule)


def parse_schedule(schedule: str) -> tuple[str, float | None]:
    if schedule == "per_frame":
        return "per_frame", None
    kind, _, arg = schedule.partition(":")
    if kind == "paced":
        return "paced", float(arg)
    if kind == "burst":
        return "burst", float(arg)
    raise ValueError(f"unknown schedule {schedule!r}")


@dataclass
class ReplayOutcome:
    item_id: str
    query_id: str
    answer: AnswerEnvelope | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.answer is not None and self.answer.ok


@dataclass
class ReplayResult:
    outcomes: list[ReplayOutcome]
    partial: bool = False
    frames_sent: int = 0
    final_bitrate_kbps: float = 0.0


class _RobotSession:
    """One negotiated media+data session from the robot's side."""

    def __init__(self, session_id: str, channel: DataChannel, sender: MediaSender, stream_params: dict):
        self.session_id = session_id
        self.channel = channel
        self.sender = sender
        self.stream_params = stream_params
        self.answer_futures: dict[str, asyncio.Future] = {}
        self.ack_futures: dict[int, asyncio.Future] = {}
        self.controller = sender.controller
        self.lost = asyncio.Event()
        self._recv_task = asyncio.ensure_future(self._recv_loop())

    async def _recv_loop(self) -> None:
        try:
            while True:
                msg = await self.channel.recv()
                if msg.get("type") == "answer":
                    fut = self.answer_futures.pop(msg.get("query_id"), None)
                    if fut is not None and not fut.done():
                        fut.set_result(msg)
                elif msg.get("type") == "telemetry":
                    if msg.get("event") == "frame_ack":
                        fut = self.ack_futures.pop(int(msg.get("frame_id", -1)), None)
                        if fut is not None and not fut.done():
                            fut.set_result(msg)
                    elif msg.get("event") == "receiver_report":
                        sent = self.sender.take_interval_packets()
                        lost = int(msg.get("lost", 0))
                        try:
                            self.controller.on_feedback(
                                max(sent, lost), lost, float(msg.get("interval_ms", 1000.0))
                            )
                        except InvalidReport:
                            pass
        except ChannelClosed:
            self.lost.set()
            for fut in list(self.answer_futures.values()) + list(self.ack_futures.values()):
                if not fut.done():
                    fut.set_exception(SessionLost("data channel closed"))

    async def close(self) -> None:
        self._recv_task.cancel()
        await self.channel.close()


class RobotSimulator:
    def __init__(
        self,
        signal_host: str,
        signal_port: int,
        *,
        peer_id: str = "robot",
        gateway_peer: str = "gateway",
        media_params: dict | None = None,
        clock=SYSTEM_CLOCK,
    ):
        self.signal_host = signal_host
        self.signal_port = signal_port
        self.peer_id = peer_id
        self.gateway_peer = gateway_peer
        self.media_params = media_params
        self.clock = clock
        self.signaling: SignalingClient | None = None
        self.listener: PeerListener | None = None
        self.udp: UdpEndpoint | None = None
        self._frame_counter = 0

    async def connect(self) -> None:
        self.signaling = SignalingClient(self.signal_host, self.signal_port, self.peer_id)
        await self.signaling.connect()
        self.listener = await PeerListener.create()
        self.udp = await UdpEndpoint.create()

    async def close(self) -> None:
        if self.signaling is not None:
            await self.signaling.close()
        if self.listener is not None:
            self.listener.close()
        if self.udp is not None:
            self.udp.close()

    async def open_session(
        self, *, fps: float = 10.0, media_params: dict | None = None, timeout: float = 10.0
    ) -> _RobotSession:
        """Full negotiation: offer, candidate, handshake accept, CONNECTED."""
        assert self.signaling and self.listener and self.udp
        if media_params is None:
            media_params = self.media_params
        try:
            created = await self.signaling.create_session(self.gateway_peer, media_params)
            session_id = created["session_id"]
            accept_fut = self.listener.expect_session(session_id, self.peer_id, self.udp.port)
            await self.signaling.offer(session_id, {"pixel_formats": ["jpeg", "raw_rgb8"]})
            answer = await self.signaling.wait_for("answer_received", session_id, timeout)
            await self.signaling.add_candidate(
                session_id, Candidate("127.0.0.1", self.listener.port, priority=100)
            )
            incoming = await asyncio.wait_for(accept_fut, timeout)
            await self.signaling.mark_connected(session_id)
        except (SignalingError, asyncio.TimeoutError) as e:
            raise SignalingFailed(f"session setup failed: {e}") from None
        stream_params = answer.get("body", {})
        media = dict(created.get("media_params") or {})
        controller = BitrateController(rate_kbps=media.get("initial_bitrate_kbps", 2000))
        sender = MediaSender(
            self.udp,
            incoming.remote_media_addr,
            stream_id=int(stream_params.get("stream_id", 1)),
            mtu_payload=int(media.get("mtu_payload", 1200)),
            fps=fps,
            controller=controller,
        )
        self._frame_counter = 0
        return _RobotSession(session_id, incoming.channel, sender, stream_params)

    def _frame_for_item(self, item: DatasetItem) -> FrameEnvelope:
        from PIL import Image

        data = item.image_bytes()
        try:
            with Image.open(io.BytesIO(data)) as img:
                width, height = img.size
        except Exception:
            width = height = 0
        frame = FrameEnvelope(
            frame_id=self._frame_counter,
            capture_ts_us=self.clock.now_us(),
            width=width,
            height=height,
            pixel_format=PixelFormat.JPEG,
            data=data,
        )
        self._frame_counter += 1
        return frame

    async def _send_item_frame(self, session: _RobotSession, item: DatasetItem) -> FrameEnvelope:
        frame = self._frame_for_item(item)
        ack_fut: asyncio.Future = asyncio.get_running_loop().create_future()
        session.ack_futures[frame.frame_id] = ack_fut
        try:
            session.sender.send_frame(frame)
        except FrameTooLarge:
            session.ack_futures.pop(frame.frame_id, None)
            raise
        return frame

    async def _await_ack(self, session: _RobotSession, frame: FrameEnvelope, timeout: float) -> None:
        fut = session.ack_futures.get(frame.frame_id)
        if fut is None:
            return
        try:
            await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            raise SessionLost(f"no frame ack for frame {frame.frame_id}") from None

    async def _issue_query(
        self, session: _RobotSession, item: DatasetItem, frame: FrameEnvelope
    ) -> asyncio.Future:
        query = QueryEnvelope(
            query_id=f"q-{item.id}",
            session_id=session.session_id,
            text=item.question,
            qtype=item.qtype,
            choices=item.choices,
            frame_ref=frame.frame_id,
            category=item.category,
            issued_ts_us=self.clock.now_us(),
            item_id=item.id,
            tx_start_ts_us=frame.capture_ts_us,
        )
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        session.answer_futures[query.query_id] = fut
        try:
            await session.channel.send(query.to_json())
        except ChannelClosed:
            session.answer_futures.pop(query.query_id, None)
            raise SessionLost("data channel closed while sending query") from None
        return fut

    def _complete_answer(self, msg: dict) -> AnswerEnvelope:
        answer = AnswerEnvelope.from_json(msg)
        if answer.trace is not None:
            answer.trace = replace(answer.trace, response_received_ts=self.clock.now_us())
        return answer

    async def run_replay(self, plan: ReplayPlan) -> ReplayResult:
        """Replay every item once; every item ends in exactly one outcome.

        Signaling failures at session setup propagate; a session lost mid-run
        is retried once with a fresh session, after which the run aborts with
        the remaining items flagged.
        """
        items = list(plan.manifest.items)
        outcomes: list[ReplayOutcome] = []
        partial = False
        frames_sent = 0
        session = await self.open_session(fps=plan.fps)
        retried = False
        while len(outcomes) < len(items):
            try:
                frames_sent += await self._replay_from(session, items, plan, outcomes)
            except SessionLost as e:
                await session.close()
                if retried:
                    logger.warning("aborting replay after repeated session loss: %s", e)
                    settled = {o.item_id for o in outcomes}
                    for item in items:
                        if item.id not in settled:
                            outcomes.append(
                                ReplayOutcome(item.id, f"q-{item.id}", error=f"SessionLost: {e}")
                            )
                    partial = True
                    break
                retried = True
                logger.warning("session lost (%s), retrying once", e)
                session = await self.open_session(fps=plan.fps)
        final_rate = session.controller.rate_kbps
        await session.close()
        return ReplayResult(
            outcomes=outcomes, partial=partial, frames_sent=frames_sent, final_bitrate_kbps=final_rate
        )

    async def _replay_from(
        self,
        session: _RobotSession,
        items: list[DatasetItem],
        plan: ReplayPlan,
        outcomes: list[ReplayOutcome],
    ) -> int:
        kind, arg = parse_schedule(plan.schedule)
        frames = 0
        loop = asyncio.get_event_loop()
        frame_interval = 1.0 / plan.fps
        item_interval = (arg or 0.0) / 1000.0 if kind == "paced" else frame_interval
        next_tick = loop.time()
        pending: list[tuple[DatasetItem, asyncio.Future]] = []

        async def settle(item: DatasetItem, fut: asyncio.Future) -> None:
            try:
                msg = await asyncio.wait_for(fut, plan.answer_timeout_s)
                outcomes.append(ReplayOutcome(item.id, f"q-{item.id}", answer=self._complete_answer(msg)))
            except asyncio.TimeoutError:
                session.answer_futures.pop(f"q-{item.id}", None)
                outcomes.append(ReplayOutcome(item.id, f"q-{item.id}", error="AnswerTimeout"))

        settled = {o.item_id for o in outcomes}
        for item in items:
            if item.id in settled:
                continue
            wait = next_tick - loop.time()
            if wait > 0:
                await asyncio.sleep(wait)
            next_tick = max(next_tick + item_interval, loop.time())
            try:
                frame = await self._send_item_frame(session, item)
                frames += 1
                await self._await_ack(session, frame, plan.ack_timeout_s)
                fut = await self._issue_query(session, item, frame)
            except FrameTooLarge as e:
                outcomes.append(
                    ReplayOutcome(item.id, f"q-{item.id}", error=f"FrameTooLarge: {e}")
                )
                continue
            if kind == "per_frame":
                await settle(item, fut)
            else:
                pending.append((item, fut))
                if kind == "burst" and len(pending) >= int(arg or 1):
                    for p_item, p_fut in pending:
                        await settle(p_item, p_fut)
                    pending.clear()
        for p_item, p_fut in pending:
            await settle(p_item, p_fut)
        return frames

    async def stream_frames(
        self, session: _RobotSession, image: bytes, duration_s: float, fps: float
    ) -> int:
        """Frames only, no queries; returns how many frames were sent."""
        loop = asyncio.get_event_loop()
        deadline = loop.time() + duration_s
        interval = 1.0 / fps
        sent = 0
        next_tick = loop.time()
        while loop.time() < deadline:
            frame = FrameEnvelope(
                frame_id=self._frame_counter,
                capture_ts_us=self.clock.now_us(),
                width=0,
                height=0,
                pixel_format=PixelFormat.JPEG,
                data=image,
            )
            self._frame_counter += 1
            try:
                session.sender.send_frame(frame)
            except FrameTooLarge:
                pass
            else:
                sent += 1
            next_tick += interval
            await asyncio.sleep(max(0.0, next_tick - loop.time()))
        return sent


def write_predictions(result: ReplayResult, preds_path: str | Path, traces_path: str | Path | None = None) -> Path:
    """predictions JSONL: one deterministic line per item ({id, pred, trace}).

    Wall-clock traces vary run to run, so they go to a separate traces file
    excluded from the byte-identical reproducibility guarantee.
    """
    preds_path = Path(preds_path)
    with preds_path.open("w", encoding="utf-8") as fh:
        for outcome in result.outcomes:
            line: dict = {"id": outcome.item_id, "query_id": outcome.query_id}
            if outcome.answer is not None and outcome.answer.ok:
                line["pred"] = outcome.answer.text
                line["sim_durations_ms"] = outcome.answer.sim_durations_ms
                line["trace"] = LatencyTrace.from_durations_ms(
                    outcome.answer.sim_durations_ms
                ).to_json()
                line["token_count"] = outcome.answer.token_count
                line["backend_id"] = outcome.answer.backend_id
            else:
                line["error"] = outcome.error or (outcome.answer.error if outcome.answer else "unknown")
            fh.write(json.dumps(line, ensure_ascii=False, sort_keys=True) + "\n")
    if traces_path is not None:
        with Path(traces_path).open("w", encoding="utf-8") as fh:
            for outcome in result.outcomes:
                if outcome.answer is not None and outcome.answer.trace is not None:
                    fh.write(
                        json.dumps(
                            {"id": outcome.item_id, "wall_trace": outcome.answer.trace.to_json()},
                            sort_keys=True,
                        )
                        + "\n"
                    )
    return preds_path
