"""Edge inference gateway: frames in, staged pipeline, answers out.

One gateway serves many sessions. Per session, queries run strictly FIFO
through the four-stage pipeline: stage 1 (image decode, resize, color
convert) runs here for real; stages 2-4 run in the selected backend, which
reports their durations. Every stage boundary is timestamped into the
answer's LatencyTrace; rx_gateway_ts is stamped at query arrival, so any
same-session queueing shows up in the preprocess interval of wall traces
(simulated traces are unaffected).

HTTP surface: POST /v1/infer for one-shot inference, WebSocket /v1/bridge
streaming frame/answer/telemetry/session_state events for the operator UI.
"""

from __future__ import annotations

import asyncio
import base64
import io
import itertools
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from edgevqa.backends import (
    BackendError,
    BackendProfile,
    MockVLMBackend,
    ProfileRegistry,
    RemoteHttpBackend,
    WanLatencyInjector,
)
from edgevqa.clock import SYSTEM_CLOCK
from edgevqa.envelopes import AnswerEnvelope, MalformedQuery, QueryEnvelope
from edgevqa.protocol import FrameEnvelope, PixelFormat
from edgevqa.signaling import Candidate, SignalingClient
from edgevqa.trace import LatencyTrace
from edgevqa.transport import (
    ChannelClosed,
    DataChannel,
    MediaReceiver,
    UdpEndpoint,
    dial_peer,
)

logger = logging.getLogger(__name__)

DEFAULT_BACKEND_TIMEOUT_S = 30.0
FRAME_CACHE_SIZE = 4
BRIDGE_FRAME_FPS = 2.0


class GatewayError(Exception):
    pass


class NoFrameAvailable(GatewayError):
    pass


class BackendUnavailable(GatewayError):
    pass


class BackendTimeout(GatewayError):
    pass


class ImageDecodeError(GatewayError):
    pass


@dataclass
class PreprocessedImage:
    width: int
    height: int
    data: bytes = field(repr=False)  # RGB8, resized to the backend input size


def preprocess_frame(frame: FrameEnvelope, input_size: tuple[int, int]) -> PreprocessedImage:
    """Stage 1: decode, resize to the backend input, convert to RGB."""
    from PIL import Image

    try:
        if frame.pixel_format == PixelFormat.RAW_RGB8:
            img = Image.frombytes("RGB", (frame.width, frame.height), frame.data)
        else:
            img = Image.open(io.BytesIO(frame.data))
            img.load()
            img = img.convert("RGB")
    except Exception as e:
        raise ImageDecodeError(f"frame {frame.frame_id}: {e}") from None
    resized = img.resize(tuple(input_size), Image.BILINEAR)
    return PreprocessedImage(width=resized.width, height=resized.height, data=resized.tobytes())


class FrameCache:
    """Most recent N frames of one session; written by the media receive path."""

    def __init__(self, size: int = FRAME_CACHE_SIZE):
        self.size = size
        self._frames: list[FrameEnvelope] = []

    def put(self, frame: FrameEnvelope) -> None:
        self._frames.append(frame)
        if len(self._frames) > self.size:
            self._frames.pop(0)

    def get(self, frame_ref: int | str) -> FrameEnvelope:
        if not self._frames:
            raise NoFrameAvailable("no frame received yet")
        if frame_ref == "latest":
            return self._frames[-1]
        for frame in reversed(self._frames):
            if frame.frame_id == frame_ref:
                return frame
        raise NoFrameAvailable(f"frame {frame_ref} not in cache")

    def latest_id(self) -> int | None:
        return self._frames[-1].frame_id if self._frames else None


@dataclass
class GatewayConfig:
    peer_id: str = "gateway"
    signal_host: str = "127.0.0.1"
    signal_port: int = 8443
    media_host: str = "127.0.0.1"
    media_port: int = 0  # UDP; 0 picks an ephemeral port
    deployment: str = "edge"  # edge | cloud
    profile: str = "edge-llama"
    profile_dirs: tuple[str, ...] = ()
    remote_url: str | None = None  # use a remote HTTP backend instead of the mock
    backend_timeout_s: float = DEFAULT_BACKEND_TIMEOUT_S
    time_scale: float = 1.0
    frame_cache_size: int = FRAME_CACHE_SIZE
    target_delay_ms: float = 50.0
    telemetry_interval_s: float = 1.0
    http_port: int | None = None  # None disables the HTTP/bridge listener
    bridge_fps: float = BRIDGE_FRAME_FPS
    static_dir: str | None = None
    strict_mc: bool = False


class _Session:
    def __init__(self, session_id: str, remote_peer: str, stream_id: int, cache_size: int):
        self.session_id = session_id
        self.remote_peer = remote_peer
        self.stream_id = stream_id
        self.cache = FrameCache(cache_size)
        self.channel: DataChannel | None = None
        self.queue: asyncio.Queue[tuple[QueryEnvelope, int, str]] = asyncio.Queue()
        self.tasks: list[asyncio.Task] = []
        self.media_params: dict = {}
        self.connected = False


class GatewayService:
    def __init__(self, config: GatewayConfig, clock=SYSTEM_CLOCK, answer_table: dict[str, str] | None = None):
        self.config = config
        self.clock = clock
        self.answer_table = answer_table
        self.registry = ProfileRegistry(tuple(config.profile_dirs))
        self.backend = None
        self.sessions: dict[str, _Session] = {}
        self.signaling: SignalingClient | None = None
        self.udp: UdpEndpoint | None = None
        self.receiver: MediaReceiver | None = None
        self._stream_counter = itertools.count(1)
        self._tasks: list[asyncio.Task] = []
        self._bridge_clients: list[asyncio.Queue] = []
        self._bridge_last_frame_us: dict[str, int] = {}
        self._http_server = None
        self._pipeline_locks: dict[str, asyncio.Lock] = {}

    # -- backend selection ---------------------------------------------------

    def select_backend(self, deployment: str, profile_name: str, answer_table: dict[str, str] | None = None):
        """edge -> in-process mock; cloud -> the same mock behind a WAN injector.

        A configured remote_url swaps the mock for the remote HTTP backend
        (still WAN-wrapped under the cloud deployment).
        """
        profile = self.registry.get(profile_name)
        table = answer_table if answer_table is not None else self.answer_table
        if self.config.remote_url:
            inner = RemoteHttpBackend(
                self.config.remote_url,
                max_new_tokens=profile.max_new_tokens,
                timeout_s=self.config.backend_timeout_s,
                clock=self.clock,
            )
        else:
            inner = MockVLMBackend(
                profile, table, time_scale=self.config.time_scale, clock=self.clock
            )
        if deployment == "cloud":
            wan = profile.wan_delay_ms
            if wan.get("mean", 0.0) <= 0 and wan.get("jitter", 0.0) <= 0:
                from edgevqa.backends import DEFAULT_WAN_DELAY

                wan = DEFAULT_WAN_DELAY
            return WanLatencyInjector(
                inner, wan, profile.seed, time_scale=self.config.time_scale, clock=self.clock
            )
        return inner

    @property
    def profile(self) -> BackendProfile:
        return self.registry.get(self.config.profile)

    # -- lifecycle -------------------------------------------------------------

    async def start(self) -> None:
        self.backend = self.select_backend(self.config.deployment, self.config.profile)
        self.udp = await UdpEndpoint.create(self.config.media_host, self.config.media_port)
        self.receiver = MediaReceiver(self.udp, clock=self.clock)
        self.signaling = SignalingClient(
            self.config.signal_host, self.config.signal_port, self.config.peer_id
        )
        await self.signaling.connect()
        self._tasks.append(asyncio.ensure_future(self._signaling_loop()))
        if self.config.http_port is not None:
            await self._start_http(self.config.http_port)

    async def stop(self) -> None:
        for task in self._tasks:
            task.cancel()
        for session in list(self.sessions.values()):
            await self._teardown_session(session)
        if self._http_server is not None:
            self._http_server.should_exit = True
            await self._http_task
        if self.signaling is not None:
            await self.signaling.close()
        if self.receiver is not None:
            self.receiver.close()

    # -- signaling / session setup ----------------------------------------------

    async def _signaling_loop(self) -> None:
        """Auto-answer offers and dial the offerer once its candidates arrive."""
        assert self.signaling is not None
        pending_candidates: dict[str, list[Candidate]] = {}
        answered: set[str] = set()
        while True:
            event = await self.signaling.events.get()
            action = event.get("action")
            sid = event.get("session_id", "")
            try:
                if action == "offer_received":
                    stream_id = next(self._stream_counter)
                    session = _Session(
                        sid, event.get("from_peer", ""), stream_id, self.config.frame_cache_size
                    )
                    session.media_params = event.get("media_params", {})
                    self.sessions[sid] = session
                    await self.signaling.answer(
                        sid,
                        {
                            "stream_id": stream_id,
                            "target_delay_ms": self.config.target_delay_ms,
                            "backend": getattr(self.backend, "backend_id", "none"),
                        },
                    )
                    answered.add(sid)
                    if pending_candidates.get(sid):
                        await self._connect_session(self.sessions[sid], pending_candidates.pop(sid))
                elif action == "candidate_received":
                    candidate = Candidate.from_json(event.get("candidate", {}))
                    if sid in answered and sid in self.sessions and not self.sessions[sid].connected:
                        await self._connect_session(self.sessions[sid], [candidate])
                    else:
                        pending_candidates.setdefault(sid, []).append(candidate)
                elif action == "session_state" and event.get("state") == "CLOSED":
                    session = self.sessions.pop(sid, None)
                    if session is not None:
                        await self._teardown_session(session)
                    self._bridge_broadcast("session_state", {"session_id": sid, "state": "CLOSED"})
                elif action == "connection_lost":
                    logger.warning("signaling connection lost")
                    return
            except Exception:
                logger.exception("error handling signaling event %s", action)

    async def _connect_session(self, session: _Session, candidates: list[Candidate]) -> None:
        assert self.udp is not None and self.receiver is not None and self.signaling is not None
        ordered = [(c.address, c.port) for c in sorted(candidates, key=lambda c: -c.priority)]
        channel, _remote_media = await dial_peer(
            ordered,
            session_id=session.session_id,
            my_peer_id=self.config.peer_id,
            my_udp_port=self.udp.port,
        )
        session.channel = channel
        session.connected = True
        self.receiver.register_stream(
            session.stream_id,
            lambda frame, s=session: self._on_frame(s, frame),
            target_delay_ms=self.config.target_delay_ms,
        )
        await self.signaling.mark_connected(session.session_id)
        session.tasks.append(asyncio.ensure_future(self._session_recv_loop(session)))
        session.tasks.append(asyncio.ensure_future(self._session_worker(session)))
        session.tasks.append(asyncio.ensure_future(self._telemetry_loop(session)))
        self._bridge_broadcast(
            "session_state", {"session_id": session.session_id, "state": "CONNECTED"}
        )

    async def _teardown_session(self, session: _Session) -> None:
        for task in session.tasks:
            task.cancel()
        if session.channel is not None:
            await session.channel.close()
        if self.receiver is not None:
            self.receiver.unregister_stream(session.stream_id)
        self.sessions.pop(session.session_id, None)

    # -- media path ------------------------------------------------------------

    def _on_frame(self, session: _Session, frame: FrameEnvelope) -> None:
        session.cache.put(frame)
        if session.channel is not None:
            asyncio.ensure_future(
                self._send_quietly(
                    session.channel,
                    {
                        "type": "telemetry",
                        "event": "frame_ack",
                        "session_id": session.session_id,
                        "frame_id": frame.frame_id,
                    },
                )
            )
        self._bridge_frame(session, frame)

    async def _send_quietly(self, channel: DataChannel, body: dict) -> None:
        try:
            await channel.send(body)
        except ChannelClosed:
            pass

    async def _telemetry_loop(self, session: _Session) -> None:
        assert self.receiver is not None
        while True:
            await asyncio.sleep(self.config.telemetry_interval_s)
            if session.channel is None:
                continue
            report = self.receiver.take_receiver_report(session.stream_id)
            stats = self.receiver._streams[session.stream_id]["jitter"].stats
            body = {
                "type": "telemetry",
                "event": "receiver_report",
                "session_id": session.session_id,
                "received": report.received,
                "lost": report.lost,
                "interval_ms": report.interval_ms,
                "frames_released": stats.frames_released,
                "frames_dropped": stats.frames_dropped,
            }
            await self._send_quietly(session.channel, body)
            self._bridge_broadcast("telemetry", body)

    # -- query path --------------------------------------------------------------

    async def _session_recv_loop(self, session: _Session) -> None:
        assert session.channel is not None
        while True:
            try:
                msg = await session.channel.recv()
            except ChannelClosed:
                self._bridge_broadcast(
                    "session_state", {"session_id": session.session_id, "state": "CLOSED"}
                )
                return
            if msg.get("type") == "query":
                rx_us = self.clock.now_us()
                try:
                    query = QueryEnvelope.from_json(msg)
                except MalformedQuery as e:
                    await self._send_quietly(
                        session.channel,
                        AnswerEnvelope(
                            query_id=str(msg.get("query_id", "")),
                            text="",
                            backend_id="",
                            token_count=0,
                            error=f"MalformedQuery: {e}",
                        ).to_json(),
                    )
                    continue
                await session.queue.put((query, rx_us, "channel"))

    async def _session_worker(self, session: _Session) -> None:
        """Strict FIFO per session: one query at a time, in arrival order."""
        while True:
            query, rx_us, reply_via = await session.queue.get()
            answer = await self.answer_query(session, query, rx_us)
            if reply_via == "channel" and session.channel is not None:
                await self._send_quietly(session.channel, answer.to_json())
            self._bridge_broadcast("answer", self._bridge_answer_payload(session, query, answer))

    def _bridge_answer_payload(self, session: _Session, query: QueryEnvelope, answer: AnswerEnvelope) -> dict:
        """Answer JSON for the bridge: server-stamped e2e_ms, plus
        correctness when the query came from a dataset replay with known gold."""
        body = answer.to_json()
        body["session_id"] = session.session_id
        if answer.trace is not None:
            stamped = replace(answer.trace, response_received_ts=self.clock.now_us())
            body["trace"] = stamped.to_json()
            body["e2e_ms"] = stamped.e2e_ms
        if query.item_id is not None and self.answer_table and query.item_id in self.answer_table:
            from edgevqa.evaluation import score_item as _score
            from edgevqa.dataset import DatasetItem as _Item

            gold = self.answer_table[query.item_id]
            item = _Item(id=query.item_id, question=query.text, qtype=query.qtype,
                         gold=gold, choices=query.choices, image_b64="")
            body["gold"] = gold
            body["correct"] = answer.ok and _score(answer.text, item, strict_mc=self.config.strict_mc)
        return body

    async def answer_query(self, session: _Session, query: QueryEnvelope, rx_us: int) -> AnswerEnvelope:
        try:
            frame = session.cache.get(query.frame_ref)
        except NoFrameAvailable as e:
            return self._error_answer(query, f"NoFrameAvailable: {e}")
        try:
            return await self.run_pipeline(frame, query, rx_us)
        except (GatewayError, BackendError, MalformedQuery) as e:
            return self._error_answer(query, f"{type(e).__name__}: {e}")

    def _error_answer(self, query: QueryEnvelope, error: str) -> AnswerEnvelope:
        return AnswerEnvelope(
            query_id=query.query_id,
            text="",
            backend_id=getattr(self.backend, "backend_id", ""),
            token_count=0,
            error=error,
            item_id=query.item_id,
        )

    async def run_pipeline(
        self, frame: FrameEnvelope, query: QueryEnvelope, rx_us: int | None = None
    ) -> AnswerEnvelope:
        """Stage 1 here, stages 2-4 in the backend; all boundaries stamped."""
        if self.backend is None:
            raise BackendUnavailable("gateway started without a backend")
        rx_us = self.clock.now_us() if rx_us is None else rx_us
        preprocessed = preprocess_frame(frame, self.profile.input_size)
        assert preprocessed.data
        preprocess_done = self.clock.now_us()
        try:
            result, stamps = await asyncio.wait_for(
                self.backend.infer(frame, query), self.config.backend_timeout_s
            )
        except asyncio.TimeoutError:
            raise BackendTimeout(
                f"backend exceeded {self.config.backend_timeout_s}s for {query.query_id}"
            ) from None
        decode_done = stamps["text_decode"]
        trace = LatencyTrace(
            capture_ts=frame.capture_ts_us,
            tx_start_ts=query.tx_start_ts_us or frame.capture_ts_us,
            rx_gateway_ts=rx_us,
            preprocess_done_ts=preprocess_done,
            fusion_done_ts=stamps["fusion"],
            generation_done_ts=stamps["generation"],
            decode_done_ts=decode_done,
            response_received_ts=decode_done,  # receiver overwrites on arrival
        )
        measured_preprocess_ms = (preprocess_done - rx_us) / 1000.0
        sim = {
            "network_up": result.wan_up_ms,
            "preprocess": result.stage_ms.get("preprocess") or measured_preprocess_ms,
            "fusion": result.stage_ms.get("fusion", 0.0),
            "generation": result.stage_ms.get("generation", 0.0),
            "text_decode": result.stage_ms.get("text_decode", 0.0),
            "network_down": result.wan_down_ms,
        }
        return AnswerEnvelope(
            query_id=query.query_id,
            text=result.text,
            backend_id=result.backend_id,
            token_count=result.token_count,
            trace=trace,
            sim_durations_ms=sim,
            item_id=query.item_id,
        )

    # -- bridge ------------------------------------------------------------------

    def _bridge_broadcast(self, kind: str, payload: dict) -> None:
        if not self._bridge_clients:
            return
        event = {"kind": kind, "payload": payload, "server_ts_us": self.clock.now_us()}
        for queue in list(self._bridge_clients):
            if queue.qsize() < 1000:
                queue.put_nowait(event)

    def _bridge_frame(self, session: _Session, frame: FrameEnvelope) -> None:
        if not self._bridge_clients:
            return
        now = self.clock.now_us()
        last = self._bridge_last_frame_us.get(session.session_id, 0)
        if now - last < 1_000_000 / self.config.bridge_fps:
            return
        self._bridge_last_frame_us[session.session_id] = now
        try:
            jpeg = _frame_as_jpeg(frame)
        except ImageDecodeError:
            return
        self._bridge_broadcast(
            "frame",
            {
                "session_id": session.session_id,
                "frame_id": frame.frame_id,
                "capture_ts_us": frame.capture_ts_us,
                "frame_jpeg_b64": base64.b64encode(jpeg).decode("ascii"),
            },
        )

    def active_session(self) -> _Session | None:
        for session in reversed(list(self.sessions.values())):
            if session.connected:
                return session
        return None

    # -- HTTP ----------------------------------------------------------------------

    async def _start_http(self, port: int) -> None:
        import uvicorn

        app = build_http_app(self)
        config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
        self._http_server = uvicorn.Server(config)
        self._http_task = asyncio.ensure_future(self._http_server.serve())
        while not self._http_server.started:
            if self._http_task.done():
                raise GatewayError(f"HTTP listener failed on port {port}")
            await asyncio.sleep(0.01)

    @property
    def http_port(self) -> int:
        assert self._http_server is not None and self._http_server.started
        return self._http_server.servers[0].sockets[0].getsockname()[1]


def _frame_as_jpeg(frame: FrameEnvelope) -> bytes:
    if frame.pixel_format == PixelFormat.JPEG:
        return frame.data
    from PIL import Image

    try:
        img = Image.frombytes("RGB", (frame.width, frame.height), frame.data)
    except Exception as e:
        raise ImageDecodeError(str(e)) from None
    out = io.BytesIO()
    img.save(out, format="JPEG", quality=80)
    return out.getvalue()


from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from pydantic import BaseModel


class InferRequest(BaseModel):
    image: str  # base64 JPEG
    query: str
    qtype: str = "free_form"
    choices: list[str] | None = None


def build_http_app(gateway: GatewayService):
    """POST /v1/infer and WebSocket /v1/bridge, per docs/backend-api.md."""
    app = FastAPI(title="edgevqa gateway", docs_url=None, redoc_url=None)
    http_lock = asyncio.Lock()
    query_counter = itertools.count(1)

    @app.post("/v1/infer")
    async def infer(request: InferRequest):
        try:
            data = base64.b64decode(request.image, validate=True)
        except Exception:
            return JSONResponse({"error": "ImageDecodeError: bad base64"}, status_code=400)
        now = gateway.clock.now_us()
        frame = FrameEnvelope(
            frame_id=0, capture_ts_us=now, width=0, height=0,
            pixel_format=PixelFormat.JPEG, data=data,
        )
        try:
            query = QueryEnvelope(
                query_id=f"http-{next(query_counter)}",
                session_id="http",
                text=request.query,
                qtype=request.qtype,
                choices=request.choices,
                frame_ref=0,
                issued_ts_us=now,
            )
        except MalformedQuery as e:
            return JSONResponse({"error": f"MalformedQuery: {e}"}, status_code=400)
        try:
            query.validate()
            async with http_lock:  # same one-at-a-time contract as a session
                answer = await gateway.run_pipeline(frame, query, rx_us=now)
        except MalformedQuery as e:
            return JSONResponse({"error": f"MalformedQuery: {e}"}, status_code=400)
        except (GatewayError, BackendError) as e:
            return JSONResponse(
                {"error": f"{type(e).__name__}: {e}"},
                status_code=504 if isinstance(e, BackendTimeout) else 502,
            )
        body = answer.to_json()
        if answer.trace is not None:
            stamped = replace(answer.trace, response_received_ts=gateway.clock.now_us())
            body["trace"] = stamped.to_json()
            body["e2e_ms"] = stamped.e2e_ms
        return JSONResponse(body)

    @app.websocket("/v1/bridge")
    async def bridge(ws: WebSocket):
        await ws.accept()
        queue: asyncio.Queue = asyncio.Queue()
        gateway._bridge_clients.append(queue)

        async def pump_events():
            while True:
                event = await queue.get()
                await ws.send_text(json.dumps(event))

        pump = asyncio.ensure_future(pump_events())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    continue
                if msg.get("type") == "query":
                    session = (
                        gateway.sessions.get(msg.get("session_id"))
                        if msg.get("session_id")
                        else gateway.active_session()
                    )
                    if session is None:
                        gateway._bridge_broadcast(
                            "answer",
                            {"query_id": msg.get("query_id", ""), "error": "NoActiveSession",
                             "text": "", "token_count": 0, "backend_id": ""},
                        )
                        continue
                    try:
                        query = QueryEnvelope.from_json(
                            {
                                "query_id": msg.get("query_id") or f"op-{next(query_counter)}",
                                "session_id": session.session_id,
                                "text": msg.get("text", ""),
                                "qtype": msg.get("qtype", "free_form"),
                                "choices": msg.get("choices"),
                                "frame_ref": "latest",
                                "issued_ts_us": gateway.clock.now_us(),
                            }
                        )
                    except MalformedQuery as e:
                        gateway._bridge_broadcast(
                            "answer",
                            {"query_id": msg.get("query_id", ""), "error": f"MalformedQuery: {e}",
                             "text": "", "token_count": 0, "backend_id": ""},
                        )
                        continue
                    await session.queue.put((query, gateway.clock.now_us(), "bridge"))
        except WebSocketDisconnect:
            pass
        finally:
            pump.cancel()
            if queue in gateway._bridge_clients:
                gateway._bridge_clients.remove(queue)

    static_dir = gateway.config.static_dir
    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
