"""Session rendezvous: offer/answer negotiation and candidate relay.

The server is a registry plus relay; it holds no media. Peers connect over
TCP, register, and exchange control DataMessages. Session state lives in a
pure state machine (SessionStateMachine) so the transition relation can be
checked exhaustively.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from dataclasses import dataclass
from enum import Enum

from edgevqa.clock import SYSTEM_CLOCK
from edgevqa.transport import ChannelClosed, DataChannel

logger = logging.getLogger(__name__)

DEFAULT_SIGNAL_PORT = 8443
SESSION_GC_SECONDS = 60.0

DEFAULT_MEDIA_PARAMS = {"mtu_payload": 1200, "initial_bitrate_kbps": 2000}


class SignalingError(Exception):
    """Base class; .__class__.__name__ doubles as the wire error code."""


class UnknownPeer(SignalingError):
    pass


class SelfSession(SignalingError):
    pass


class UnknownSession(SignalingError):
    pass


class InvalidTransition(SignalingError):
    pass


class GlareResolved(SignalingError):
    pass


class WrongPeer(SignalingError):
    pass


class SessionState(Enum):
    NEW = "NEW"
    OFFER_SENT = "OFFER_SENT"
    OFFER_RECEIVED = "OFFER_RECEIVED"
    ANSWERED = "ANSWERED"
    CONNECTED = "CONNECTED"
    CLOSED = "CLOSED"
    FAILED = "FAILED"


# Transition relation over canonical server-side states. OFFER_RECEIVED is the
# same negotiation point seen from the non-offering peer; the server reports
# it to that peer while tracking OFFER_SENT canonically.
TRANSITIONS: dict[SessionState, frozenset[SessionState]] = {
    SessionState.NEW: frozenset({SessionState.OFFER_SENT, SessionState.FAILED}),
    SessionState.OFFER_SENT: frozenset(
        {SessionState.OFFER_SENT, SessionState.ANSWERED, SessionState.FAILED}
    ),
    SessionState.OFFER_RECEIVED: frozenset({SessionState.ANSWERED, SessionState.FAILED}),
    SessionState.ANSWERED: frozenset({SessionState.CONNECTED, SessionState.FAILED}),
    SessionState.CONNECTED: frozenset({SessionState.CLOSED, SessionState.FAILED}),
    SessionState.CLOSED: frozenset(),
    SessionState.FAILED: frozenset(),
}


@dataclass(frozen=True)
class Candidate:
    address: str
    port: int
    priority: int

    def to_json(self) -> dict:
        return {"address": self.address, "port": self.port, "priority": self.priority}

    @classmethod
    def from_json(cls, d: dict) -> "Candidate":
        return cls(address=d["address"], port=int(d["port"]), priority=int(d["priority"]))


@dataclass
class SessionDescriptor:
    session_id: str
    offer_peer: str
    answer_peer: str
    media_params: dict
    created_ts: int


class SessionStateMachine:
    """Negotiation state for one two-peer session; pure, event-driven."""

    def __init__(self, session_id: str, peer_a: str, peer_b: str, media_params: dict, now_us: int):
        if peer_a == peer_b:
            raise SelfSession(f"{peer_a} cannot negotiate with itself")
        self.session_id = session_id
        self.peers = (peer_a, peer_b)
        self.media_params = dict(DEFAULT_MEDIA_PARAMS, **(media_params or {}))
        self.created_ts = now_us
        self.updated_ts = now_us
        self.state = SessionState.NEW
        self.offerer: str | None = None
        self.offer_body: dict | None = None
        self.answer_body: dict | None = None
        self.connected_peers: set[str] = set()
        self._candidates: dict[str, list[Candidate]] = {peer_a: [], peer_b: []}

    # -- views ---------------------------------------------------------------

    def other(self, peer: str) -> str:
        self._check_member(peer)
        return self.peers[1] if peer == self.peers[0] else self.peers[0]

    def state_for(self, peer: str) -> SessionState:
        """The canonical state, except the negotiation point is reported as
        OFFER_SENT to the offerer and OFFER_RECEIVED to the other peer."""
        if self.state == SessionState.OFFER_SENT and peer != self.offerer:
            return SessionState.OFFER_RECEIVED
        return self.state

    def candidates(self) -> list[Candidate]:
        merged = self._candidates[self.peers[0]] + self._candidates[self.peers[1]]
        return sorted(merged, key=lambda c: -c.priority)

    def candidates_of(self, peer: str) -> list[Candidate]:
        self._check_member(peer)
        return sorted(self._candidates[peer], key=lambda c: -c.priority)

    def descriptor(self) -> SessionDescriptor:
        offerer = self.offerer or self.peers[0]
        return SessionDescriptor(
            session_id=self.session_id,
            offer_peer=offerer,
            answer_peer=self.peers[1] if offerer == self.peers[0] else self.peers[0],
            media_params=self.media_params,
            created_ts=self.created_ts,
        )

    # -- events --------------------------------------------------------------

    def submit_offer(self, from_peer: str, body: dict, now_us: int) -> SessionState:
        """Returns the new canonical state.

        Glare: when both peers offer before an answer, the lexicographically
        smaller peer id stays the offerer regardless of arrival order; the
        larger peer's offer raises GlareResolved and it must answer instead.
        """
        self._check_member(from_peer)
        if self.state == SessionState.OFFER_SENT:
            if from_peer == self.offerer:
                raise InvalidTransition("duplicate offer from the offerer")
            winner = min(from_peer, self.offerer)
            if winner == self.offerer:
                raise GlareResolved(f"{self.offerer} remains offerer; answer instead")
            # The new offer wins; the previous offerer must answer.
            self.offerer = from_peer
            self.offer_body = body
            self._touch(now_us)
            return self.state
        if self.state != SessionState.NEW:
            raise InvalidTransition(f"offer in {self.state.value}")
        self.state = SessionState.OFFER_SENT
        self.offerer = from_peer
        self.offer_body = body
        self._touch(now_us)
        return self.state

    def submit_answer(self, from_peer: str, body: dict, now_us: int) -> SessionState:
        self._check_member(from_peer)
        if self.state != SessionState.OFFER_SENT:
            raise InvalidTransition(f"answer in {self.state.value}")
        if from_peer == self.offerer:
            raise WrongPeer("offerer cannot answer its own offer")
        self.state = SessionState.ANSWERED
        self.answer_body = body
        self._touch(now_us)
        return self.state

    def add_candidate(self, from_peer: str, candidate: Candidate, now_us: int) -> SessionState:
        self._check_member(from_peer)
        if self.state not in (
            SessionState.OFFER_SENT,
            SessionState.OFFER_RECEIVED,
            SessionState.ANSWERED,
            SessionState.CONNECTED,
        ):
            raise InvalidTransition(f"candidate in {self.state.value}")
        self._candidates[from_peer].append(candidate)
        self._touch(now_us)
        return self.state

    def mark_connected(self, from_peer: str, now_us: int) -> SessionState:
        self._check_member(from_peer)
        if self.state == SessionState.CONNECTED:
            self.connected_peers.add(from_peer)
            return self.state
        if self.state != SessionState.ANSWERED:
            raise InvalidTransition(f"connected in {self.state.value}")
        self.connected_peers.add(from_peer)
        self.state = SessionState.CONNECTED
        self._touch(now_us)
        return self.state

    def close(self, now_us: int) -> SessionState:
        if self.state != SessionState.CONNECTED:
            raise InvalidTransition(f"close in {self.state.value}")
        self.state = SessionState.CLOSED
        self._touch(now_us)
        return self.state

    def fail(self, reason: str, now_us: int) -> SessionState:
        if self.state in (SessionState.CLOSED, SessionState.FAILED):
            raise InvalidTransition(f"fail in {self.state.value}")
        self.state = SessionState.FAILED
        self.fail_reason = reason
        self._touch(now_us)
        return self.state

    def _check_member(self, peer: str) -> None:
        if peer not in self.peers:
            raise WrongPeer(f"{peer} is not part of session {self.session_id}")

    def _touch(self, now_us: int) -> None:
        self.updated_ts = now_us


class SignalingServer:
    """TCP relay + session registry speaking control DataMessages."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_SIGNAL_PORT, clock=SYSTEM_CLOCK):
        self.host = host
        self._requested_port = port
        self.clock = clock
        self.sessions: dict[str, SessionStateMachine] = {}
        self._peers: dict[str, DataChannel] = {}
        self._session_counter = itertools.count(1)
        self._server: asyncio.base_events.Server | None = None
        self._gc_task: asyncio.Task | None = None

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._on_connection, self.host, self._requested_port
        )
        self._gc_task = asyncio.ensure_future(self._gc_loop())

    @property
    def port(self) -> int:
        assert self._server is not None
        return self._server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        if self._gc_task is not None:
            self._gc_task.cancel()
        for channel in list(self._peers.values()):
            await channel.close()
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()

    # -- connection handling ---------------------------------------------

    async def _on_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        channel = DataChannel(reader, writer)
        peer_id: str | None = None
        try:
            while True:
                msg = await channel.recv()
                if msg.get("type") != "control":
                    await self._reply_error(channel, msg, "MalformedControl", "expected control")
                    continue
                if peer_id is None:
                    if msg.get("action") != "register" or not msg.get("peer"):
                        await self._reply_error(channel, msg, "NotRegistered", "register first")
                        continue
                    peer_id = str(msg["peer"])
                    self._peers[peer_id] = channel
                    await channel.send(
                        {"type": "control", "action": "ok", "req_id": msg.get("req_id")}
                    )
                    continue
                await self._dispatch(peer_id, channel, msg)
        except ChannelClosed:
            pass
        finally:
            if peer_id is not None and self._peers.get(peer_id) is channel:
                del self._peers[peer_id]
            await channel.close()

    async def _dispatch(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        action = msg.get("action")
        try:
            if action == "create_session":
                await self._handle_create(peer_id, channel, msg)
            elif action == "offer":
                await self._handle_offer(peer_id, channel, msg)
            elif action == "answer":
                await self._handle_answer(peer_id, channel, msg)
            elif action == "candidate":
                await self._handle_candidate(peer_id, channel, msg)
            elif action == "connected":
                await self._handle_connected(peer_id, channel, msg)
            elif action == "close":
                await self._handle_close(peer_id, channel, msg)
            else:
                await self._reply_error(channel, msg, "UnknownAction", f"{action!r}")
        except SignalingError as e:
            await self._reply_error(channel, msg, type(e).__name__, str(e))

    def _session(self, msg: dict) -> SessionStateMachine:
        session = self.sessions.get(msg.get("session_id"))
        if session is None:
            raise UnknownSession(f"session {msg.get('session_id')!r}")
        return session

    def create_session(self, peer_a: str, peer_b: str, media_params: dict | None) -> SessionStateMachine:
        if peer_a not in self._peers:
            raise UnknownPeer(peer_a)
        if peer_b not in self._peers:
            raise UnknownPeer(peer_b)
        if peer_a == peer_b:
            raise SelfSession(peer_a)
        session_id = f"sess-{next(self._session_counter)}"
        session = SessionStateMachine(
            session_id, peer_a, peer_b, media_params or {}, self.clock.now_us()
        )
        self.sessions[session_id] = session
        return session

    async def _handle_create(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        remote = msg.get("remote_peer", "")
        session = self.create_session(peer_id, remote, msg.get("media_params"))
        await channel.send(
            {
                "type": "control",
                "action": "ok",
                "req_id": msg.get("req_id"),
                "session_id": session.session_id,
                "state": session.state.value,
                "media_params": session.media_params,
            }
        )
        await self._relay(
            remote,
            {
                "type": "control",
                "action": "session_created",
                "session_id": session.session_id,
                "from_peer": peer_id,
                "media_params": session.media_params,
            },
        )

    async def _handle_offer(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        session = self._session(msg)
        previous_offerer = session.offerer
        session.submit_offer(peer_id, msg.get("body", {}), self.clock.now_us())
        await self._ack(channel, msg, session, peer_id)
        await self._relay(
            session.other(peer_id),
            {
                "type": "control",
                "action": "offer_received",
                "session_id": session.session_id,
                "from_peer": peer_id,
                "body": msg.get("body", {}),
                "media_params": session.media_params,
            },
        )
        if previous_offerer is not None and previous_offerer != session.offerer:
            # Glare flipped the roles: tell the displaced offerer to answer.
            await self._relay(
                previous_offerer,
                {
                    "type": "control",
                    "action": "glare_resolved",
                    "session_id": session.session_id,
                    "offerer": session.offerer,
                },
            )

    async def _handle_answer(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        session = self._session(msg)
        session.submit_answer(peer_id, msg.get("body", {}), self.clock.now_us())
        await self._ack(channel, msg, session, peer_id)
        await self._relay(
            session.other(peer_id),
            {
                "type": "control",
                "action": "answer_received",
                "session_id": session.session_id,
                "from_peer": peer_id,
                "body": msg.get("body", {}),
            },
        )

    async def _handle_candidate(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        session = self._session(msg)
        candidate = Candidate.from_json(msg.get("candidate", {}))
        session.add_candidate(peer_id, candidate, self.clock.now_us())
        await self._ack(channel, msg, session, peer_id)
        await self._relay(
            session.other(peer_id),
            {
                "type": "control",
                "action": "candidate_received",
                "session_id": session.session_id,
                "from_peer": peer_id,
                "candidate": candidate.to_json(),
            },
        )

    async def _handle_connected(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        session = self._session(msg)
        session.mark_connected(peer_id, self.clock.now_us())
        await self._ack(channel, msg, session, peer_id)
        await self._broadcast_state(session)

    async def _handle_close(self, peer_id: str, channel: DataChannel, msg: dict) -> None:
        session = self._session(msg)
        session.other(peer_id)  # membership check
        session.close(self.clock.now_us())
        await self._ack(channel, msg, session, peer_id)
        await self._broadcast_state(session)

    async def _ack(
        self, channel: DataChannel, msg: dict, session: SessionStateMachine, peer_id: str
    ) -> None:
        await channel.send(
            {
                "type": "control",
                "action": "ok",
                "req_id": msg.get("req_id"),
                "session_id": session.session_id,
                "state": session.state_for(peer_id).value,
                "candidates": [c.to_json() for c in session.candidates()],
            }
        )

    async def _broadcast_state(self, session: SessionStateMachine) -> None:
        for peer in session.peers:
            await self._relay(
                peer,
                {
                    "type": "control",
                    "action": "session_state",
                    "session_id": session.session_id,
                    "state": session.state_for(peer).value,
                },
            )

    async def _relay(self, peer_id: str, body: dict) -> None:
        channel = self._peers.get(peer_id)
        if channel is None:
            return
        try:
            await channel.send(body)
        except ChannelClosed:
            self._peers.pop(peer_id, None)

    async def _reply_error(self, channel: DataChannel, msg: dict, code: str, detail: str) -> None:
        try:
            await channel.send(
                {
                    "type": "control",
                    "action": "error",
                    "req_id": msg.get("req_id"),
                    "error": code,
                    "message": detail,
                }
            )
        except ChannelClosed:
            pass

    # -- garbage collection ------------------------------------------------

    async def _gc_loop(self) -> None:
        while True:
            await asyncio.sleep(5.0)
            self.gc_stale_sessions(self.clock.now_us())

    def gc_stale_sessions(self, now_us: int) -> list[str]:
        """Drop sessions stuck in NEW/OFFER_SENT with no progress for 60 s."""
        stale = [
            sid
            for sid, s in self.sessions.items()
            if s.state in (SessionState.NEW, SessionState.OFFER_SENT)
            and now_us - s.updated_ts >= SESSION_GC_SECONDS * 1_000_000
        ]
        for sid in stale:
            del self.sessions[sid]
        return stale


class SignalingFailed(SignalingError):
    pass


class SignalingClient:
    """Peer-side connection to the signaling server.

    Requests are correlated by req_id; relayed events are queued and can be
    awaited with next_event / wait_for.
    """

    def __init__(self, host: str, port: int, peer_id: str):
        self.host = host
        self.port = port
        self.peer_id = peer_id
        self._channel: DataChannel | None = None
        self._req_counter = itertools.count(1)
        self._pending: dict[str, asyncio.Future] = {}
        self.events: asyncio.Queue[dict] = asyncio.Queue()
        self._recv_task: asyncio.Task | None = None

    async def connect(self, timeout: float = 5.0) -> None:
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(self.host, self.port), timeout
            )
        except (OSError, asyncio.TimeoutError) as e:
            raise SignalingFailed(f"cannot reach signaling server: {e}") from None
        self._channel = DataChannel(reader, writer)
        self._recv_task = asyncio.ensure_future(self._recv_loop())
        await self.request({"action": "register", "peer": self.peer_id})

    async def close(self) -> None:
        if self._recv_task is not None:
            self._recv_task.cancel()
        if self._channel is not None:
            await self._channel.close()

    async def request(self, body: dict, timeout: float = 5.0) -> dict:
        assert self._channel is not None, "connect() first"
        req_id = f"{self.peer_id}-{next(self._req_counter)}"
        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[req_id] = fut
        await self._channel.send({"type": "control", "req_id": req_id, **body})
        try:
            reply = await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._pending.pop(req_id, None)
            raise SignalingFailed(f"no reply to {body.get('action')}") from None
        if reply.get("action") == "error":
            raise _error_from_reply(reply)
        return reply

    async def _recv_loop(self) -> None:
        assert self._channel is not None
        try:
            while True:
                msg = await self._channel.recv()
                fut = self._pending.pop(msg.get("req_id"), None) if msg.get("req_id") else None
                if fut is not None and not fut.done():
                    fut.set_result(msg)
                else:
                    await self.events.put(msg)
        except ChannelClosed:
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(SignalingFailed("signaling connection lost"))
            await self.events.put({"type": "control", "action": "connection_lost"})

    async def wait_for(self, action: str, session_id: str | None = None, timeout: float = 10.0) -> dict:
        """Wait for a relayed event, requeueing any others that arrive."""
        deadline = asyncio.get_event_loop().time() + timeout
        stash: list[dict] = []
        try:
            while True:
                remaining = deadline - asyncio.get_event_loop().time()
                if remaining <= 0:
                    raise SignalingFailed(f"timed out waiting for {action}")
                event = await asyncio.wait_for(self.events.get(), remaining)
                if event.get("action") == "connection_lost":
                    raise SignalingFailed("signaling connection lost")
                if event.get("action") == action and (
                    session_id is None or event.get("session_id") == session_id
                ):
                    return event
                stash.append(event)
        finally:
            for event in stash:
                self.events.put_nowait(event)

    # -- convenience wrappers ----------------------------------------------

    async def create_session(self, remote_peer: str, media_params: dict | None = None) -> dict:
        return await self.request(
            {"action": "create_session", "remote_peer": remote_peer, "media_params": media_params}
        )

    async def offer(self, session_id: str, body: dict | None = None) -> dict:
        return await self.request({"action": "offer", "session_id": session_id, "body": body or {}})

    async def answer(self, session_id: str, body: dict | None = None) -> dict:
        return await self.request({"action": "answer", "session_id": session_id, "body": body or {}})

    async def add_candidate(self, session_id: str, candidate: Candidate) -> dict:
        return await self.request(
            {"action": "candidate", "session_id": session_id, "candidate": candidate.to_json()}
        )

    async def mark_connected(self, session_id: str) -> dict:
        return await self.request({"action": "connected", "session_id": session_id})


_ERROR_CLASSES: dict[str, type] = {
    cls.__name__: cls
    for cls in (
        UnknownPeer,
        SelfSession,
        UnknownSession,
        InvalidTransition,
        GlareResolved,
        WrongPeer,
    )
}


def _error_from_reply(reply: dict) -> SignalingError:
    cls = _ERROR_CLASSES.get(reply.get("error", ""), SignalingFailed)
    return cls(reply.get("message", reply.get("error", "signaling error")))
