"""Query/answer envelopes exchanged between robot, gateway, and UI."""

from __future__ import annotations

from dataclasses import dataclass, field

from edgevqa.trace import LatencyTrace

QTYPES = ("yes_no", "multiple_choice", "free_form")


class MalformedQuery(Exception):
    pass


@dataclass
class QueryEnvelope:
    query_id: str
    session_id: str
    text: str
    qtype: str = "free_form"
    choices: list[str] | None = None
    frame_ref: int | str = "latest"  # frame_id or "latest"
    category: str | None = None
    issued_ts_us: int = 0
    item_id: str | None = None  # set by the benchmark replay; binds gold answers
    tx_start_ts_us: int | None = None  # robot-side frame send start

    def validate(self) -> None:
        if not self.text or not self.text.strip():
            raise MalformedQuery("empty query text")
        if self.qtype not in QTYPES:
            raise MalformedQuery(f"unknown qtype {self.qtype!r}")
        if self.qtype == "multiple_choice":
            if not self.choices or not 2 <= len(self.choices) <= 8:
                raise MalformedQuery("multiple_choice needs 2..8 choices")
        elif self.choices:
            raise MalformedQuery(f"choices given for qtype {self.qtype}")

    def to_json(self) -> dict:
        d = {
            "type": "query",
            "query_id": self.query_id,
            "session_id": self.session_id,
            "text": self.text,
            "qtype": self.qtype,
            "frame_ref": self.frame_ref,
            "issued_ts_us": self.issued_ts_us,
        }
        if self.choices is not None:
            d["choices"] = self.choices
        if self.category is not None:
            d["category"] = self.category
        if self.item_id is not None:
            d["item_id"] = self.item_id
        if self.tx_start_ts_us is not None:
            d["tx_start_ts_us"] = self.tx_start_ts_us
        return d

    @classmethod
    def from_json(cls, d: dict) -> "QueryEnvelope":
        try:
            q = cls(
                query_id=str(d["query_id"]),
                session_id=str(d.get("session_id", "")),
                text=d["text"],
                qtype=d.get("qtype", "free_form"),
                choices=list(d["choices"]) if d.get("choices") is not None else None,
                frame_ref=d.get("frame_ref", "latest"),
                category=d.get("category"),
                issued_ts_us=int(d.get("issued_ts_us", 0)),
                item_id=d.get("item_id"),
                tx_start_ts_us=d.get("tx_start_ts_us"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedQuery(f"bad query message: {e}") from None
        q.validate()
        return q


@dataclass
class AnswerEnvelope:
    query_id: str
    text: str
    backend_id: str
    token_count: int
    trace: LatencyTrace | None = None
    sim_durations_ms: dict[str, float] = field(default_factory=dict)
    error: str | None = None
    item_id: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_json(self) -> dict:
        d = {
            "type": "answer",
            "query_id": self.query_id,
            "text": self.text,
            "backend_id": self.backend_id,
            "token_count": self.token_count,
            "sim_durations_ms": self.sim_durations_ms,
        }
        if self.trace is not None:
            d["trace"] = self.trace.to_json()
        if self.error is not None:
            d["error"] = self.error
        if self.item_id is not None:
            d["item_id"] = self.item_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AnswerEnvelope":
        return cls(
            query_id=d["query_id"],
            text=d.get("text", ""),
            backend_id=d.get("backend_id", ""),
            token_count=int(d.get("token_count", 0)),
            trace=LatencyTrace.from_json(d["trace"]) if d.get("trace") else None,
            sim_durations_ms=dict(d.get("sim_durations_ms", {})),
            error=d.get("error"),
            item_id=d.get("item_id"),
        )
