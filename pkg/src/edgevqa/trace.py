"""Latency traces: ordered stage timestamps from capture to response receipt.

Timestamps are microseconds on the shared benchmark clock. Six derived
durations partition the end-to-end interval exactly:

    network_up   = rx_gateway - capture      (frame + query transit)
    preprocess   = preprocess_done - rx_gateway
    fusion       = fusion_done - preprocess_done
    generation   = generation_done - fusion_done
    text_decode  = decode_done - generation_done
    network_down = response_received - decode_done
"""

from __future__ import annotations

from dataclasses import dataclass

TIMESTAMP_FIELDS = (
    "capture_ts",
    "tx_start_ts",
    "rx_gateway_ts",
    "preprocess_done_ts",
    "fusion_done_ts",
    "generation_done_ts",
    "decode_done_ts",
    "response_received_ts",
)

DURATION_KEYS = (
    "network_up",
    "preprocess",
    "fusion",
    "generation",
    "text_decode",
    "network_down",
)


class TraceError(Exception):
    pass


@dataclass(frozen=True)
class LatencyTrace:
    capture_ts: int
    tx_start_ts: int
    rx_gateway_ts: int
    preprocess_done_ts: int
    fusion_done_ts: int
    generation_done_ts: int
    decode_done_ts: int
    response_received_ts: int

    def validate(self) -> None:
        values = [getattr(self, name) for name in TIMESTAMP_FIELDS]
        for earlier, later, name in zip(values, values[1:], TIMESTAMP_FIELDS[1:]):
            if later < earlier:
                raise TraceError(f"{name} precedes its predecessor ({later} < {earlier})")

    @property
    def e2e_ms(self) -> float:
        return (self.response_received_ts - self.capture_ts) / 1000.0

    def durations_ms(self) -> dict[str, float]:
        return {
            "network_up": (self.rx_gateway_ts - self.capture_ts) / 1000.0,
            "preprocess": (self.preprocess_done_ts - self.rx_gateway_ts) / 1000.0,
            "fusion": (self.fusion_done_ts - self.preprocess_done_ts) / 1000.0,
            "generation": (self.generation_done_ts - self.fusion_done_ts) / 1000.0,
            "text_decode": (self.decode_done_ts - self.generation_done_ts) / 1000.0,
            "network_down": (self.response_received_ts - self.decode_done_ts) / 1000.0,
        }

    def stage_durations_ms(self) -> dict[str, float]:
        d = self.durations_ms()
        return {k: d[k] for k in ("preprocess", "fusion", "generation", "text_decode")}

    def to_json(self) -> dict:
        return {name: getattr(self, name) for name in TIMESTAMP_FIELDS}

    @classmethod
    def from_json(cls, d: dict) -> "LatencyTrace":
        return cls(**{name: int(d[name]) for name in TIMESTAMP_FIELDS})

    @classmethod
    def from_durations_ms(cls, durations: dict[str, float], capture_ts: int = 0) -> "LatencyTrace":
        """Build a trace from the six durations; tx_start coincides with capture."""
        t = capture_ts
        stamps = [t, t]  # capture, tx_start
        for key in DURATION_KEYS:
            t += round(durations.get(key, 0.0) * 1000)
            stamps.append(t)
        # stamps: capture, tx_start, rx_gateway, preprocess, fusion,
        # generation, decode, response_received
        return cls(*stamps)
