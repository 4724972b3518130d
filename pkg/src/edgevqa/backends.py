"""Inference backends: a calibrated deterministic mock and a remote HTTP client.

The mock answers from the dataset's gold-answer table with configurable
per-category accuracy and sleeps through lognormal stage latencies, so
full-pipeline runs produce realistic wall-clock traces and exactly
reproducible simulated ones. Per-item draws are seeded by
(profile.seed, item_id), making results independent of processing order.
"""

from __future__ import annotations

import hashlib
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx

from edgevqa.clock import SYSTEM_CLOCK
from edgevqa.envelopes import QueryEnvelope
from edgevqa.evaluation import normalize_answer
from edgevqa.protocol import FrameEnvelope

STAGES = ("preprocess", "fusion", "generation", "text_decode")
BACKEND_STAGES = ("fusion", "generation", "text_decode")  # slept in the backend
DEFAULT_WAN_DELAY = {"mean": 85.17, "jitter": 5.0}


class BackendError(Exception):
    pass


class UnknownProfile(BackendError):
    pass


class MissingGold(BackendError):
    pass


class InvalidProfile(BackendError):
    pass


class RemoteUnreachable(BackendError):
    pass


class RemoteTimeout(BackendError):
    pass


class RemoteError(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"remote returned {status}: {body[:200]}")
        self.status = status
        self.body = body


@dataclass
class BackendProfile:
    """Latency and accuracy parameters for one (model, placement) pair."""

    name: str
    family: str
    stage_medians_ms: dict[str, float]
    stage_sigma: float = 0.08
    wan_delay_ms: dict[str, float] = field(default_factory=lambda: {"mean": 0.0, "jitter": 0.0})
    accuracy_by_category: dict[str, float] = field(default_factory=dict)
    default_accuracy: float = 0.5
    seed: int = 42
    input_size: tuple[int, int] = (224, 224)
    max_new_tokens: int = 50

    def validate(self) -> None:
        for stage in STAGES:
            median = self.stage_medians_ms.get(stage)
            if median is None or median <= 0:
                raise InvalidProfile(f"{self.name}: stage {stage} needs a positive median")
        probs = [self.default_accuracy, *self.accuracy_by_category.values()]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise InvalidProfile(f"{self.name}: accuracies must be within [0, 1]")
        if self.wan_delay_ms.get("mean", 0.0) < 0 or self.wan_delay_ms.get("jitter", 0.0) < 0:
            raise InvalidProfile(f"{self.name}: negative WAN delay")
        if self.family == "llama":
            total = sum(self.stage_medians_ms[s] for s in STAGES)
            if self.stage_medians_ms["generation"] / total <= 0.85:
                raise InvalidProfile(
                    f"{self.name}: llama-class profiles must spend >85% of inference in generation"
                )

    def accuracy_for(self, category: str | None) -> float:
        if category is not None and category in self.accuracy_by_category:
            return self.accuracy_by_category[category]
        return self.default_accuracy

    def total_median_ms(self) -> float:
        return sum(self.stage_medians_ms[s] for s in STAGES)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "family": self.family,
            "stage_medians_ms": self.stage_medians_ms,
            "stage_sigma": self.stage_sigma,
            "wan_delay_ms": self.wan_delay_ms,
            "accuracy_by_category": self.accuracy_by_category,
            "default_accuracy": self.default_accuracy,
            "seed": self.seed,
            "input_size": list(self.input_size),
            "max_new_tokens": self.max_new_tokens,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BackendProfile":
        profile = cls(
            name=d["name"],
            family=d.get("family", d["name"].split("-")[-1]),
            stage_medians_ms={k: float(v) for k, v in d["stage_medians_ms"].items()},
            stage_sigma=float(d.get("stage_sigma", 0.08)),
            wan_delay_ms={
                "mean": float(d.get("wan_delay_ms", {}).get("mean", 0.0)),
                "jitter": float(d.get("wan_delay_ms", {}).get("jitter", 0.0)),
            },
            accuracy_by_category={k: float(v) for k, v in d.get("accuracy_by_category", {}).items()},
            default_accuracy=float(d.get("default_accuracy", 0.5)),
            seed=int(d.get("seed", 42)),
            input_size=tuple(d.get("input_size", (224, 224))),
            max_new_tokens=int(d.get("max_new_tokens", 50)),
        )
        profile.validate()
        return profile


def load_profile(path: str | Path) -> BackendProfile:
    import json

    path = Path(path)
    try:
        return BackendProfile.from_json(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, KeyError) as e:
        raise InvalidProfile(f"cannot load profile {path}: {e}") from None


def builtin_profile_dir() -> Path:
    return Path(__file__).parent / "profiles"


class ProfileRegistry:
    """Read-only after startup: built-in profiles plus any --profile-dir."""

    def __init__(self, extra_dirs: tuple[str | Path, ...] = ()):
        self._profiles: dict[str, BackendProfile] = {}
        for directory in (builtin_profile_dir(), *extra_dirs):
            directory = Path(directory)
            if not directory.is_dir():
                continue
            for path in sorted(directory.glob("*.json")):
                profile = load_profile(path)
                self._profiles[profile.name] = profile

    def register(self, profile: BackendProfile) -> None:
        profile.validate()
        self._profiles[profile.name] = profile

    def get(self, name: str) -> BackendProfile:
        try:
            return self._profiles[name]
        except KeyError:
            raise UnknownProfile(
                f"profile {name!r}; known: {sorted(self._profiles)}"
            ) from None

    def names(self) -> list[str]:
        return sorted(self._profiles)


# -- seeded sampling ----------------------------------------------------------

def derive_rng(*parts) -> random.Random:
    """Stable RNG from arbitrary parts (process-hash independence matters)."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def sample_stage_latencies(profile: BackendProfile, rng: random.Random) -> dict[str, float]:
    """Four positive stage durations; lognormal around the profile medians.

    sigma == 0 short-circuits to the medians themselves so the degenerate
    distribution is exact (exp(log(m)) loses a ulp otherwise).
    """
    if profile.stage_sigma == 0:
        return dict(profile.stage_medians_ms)
    return {
        stage: rng.lognormvariate(math.log(profile.stage_medians_ms[stage]), profile.stage_sigma)
        for stage in STAGES
    }


def sample_wan_legs(wan: dict[str, float], rng: random.Random) -> tuple[float, float]:
    """One-way WAN delays (up, down); mean is the added round-trip mean."""
    mean, jitter = wan.get("mean", 0.0), wan.get("jitter", 0.0)
    if mean <= 0 and jitter <= 0:
        return 0.0, 0.0
    return (
        max(0.0, rng.gauss(mean / 2.0, jitter)),
        max(0.0, rng.gauss(mean / 2.0, jitter)),
    )


def wrong_answer(qtype: str, gold: str, choices: list[str] | None) -> str:
    """Deterministic incorrect answer, guaranteed to score as wrong."""
    if qtype == "multiple_choice" and choices:
        ordered = sorted(choices)
        try:
            idx = ordered.index(gold)
        except ValueError:
            return "unknown"
        return ordered[(idx + 1) % len(ordered)]
    if qtype == "yes_no":
        g = normalize_answer(gold)
        if g == "yes":
            return "no"
        if g == "no":
            return "yes"
    return "unknown" if normalize_answer(gold) != "unknown" else "n/a"


@dataclass
class InferenceResult:
    text: str
    token_count: int
    stage_ms: dict[str, float]  # sampled/reported durations for the four stages
    wan_up_ms: float = 0.0
    wan_down_ms: float = 0.0
    backend_id: str = ""


class MockVLMBackend:
    """Gold-answer mock with calibrated accuracy and stage latencies.

    Per item: one uniform draw decides correctness against the configured
    accuracy, then four lognormal draws produce the stage durations (in that
    order, so edge and cloud runs of one profile share answers and stage
    samples exactly). The backend sleeps through the fusion/generation/
    text_decode samples scaled by time_scale; stage-1 preprocess runs for
    real in the gateway.
    """

    def __init__(
        self,
        profile: BackendProfile,
        answer_table: dict[str, str] | None = None,
        *,
        time_scale: float = 1.0,
        clock=SYSTEM_CLOCK,
    ):
        profile.validate()
        self.profile = profile
        self.answer_table = answer_table
        self.time_scale = time_scale
        self.clock = clock
        self.backend_id = f"mock:{profile.name}"

    def sample_item(self, query: QueryEnvelope) -> InferenceResult:
        """Deterministic part of infer(); no sleeping."""
        profile = self.profile
        if query.item_id is not None:
            if self.answer_table is None or query.item_id not in self.answer_table:
                raise MissingGold(f"no gold answer for item {query.item_id!r}")
            rng = derive_rng(profile.seed, query.item_id)
            u = rng.random()
            stage_ms = sample_stage_latencies(profile, rng)
            gold = self.answer_table[query.item_id]
            correct = u < profile.accuracy_for(query.category)
            text = gold if correct else wrong_answer(query.qtype, gold, query.choices)
        else:
            rng = derive_rng(profile.seed, "live", query.query_id)
            stage_ms = sample_stage_latencies(profile, rng)
            text = "mock: no gold answer"
        words = text.split()
        if len(words) > profile.max_new_tokens:
            words = words[: profile.max_new_tokens]
            text = " ".join(words)
        return InferenceResult(
            text=text,
            token_count=max(1, len(words)),
            stage_ms=stage_ms,
            backend_id=self.backend_id,
        )

    async def infer(
        self, frame: FrameEnvelope | None, query: QueryEnvelope
    ) -> tuple[InferenceResult, dict[str, int]]:
        """Run stages 2-4; returns the result plus wall timestamps per stage."""
        result = self.sample_item(query)
        stamps: dict[str, int] = {}
        for stage in BACKEND_STAGES:
            await self.clock.sleep(result.stage_ms[stage] / 1000.0 * self.time_scale)
            stamps[stage] = self.clock.now_us()
        return result, stamps


class WanLatencyInjector:
    """Wraps a backend with seeded one-way WAN delays (the cloud deployment).

    WAN draws come from an independent RNG stream, so wrapping never perturbs
    the inner backend's answer/duration samples.
    """

    def __init__(
        self,
        inner,
        wan_delay_ms: dict[str, float],
        seed: int,
        *,
        time_scale: float = 1.0,
        clock=SYSTEM_CLOCK,
    ):
        self.inner = inner
        self.wan_delay_ms = dict(wan_delay_ms)
        self.seed = seed
        self.time_scale = time_scale
        self.clock = clock
        self.backend_id = f"wan+{inner.backend_id}"

    def sample_wan(self, query: QueryEnvelope) -> tuple[float, float]:
        key = query.item_id if query.item_id is not None else query.query_id
        return sample_wan_legs(self.wan_delay_ms, derive_rng(self.seed, "wan", key))

    async def infer(self, frame, query):
        up_ms, down_ms = self.sample_wan(query)
        await self.clock.sleep(up_ms / 1000.0 * self.time_scale)
        result, stamps = await self.inner.infer(frame, query)
        await self.clock.sleep(down_ms / 1000.0 * self.time_scale)
        result.wan_up_ms = up_ms
        result.wan_down_ms = down_ms
        result.backend_id = self.backend_id
        return result, stamps


class RemoteHttpBackend:
    """Generic HTTP inference client for attaching real VLM servers.

    POSTs {image_b64, prompt, qtype, choices, params} and expects
    {text, token_count?, timings_ms?}; see docs/backend-api.md. When the
    server reports no timings, the whole remote call is attributed to the
    generation stage.
    """

    def __init__(
        self,
        endpoint_url: str,
        *,
        greedy: bool = True,
        max_new_tokens: int = 50,
        stop_on_eos: bool = True,
        timeout_s: float = 30.0,
        clock=SYSTEM_CLOCK,
    ):
        self.endpoint_url = endpoint_url
        self.decode_params = {
            "greedy": greedy,
            "max_new_tokens": max_new_tokens,
            "stop_on_eos": stop_on_eos,
        }
        self.timeout_s = timeout_s
        self.clock = clock
        self.backend_id = f"remote:{endpoint_url}"

    async def infer(self, frame: FrameEnvelope, query: QueryEnvelope):
        import base64

        payload = {
            "image_b64": base64.b64encode(frame.data).decode("ascii") if frame else "",
            "pixel_format": frame.pixel_format.name.lower() if frame else "jpeg",
            "prompt": query.text,
            "qtype": query.qtype,
            "choices": query.choices,
            "params": self.decode_params,
        }
        started = time.monotonic()
        try:
            async with httpx.AsyncClient(timeout=self.timeout_s) as client:
                response = await client.post(self.endpoint_url, json=payload)
        except httpx.TimeoutException as e:
            raise RemoteTimeout(str(e)) from None
        except httpx.TransportError as e:
            raise RemoteUnreachable(str(e)) from None
        elapsed_ms = (time.monotonic() - started) * 1000.0
        if response.status_code >= 400:
            raise RemoteError(response.status_code, response.text)
        try:
            body = response.json()
            text = body["text"]
        except (ValueError, KeyError) as e:
            raise RemoteError(response.status_code, f"bad response body: {e}") from None
        timings = body.get("timings_ms") or {}
        stage_ms = {
            "preprocess": float(timings.get("preprocess", 0.0)),
            "fusion": float(timings.get("fusion", 0.0)),
            "generation": float(timings.get("generation", elapsed_ms if not timings else 0.0)),
            "text_decode": float(timings.get("text_decode", 0.0)),
        }
        now = self.clock.now_us()
        stamps = {stage: now for stage in BACKEND_STAGES}
        result = InferenceResult(
            text=str(text),
            token_count=int(body.get("token_count", len(str(text).split()) or 1)),
            stage_ms=stage_ms,
            backend_id=self.backend_id,
        )
        return result, stamps
