"""Mock backend determinism/calibration, profiles, WAN injection, remote HTTP."""

import asyncio
import json
import math
import random

import pytest

from edgevqa.backends import (
    BackendProfile,
    InvalidProfile,
    MissingGold,
    MockVLMBackend,
    ProfileRegistry,
    RemoteError,
    RemoteHttpBackend,
    RemoteTimeout,
    RemoteUnreachable,
    UnknownProfile,
    WanLatencyInjector,
    derive_rng,
    sample_stage_latencies,
    sample_wan_legs,
    wrong_answer,
)
from edgevqa.dataset import generate_synthetic_manifest, make_answer_table
from edgevqa.envelopes import QueryEnvelope


def make_profile(**over):
    base = dict(
        name="llama-mock",
        family="llama",
        stage_medians_ms={"preprocess": 24.0, "fusion": 144.0, "generation": 1392.0, "text_decode": 40.0},
        stage_sigma=0.08,
        default_accuracy=0.41,
        seed=1177,
    )
    base.update(over)
    return BackendProfile(**base)


def query_for(item, session="s1"):
    return QueryEnvelope(
        query_id=f"q-{item.id}",
        session_id=session,
        text=item.question,
        qtype=item.qtype,
        choices=item.choices,
        category=item.category,
        item_id=item.id,
    )


class TestProfiles:
    def test_builtin_profiles_load(self):
        reg = ProfileRegistry()
        assert {"edge-llama", "cloud-llama", "edge-qwen"} <= set(reg.names())

    def test_unknown_profile(self):
        with pytest.raises(UnknownProfile):
            ProfileRegistry().get("nonexistent")

    def test_llama_generation_share_enforced(self):
        with pytest.raises(InvalidProfile):
            make_profile(
                stage_medians_ms={"preprocess": 400.0, "fusion": 400.0, "generation": 400.0, "text_decode": 400.0}
            ).validate()

    def test_probability_bounds(self):
        with pytest.raises(InvalidProfile):
            make_profile(default_accuracy=1.2).validate()

    def test_positive_medians(self):
        with pytest.raises(InvalidProfile):
            make_profile(
                stage_medians_ms={"preprocess": 0.0, "fusion": 1.0, "generation": 100.0, "text_decode": 1.0},
                family="generic",
            ).validate()

    def test_extra_dir_overrides(self, tmp_path):
        custom = make_profile(name="edge-llama", default_accuracy=0.9)
        (tmp_path / "edge-llama.json").write_text(json.dumps(custom.to_json()))
        reg = ProfileRegistry(extra_dirs=(tmp_path,))
        assert reg.get("edge-llama").default_accuracy == 0.9

    def test_default_totals_match_published_means(self):
        reg = ProfileRegistry()
        assert reg.get("edge-llama").total_median_ms() == pytest.approx(1600.0)
        share = reg.get("edge-llama").stage_medians_ms["generation"] / 1600.0
        assert share > 0.85
        qwen_total = reg.get("edge-qwen").total_median_ms()
        assert qwen_total < 1000.0
        assert qwen_total < 0.5 * 1685.20


class TestSampling:
    def test_sigma_zero_gives_exact_medians(self):
        p = make_profile(stage_sigma=0.0)
        rng = derive_rng(1)
        durations = sample_stage_latencies(p, rng)
        assert durations == p.stage_medians_ms

    def test_expected_total_near_median_sum(self):
        p = make_profile()
        rng = random.Random(5)
        n = 20_000
        total = sum(sum(sample_stage_latencies(p, rng).values()) for _ in range(n)) / n
        expected = p.total_median_ms() * math.exp(p.stage_sigma**2 / 2)
        assert total == pytest.approx(expected, rel=0.01)

    def test_durations_positive(self):
        p = make_profile(stage_sigma=0.5)
        rng = random.Random(6)
        for _ in range(1000):
            assert all(v > 0 for v in sample_stage_latencies(p, rng).values())

    def test_wan_legs(self):
        rng = random.Random(7)
        n = 20_000
        total = sum(sum(sample_wan_legs({"mean": 85.17, "jitter": 5.0}, rng)) for _ in range(n)) / n
        assert total == pytest.approx(85.17, rel=0.02)
        assert sample_wan_legs({"mean": 0.0, "jitter": 0.0}, rng) == (0.0, 0.0)


class TestWrongAnswer:
    def test_yes_no_negation(self):
        assert wrong_answer("yes_no", "yes", None) == "no"
        assert wrong_answer("yes_no", "No", None) == "yes"

    def test_mc_lexicographic_next(self):
        assert wrong_answer("multiple_choice", "blue", ["red", "blue", "green"]) == "green"
        assert wrong_answer("multiple_choice", "red", ["red", "blue", "green"]) == "blue"

    def test_free_form_unknown_guard(self):
        assert wrong_answer("free_form", "red", None) == "unknown"
        assert wrong_answer("free_form", "unknown", None) == "n/a"


class TestMockBackend:
    def test_p1_always_gold(self):
        m = generate_synthetic_manifest("robo2vlm", 50, seed=2)
        backend = MockVLMBackend(
            make_profile(default_accuracy=1.0), make_answer_table(m)
        )
        for item in m.items:
            assert backend.sample_item(query_for(item)).text == item.gold

    def test_p0_yes_no_negated(self):
        m = generate_synthetic_manifest("robo2vlm", 50, seed=2)
        backend = MockVLMBackend(
            make_profile(default_accuracy=0.0), make_answer_table(m)
        )
        for item in m.items:
            got = backend.sample_item(query_for(item)).text
            assert got != item.gold
            if item.qtype == "yes_no":
                assert got == ("no" if item.gold == "yes" else "yes")

    def test_missing_gold(self):
        backend = MockVLMBackend(make_profile(), {})
        item = generate_synthetic_manifest("robo2vlm", 1, seed=2).items[0]
        with pytest.raises(MissingGold):
            backend.sample_item(query_for(item))

    def test_live_query_canned(self):
        backend = MockVLMBackend(make_profile())
        q = QueryEnvelope(query_id="op-1", session_id="s", text="what do you see?")
        assert backend.sample_item(q).text == "mock: no gold answer"

    def test_reproducible_and_order_independent(self):
        m = generate_synthetic_manifest("robo2vlm", 100, seed=3)
        table = make_answer_table(m)
        backend = MockVLMBackend(make_profile(), table)
        forward = [backend.sample_item(query_for(i)) for i in m.items]
        backward = [backend.sample_item(query_for(i)) for i in reversed(m.items)]
        assert forward == list(reversed(backward))
        again = [backend.sample_item(query_for(i)) for i in m.items]
        assert forward == again

    def test_law_of_large_numbers(self):
        """n=1000 observed accuracy consistent with p at alpha=0.01."""
        p = 0.41
        n = 1000
        m = generate_synthetic_manifest("robo2vlm", n, seed=1001, image_size=(8, 8))
        backend = MockVLMBackend(make_profile(default_accuracy=p), make_answer_table(m))
        correct = sum(backend.sample_item(query_for(i)).text == i.gold for i in m.items)
        sigma = math.sqrt(p * (1 - p) / n)
        z_99 = 2.576
        assert abs(correct / n - p) <= z_99 * sigma

    def test_token_count_capped(self):
        m = generate_synthetic_manifest("robo2vlm", 5, seed=2)
        table = {i.id: "word " * 80 for i in m.items}
        backend = MockVLMBackend(make_profile(default_accuracy=1.0), table)
        for item in m.items:
            r = backend.sample_item(query_for(item))
            assert r.token_count <= 50

    def test_backend_sleeps_scaled(self):
        async def scenario():
            m = generate_synthetic_manifest("robo2vlm", 1, seed=2)
            profile = make_profile(
                stage_medians_ms={"preprocess": 1.0, "fusion": 1.0, "generation": 50.0, "text_decode": 1.0},
                family="generic",
                stage_sigma=0.0,
            )
            backend = MockVLMBackend(profile, make_answer_table(m), time_scale=0.1)
            loop = asyncio.get_event_loop()
            t0 = loop.time()
            result, stamps = await backend.infer(None, query_for(m.items[0]))
            elapsed = loop.time() - t0
            assert 0.003 <= elapsed < 0.1  # 5.2 ms of scaled sleeps plus slop
            assert stamps["fusion"] <= stamps["generation"] <= stamps["text_decode"]
            assert result.stage_ms["generation"] == 50.0

        asyncio.run(scenario())


class TestWanInjector:
    def test_wrapping_preserves_answers_and_stages(self):
        m = generate_synthetic_manifest("robo2vlm", 60, seed=4)
        table = make_answer_table(m)
        profile = make_profile()
        plain = MockVLMBackend(profile, table, time_scale=0.0)
        wrapped = WanLatencyInjector(
            MockVLMBackend(profile, table, time_scale=0.0),
            {"mean": 85.17, "jitter": 5.0},
            seed=profile.seed,
            time_scale=0.0,
        )

        async def run_all(backend):
            return [await backend.infer(None, query_for(i)) for i in m.items]

        edge = asyncio.run(run_all(plain))
        cloud = asyncio.run(run_all(wrapped))
        for (er, _), (cr, _) in zip(edge, cloud):
            assert er.text == cr.text
            assert er.stage_ms == cr.stage_ms
            assert (cr.wan_up_ms > 0 or cr.wan_down_ms > 0)
            assert er.wan_up_ms == 0.0

    def test_mean_added_delay_near_config(self):
        m = generate_synthetic_manifest("robo2vlm", 200, seed=5)
        wrapped = WanLatencyInjector(
            MockVLMBackend(make_profile(), make_answer_table(m), time_scale=0.0),
            {"mean": 85.17, "jitter": 5.0},
            seed=1177,
            time_scale=0.0,
        )

        async def run_all():
            total = 0.0
            for i in m.items:
                r, _ = await wrapped.infer(None, query_for(i))
                total += r.wan_up_ms + r.wan_down_ms
            return total / len(m.items)

        assert asyncio.run(run_all()) == pytest.approx(85.17, rel=0.05)


async def _stub_http_server(handler):
    """Tiny HTTP/1.1 stub: handler(body_dict) -> (status, payload_dict, delay_s)."""

    async def on_client(reader, writer):
        request = await reader.readuntil(b"\r\n\r\n")
        headers = request.decode("latin1").split("\r\n")
        length = 0
        for line in headers:
            if line.lower().startswith("content-length:"):
                length = int(line.split(":", 1)[1])
        body = json.loads(await reader.readexactly(length)) if length else {}
        status, payload, delay = handler(body)
        if delay:
            await asyncio.sleep(delay)
        raw = json.dumps(payload).encode()
        writer.write(
            f"HTTP/1.1 {status} X\r\nContent-Type: application/json\r\n"
            f"Content-Length: {len(raw)}\r\nConnection: close\r\n\r\n".encode() + raw
        )
        await writer.drain()
        writer.close()

    server = await asyncio.start_server(on_client, "127.0.0.1", 0)
    return server, server.sockets[0].getsockname()[1]


def _frame():
    from edgevqa.protocol import FrameEnvelope, PixelFormat

    return FrameEnvelope(0, 0, 2, 2, PixelFormat.RAW_RGB8, b"\x00" * 12)


class TestRemoteBackend:
    def test_echo_stub(self):
        async def scenario():
            seen = {}

            def handler(body):
                seen.update(body)
                return 200, {"text": "ok", "token_count": 1}, 0

            server, port = await _stub_http_server(handler)
            backend = RemoteHttpBackend(f"http://127.0.0.1:{port}/infer", timeout_s=5.0)
            q = QueryEnvelope(query_id="q1", session_id="s", text="hello?")
            result, _ = await backend.infer(_frame(), q)
            assert result.text == "ok"
            assert seen["prompt"] == "hello?"
            assert seen["params"] == {"greedy": True, "max_new_tokens": 50, "stop_on_eos": True}
            # no remote timings: everything attributed to generation
            assert result.stage_ms["generation"] > 0
            assert result.stage_ms["fusion"] == 0.0
            server.close()

        asyncio.run(scenario())

    def test_reported_timings_passed_through(self):
        async def scenario():
            def handler(body):
                return 200, {"text": "ok", "timings_ms": {"fusion": 10.0, "generation": 100.0}}, 0

            server, port = await _stub_http_server(handler)
            backend = RemoteHttpBackend(f"http://127.0.0.1:{port}/infer")
            result, _ = await backend.infer(_frame(), QueryEnvelope("q", "s", text="x"))
            assert result.stage_ms == {"preprocess": 0.0, "fusion": 10.0, "generation": 100.0, "text_decode": 0.0}
            server.close()

        asyncio.run(scenario())

    def test_unreachable(self):
        async def scenario():
            backend = RemoteHttpBackend("http://127.0.0.1:1/infer", timeout_s=1.0)
            with pytest.raises(RemoteUnreachable):
                await backend.infer(_frame(), QueryEnvelope("q", "s", text="x"))

        asyncio.run(scenario())

    def test_timeout(self):
        async def scenario():
            server, port = await _stub_http_server(lambda body: (200, {"text": "late"}, 2.0))
            backend = RemoteHttpBackend(f"http://127.0.0.1:{port}/infer", timeout_s=1.0)
            with pytest.raises(RemoteTimeout):
                await backend.infer(_frame(), QueryEnvelope("q", "s", text="x"))
            server.close()

        asyncio.run(scenario())

    def test_http_error(self):
        async def scenario():
            server, port = await _stub_http_server(lambda body: (503, {"err": "busy"}, 0))
            backend = RemoteHttpBackend(f"http://127.0.0.1:{port}/infer")
            with pytest.raises(RemoteError) as exc:
                await backend.infer(_frame(), QueryEnvelope("q", "s", text="x"))
            assert exc.value.status == 503
            server.close()

        asyncio.run(scenario())
