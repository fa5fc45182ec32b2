import json
import logging
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechalign.generation import (
    DESCRIPTIVE,
    DESCRIPTIVE_PROMPT,
    CAPTION,
    SEED_COPY,
    ChatClient,
    ChatMessage,
    ChatRequest,
    GenerationMode,
    OpenQA,
    RequestLog,
    ResponseCache,
    RetryPolicy,
    SamplingConfig,
    TrainingPair,
    cache_key,
    dump_pairs,
    estimate_volume,
    generate_targets,
    load_pairs,
    parse_qa_pairs,
    plan_requests,
    render_context,
)
from speechalign.metadata import Manifest, UtteranceRecord
from speechalign.mockserver import MockChatServer
from speechalign.seed import SeedTranscript, build_seed_transcript
from speechalign.synthetic import sample_manifest

SEED = SeedTranscript("[00:00:00-00:00:03] How are you? (Gender: Female, Emotion: Happy)", "u1")
FAST = RetryPolicy(base_delay=0.001)


def client(url, **kw):
    return ChatClient(url, "mock-model", retry=kw.pop("retry", FAST), **kw)


def test_mode_parse():
    assert GenerationMode.parse("openqa:3") == OpenQA(3)
    assert str(OpenQA(1)) == "openqa:1"
    assert GenerationMode.parse("descriptive") == DESCRIPTIVE
    with pytest.raises(ValueError):
        GenerationMode.parse("summary")
    with pytest.raises(ValueError):
        GenerationMode.parse("seedcopy:2")


def test_descriptive_context():
    msgs = render_context(SEED, DESCRIPTIVE)
    assert [m.role for m in msgs] == ["user"]
    assert msgs[0].content.endswith("What can you hear from the audio?")
    assert SEED.text in msgs[0].content


def test_seedcopy_and_caption_contexts():
    assert render_context(SEED, SEED_COPY) == []
    msgs = render_context(SEED, CAPTION, system_prompt="be brief")
    assert [m.role for m in msgs] == ["system", "user"]
    assert msgs[0].content == "be brief"


def test_openqa_prompt_asks_for_k():
    assert "3 open-ended question-answer pairs" in render_context(SEED, OpenQA(3))[0].content
    assert "1 open-ended question-answer pair " in render_context(SEED, OpenQA(1))[0].content


def test_template_missing_placeholder():
    with pytest.raises(ValueError):
        render_context(SEED, DESCRIPTIVE, prompt_template="{seed} only")


def test_cache_key_examples():
    req = ChatRequest("m", (ChatMessage("user", "x"),), SamplingConfig(1.0))
    assert cache_key(req) == cache_key(ChatRequest("m", (ChatMessage("user", "x"),), SamplingConfig(1.0)))
    assert cache_key(req) != cache_key(ChatRequest("m", req.messages, SamplingConfig(0.7)))
    assert cache_key(req, 0) != cache_key(req, 1)


def test_wire_seed_offset():
    req = ChatRequest("m", (ChatMessage("user", "x"),), SamplingConfig(seed=10))
    assert req.body(3)["seed"] == 13
    assert "seed" not in ChatRequest("m", req.messages).body(0)


def test_parse_qa_pairs():
    text = "Q: Who speaks?\nA: A woman.\n\nQ: How does she sound?\nA: Happy.\nQ: dangling"
    assert parse_qa_pairs(text) == [("Who speaks?", "A woman."), ("How does she sound?", "Happy.")]
    assert parse_qa_pairs("A: orphan answer") == []
    assert parse_qa_pairs("1. **Q1:** What?\n   **A1:** That.") == [("What?", "That.")]


def test_training_pair_rejects_empty_target():
    with pytest.raises(ValueError):
        TrainingPair("u", "descriptive", (), "   ", 0)


def test_pairs_round_trip(tmp_path):
    res = generate_targets(sample_manifest(), SEED_COPY, SamplingConfig(), 2, None)
    dump_pairs(res.pairs, tmp_path / "p.jsonl")
    assert load_pairs(tmp_path / "p.jsonl") == res.pairs


def test_seedcopy_target_is_seed():
    m = sample_manifest()
    res = generate_targets(m, SEED_COPY, SamplingConfig(), 1, None)
    assert [p.target for p in res.pairs] == [build_seed_transcript(r).text for r in m.records]
    assert res.attempted_requests == 0


def test_plan_volume_example():
    m = Manifest(tuple(UtteranceRecord(f"i{i}", "IEMOCAP", 2.0) for i in range(4150)))
    plan = plan_requests(m, DESCRIPTIVE, SamplingConfig(), 5, "m")
    assert len(plan) == 20750
    assert estimate_volume(plan)["requests"] == 20750
    assert all(len(req.messages) == 1 and req.messages[0].role == "user" for _, req, _ in plan[:50])


def test_descriptive_against_server(tmp_path):
    m = sample_manifest()
    with MockChatServer() as srv:
        c = client(srv.url)
        res = generate_targets(m, DESCRIPTIVE, SamplingConfig(), 2, c, parallelism=2)
    assert len(res.pairs) == 6 and res.failed == []
    assert [(p.record_id, p.caption_index) for p in res.pairs] == [
        (r.id, i) for r in m.records for i in range(2)]
    assert res.pairs[0].context[0].content.endswith(DESCRIPTIVE_PROMPT)


def test_openqa_splits_into_k_pairs():
    m = Manifest(sample_manifest().records[:1])
    with MockChatServer() as srv:
        res = generate_targets(m, OpenQA(3), SamplingConfig(), 1, client(srv.url))
    assert [p.caption_index for p in res.pairs] == [0, 1, 2]
    assert {p.record_id for p in res.pairs} == {"sample-0001"}
    assert res.pairs[1].context[0].content.endswith("Question 2 about the audio (" +
                                                    res.pairs[1].context[0].content.split("(")[-1])


def test_openqa_keeps_first_k():
    m = Manifest(sample_manifest().records[:1])
    reply = lambda body: "\n".join(f"Q: q{i}?\nA: a{i}" for i in range(5))
    with MockChatServer(reply=reply) as srv:
        res = generate_targets(m, OpenQA(3), SamplingConfig(), 1, client(srv.url))
    assert [p.target for p in res.pairs] == ["a0", "a1", "a2"]


def test_empty_completion_retried_once_then_failed():
    calls = []

    def reply(body):
        calls.append(1)
        return ""
    m = Manifest(sample_manifest().records[:1])
    with MockChatServer(reply=reply) as srv:
        res = generate_targets(m, DESCRIPTIVE, SamplingConfig(), 1, client(srv.url))
    assert res.failed == ["sample-0001"] and res.pairs == []
    assert len(calls) == 2


def test_exhaustion_marks_failed_and_run_continues():
    m = sample_manifest()
    with MockChatServer(failure_rate=1.0) as srv:
        c = client(srv.url)
        res = generate_targets(m, DESCRIPTIVE, SamplingConfig(), 1, c)
        assert srv.requests == 3 * 5
    assert res.failed == [r.id for r in m.records]


def test_non_retryable_status_stops(tmp_path):
    import http.server
    import threading as th

    hits = []

    class H(http.server.BaseHTTPRequestHandler):
        def log_message(self, *a):
            pass

        def do_POST(self):
            hits.append(1)
            self.rfile.read(int(self.headers["Content-Length"]))
            self.send_response(400)
            self.send_header("Content-Length", "2")
            self.end_headers()
            self.wfile.write(b"{}")

    srv = http.server.ThreadingHTTPServer(("127.0.0.1", 0), H)
    t = th.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        c = client(f"http://127.0.0.1:{srv.server_address[1]}/v1")
        comp = c.complete(ChatRequest("m", (ChatMessage("user", "x"),)))
    finally:
        srv.shutdown()
        srv.server_close()
    assert comp.text is None and comp.attempts == 1 and len(hits) == 1


def test_parallelism_bound_respected(tmp_path):
    m = Manifest(tuple(UtteranceRecord(f"u{i}", "s", 1.0) for i in range(12)))
    log = RequestLog(tmp_path / "req.jsonl")
    with MockChatServer(latency=0.05) as srv:
        generate_targets(m, DESCRIPTIVE, SamplingConfig(), 1, client(srv.url, log=log), parallelism=3)
        assert 1 < srv.max_in_flight <= 3
    entries = [json.loads(line) for line in open(tmp_path / "req.jsonl")]
    assert len(entries) == 12
    # at no instant do more than 3 logged requests overlap
    events = sorted([(e["t_start"], 1) for e in entries] + [(e["t_end"], -1) for e in entries],
                    key=lambda x: (x[0], x[1]))
    live = peak = 0
    for _, d in events:
        live += d
        peak = max(peak, live)
    assert peak <= 3


def test_warm_cache_zero_calls_and_bytes(tmp_path):
    m = sample_manifest()
    with MockChatServer() as srv:
        c1 = client(srv.url, cache=ResponseCache(tmp_path / "c"))
        r1 = generate_targets(m, DESCRIPTIVE, SamplingConfig(), 2, c1)
    c2 = client("http://127.0.0.1:9/v1", cache=ResponseCache(tmp_path / "c"))
    r2 = generate_targets(m, DESCRIPTIVE, SamplingConfig(), 2, c2)
    assert c2.network_calls == 0
    dump_pairs(r1.pairs, tmp_path / "a.jsonl")
    dump_pairs(r2.pairs, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_concurrent_cache_writes(tmp_path):
    cache = ResponseCache(tmp_path)
    body = json.dumps({"choices": [{"message": {"content": "x" * 1000}}]})

    def work():
        for _ in range(50):
            cache.put("k", body)
            got = cache.get("k")
            assert got is None or got == body
    ts = [threading.Thread(target=work) for _ in range(4)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert cache.get("k") == body


def test_retry_delay_schedule():
    import random
    p = RetryPolicy()
    rng = random.Random(0)
    for attempt, base in [(1, 1.0), (2, 2.0), (3, 4.0), (4, 8.0)]:
        d = p.delay(attempt, rng)
        assert 0.8 * base <= d <= 1.2 * base


@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 3))
def test_pair_count_property(k, captions, n_fail_records):
    """pairs = successful records x captions x k."""
    m = sample_manifest()
    failing = {r.id for r in m.records[:n_fail_records]}

    class Fake:
        model = "m"
        network_calls = 0

        def complete(self, req, idx, tag=""):
            from speechalign.generation import Completion
            if tag in failing:
                return Completion(None, "k", 5, False, "HTTP 500")
            return Completion("\n".join(f"Q: q{i}\nA: a{i}" for i in range(k)), "k", 1, False)
    res = generate_targets(m, OpenQA(k), SamplingConfig(), captions, Fake())
    assert len(res.pairs) == (3 - min(n_fail_records, 3)) * captions * k
