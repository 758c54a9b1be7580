import json
import logging
import statistics
import threading
import time

import httpx
import pytest

from rxndp.backend import (
    AuthError, BackendConfigError, BackendError, BackendTimeout, CompletionRequest, HttpBackend, HttpConfig,
    NoiseConfig, OracleBackend, OracleError, RateLimitError, ReplayBackend, ReplayMiss, TokenBucket,
    TranscriptRecorder, gemini_payload, make_backend, openai_payload, oracle_reply,
)
from rxndp.geometry import evaluate
from rxndp.model import AnnotatedDiagram, BBox, Component, ReactionAnnotation
from rxndp.parsing import parse_output, resolve_bivp
from rxndp.prompts import PromptKind, build_prompt
from rxndp.render import assign_indices

KEY = "sk-test-0123456789abcdef"


def chain_diagram():
    """Three 1-to-1 reactions over four well separated boxes."""
    boxes = [BBox(0.05 + 0.24 * i, 0.4, 0.2 + 0.24 * i, 0.6) for i in range(4)]
    rxns = [ReactionAnnotation([Component.mol(boxes[i])], [Component.text("Pd/C, H2")], [Component.mol(boxes[i + 1])])
            for i in range(3)]
    return AnnotatedDiagram("images/chain.png", 800, 400, boxes, rxns, "single-line")


def score(diagram, reply, mode):
    index_map = assign_indices(diagram.molecules)
    pred = resolve_bivp(parse_output(reply, "BIVP"), index_map)
    _, tp, fp, fn = evaluate(diagram.reactions, pred, mode)
    return tp, fp, fn


def f1(tp, fp, fn):
    return 2 * tp / (2 * tp + fp + fn) if tp + fp + fn else 1.0


# --- oracle -----------------------------------------------------------------------

def test_oracle_zero_noise_is_exact(corpus400):
    for d in corpus400[0][::25]:
        reply = oracle_reply(d, "BIVP", assign_indices(d.molecules))
        for mode in ("soft", "hybrid"):
            tp, fp, fn = score(d, reply, mode)
            assert fp == fn == 0 and tp == len(d.reactions)


def test_oracle_full_drop():
    d = chain_diagram()
    assert oracle_reply(d, "BIVP", assign_indices(d.molecules), NoiseConfig(drop_reaction_rate=1.0)) == "[]"


def test_index_corruption_kills_soft_f1():
    # one reaction among separated boxes: every corrupted index lands on a different box,
    # and no other true reaction exists for the corrupted one to hit
    chain = chain_diagram()
    d = AnnotatedDiagram("images/one.png", 800, 400, chain.molecules, chain.reactions[1:2], "single-line")
    for seed in range(20):
        reply = oracle_reply(d, "BIVP", assign_indices(d.molecules), NoiseConfig(index_corrupt_rate=1.0, seed=seed))
        assert score(d, reply, "soft")[0] == 0


def test_short_typos_leave_hybrid_unchanged(corpus400):
    noise = NoiseConfig(text_typo_rate=1.0, typo_min_length=5, seed=3)
    changed = 0
    for d in corpus400[0][::10]:
        index_map = assign_indices(d.molecules)
        clean = oracle_reply(d, "BIVP", index_map)
        noisy = oracle_reply(d, "BIVP", index_map, noise)
        changed += clean != noisy
        assert score(d, noisy, "hybrid") == (len(d.reactions), 0, 0)
    assert changed > 10


def test_role_swap_breaks_matches():
    d = chain_diagram()
    reply = oracle_reply(d, "BIVP", assign_indices(d.molecules), NoiseConfig(role_swap_rate=1.0))
    assert score(d, reply, "soft") == (0, 3, 3)


def test_oracle_deterministic_and_seeded(corpus4):
    d = corpus4[0][2]
    noise = NoiseConfig(0.3, 0.3, 0.3, 0.3, seed=9)
    m = assign_indices(d.molecules)
    assert oracle_reply(d, "BIVP", m, noise) == oracle_reply(d, "BIVP", m, noise)
    assert oracle_reply(d, "BROS", None, noise) == oracle_reply(d, "BROS", None, noise)


def test_drop_noise_monotone_on_average(corpus400):
    diagrams = corpus400[0][::20]
    means = []
    for rate in (0.0, 0.25, 0.5, 0.75, 1.0):
        vals = []
        for seed in range(50):
            tp = fp = fn = 0
            for d in diagrams:
                reply = oracle_reply(d, "BIVP", assign_indices(d.molecules), NoiseConfig(drop_reaction_rate=rate, seed=seed))
                a, b, c = score(d, reply, "soft")
                tp, fp, fn = tp + a, fp + b, fn + c
            vals.append(f1(tp, fp, fn))
        means.append(statistics.fmean(vals))
    assert means[0] == 1.0
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_oracle_missing_index():
    d = chain_diagram()
    partial = {1: d.molecules[0], 2: d.molecules[1]}
    with pytest.raises(OracleError):
        oracle_reply(d, "BIVP", partial)
    assert len(json.loads(oracle_reply(d, "BIVP", partial, missing="drop"))) == 1


def test_noise_config_validation():
    with pytest.raises(ValueError):
        NoiseConfig(drop_reaction_rate=1.5)
    assert NoiseConfig().is_zero and not NoiseConfig(text_typo_rate=0.1).is_zero


def test_oracle_backend_answers(corpus4):
    diagrams, images = corpus4
    d = diagrams[3]
    backend = OracleBackend(diagrams)
    vqa = CompletionRequest(build_prompt(PromptKind.VQA_REACTION_COUNT), images[d], metadata={"image_id": d.id})
    assert json.loads(backend.complete(vqa)) == {"reaction_count": len(d.reactions)}
    ocr = CompletionRequest(build_prompt("ocr"), b"png", metadata={"ocr_truth": "NaH THF"})
    assert backend.complete(ocr) == "NaH THF"
    with pytest.raises(OracleError):
        backend.complete(CompletionRequest("hello"))
    assert OracleBackend(diagrams, NoiseConfig(drop_reaction_rate=0.5)).backend_id != backend.backend_id


def test_request_needs_image_for_templates():
    with pytest.raises(ValueError):
        CompletionRequest(build_prompt("bivp"))
    with pytest.raises(ValueError):
        CompletionRequest("x", max_tokens=0)


# --- replay -----------------------------------------------------------------------

def test_replay_miss_and_roundtrip(tmp_path, corpus4):
    diagrams, images = corpus4
    d = diagrams[0]
    req = CompletionRequest(build_prompt("vqa_tree"), images[d], metadata={"image_id": d.id})
    with pytest.raises(ReplayMiss):
        ReplayBackend([]).complete(req)
    recorder = TranscriptRecorder(OracleBackend(diagrams))
    reply = recorder.complete(req)
    path = recorder.save(tmp_path / "t.json")
    assert ReplayBackend(path).complete(req) == reply
    other = CompletionRequest(build_prompt("vqa_tree"), images[diagrams[1]])
    with pytest.raises(ReplayMiss):
        ReplayBackend(path).complete(other)


def test_replay_bad_files(tmp_path):
    with pytest.raises(BackendConfigError):
        ReplayBackend(tmp_path / "none.json")
    bad = tmp_path / "bad.json"
    bad.write_text('[{"reply": "x"}]')
    with pytest.raises(BackendConfigError, match="entry 0"):
        ReplayBackend(bad)


def test_make_backend(tmp_path, monkeypatch):
    assert isinstance(make_backend("oracle"), OracleBackend)
    path = tmp_path / "t.json"
    path.write_text("[]")
    assert isinstance(make_backend(f"replay:{path}"), ReplayBackend)
    monkeypatch.delenv("RXNDP_API_KEY", raising=False)
    monkeypatch.setenv("RXNDP_API_URL", "http://llm.test/v1")
    with pytest.raises(BackendConfigError, match="RXNDP_API_KEY"):
        make_backend("http")
    with pytest.raises(BackendConfigError):
        make_backend("claude")


# --- http -------------------------------------------------------------------------

@pytest.fixture
def env(monkeypatch):
    monkeypatch.setenv("RXNDP_API_KEY", KEY)
    monkeypatch.setenv("RXNDP_API_URL", "http://llm.test/v1/chat")


def ok(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def request():
    return CompletionRequest(build_prompt("bivp"), b"\x89PNGfake")


def test_http_success_and_payload(env):
    seen = {}

    def handler(req):
        seen["auth"] = req.headers["authorization"]
        seen["body"] = json.loads(req.content)
        return ok("[]")

    backend = HttpBackend(HttpConfig(model="m1"), transport=httpx.MockTransport(handler))
    assert backend.complete(request()) == "[]"
    assert seen["auth"] == f"Bearer {KEY}"
    content = seen["body"]["messages"][0]["content"]
    assert [c["type"] for c in content] == ["text", "image_url", "text"]
    assert content[1]["image_url"]["url"].startswith("data:image/png;base64,")
    assert seen["body"]["temperature"] == 0


def test_gemini_payload_shape():
    body = gemini_payload(HttpConfig(api_style="gemini"), request())
    parts = body["contents"][0]["parts"]
    assert "inline_data" in parts[1] and body["generationConfig"]["temperature"] == 0
    assert openai_payload(HttpConfig(), CompletionRequest("plain"))["messages"][0]["content"] == [
        {"type": "text", "text": "plain"}]


def test_http_retries_transient(env):
    replies = iter([httpx.Response(429, headers={"retry-after": "3"}), httpx.Response(503), ok("done")])
    sleeps = []
    backend = HttpBackend(HttpConfig(backoff_base=0.5), transport=httpx.MockTransport(lambda r: next(replies)),
                          sleep=sleeps.append)
    assert backend.complete(request()) == "done"
    assert sleeps[:2] == [3.0, 1.0]


def test_http_gives_up(env):
    backend = HttpBackend(HttpConfig(max_retries=2), transport=httpx.MockTransport(lambda r: httpx.Response(429)),
                          sleep=lambda s: None)
    with pytest.raises(RateLimitError):
        backend.complete(request())

    def slow(req):
        raise httpx.ReadTimeout("slow", request=req)

    backend = HttpBackend(HttpConfig(max_retries=1), transport=httpx.MockTransport(slow), sleep=lambda s: None)
    with pytest.raises(BackendTimeout):
        backend.complete(request())


def test_http_auth_error_not_retried(env):
    calls = []

    def handler(req):
        calls.append(1)
        return httpx.Response(401)

    backend = HttpBackend(HttpConfig(), transport=httpx.MockTransport(handler), sleep=lambda s: None)
    with pytest.raises(AuthError):
        backend.complete(request())
    assert len(calls) == 1
    bad_shape = HttpBackend(HttpConfig(), transport=httpx.MockTransport(lambda r: httpx.Response(200, json={})))
    with pytest.raises(BackendError, match="response shape"):
        bad_shape.complete(request())


def test_http_in_flight_cap(env):
    lock = threading.Lock()
    state = {"now": 0, "peak": 0}

    def handler(req):
        with lock:
            state["now"] += 1
            state["peak"] = max(state["peak"], state["now"])
        time.sleep(0.03)
        with lock:
            state["now"] -= 1
        return ok("[]")

    backend = HttpBackend(HttpConfig(max_in_flight=2, rate_per_sec=1000, burst=100),
                          transport=httpx.MockTransport(handler))
    threads = [threading.Thread(target=backend.complete, args=(request(),)) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert state["peak"] == 2


def test_credentials_never_leak(env, caplog, tmp_path):
    caplog.set_level(logging.DEBUG)
    replies = iter([httpx.Response(429), ok("x")])
    backend = HttpBackend(HttpConfig(), transport=httpx.MockTransport(lambda r: next(replies)), sleep=lambda s: None)
    backend.complete(request())
    assert KEY not in repr(backend) and KEY not in caplog.text
    with pytest.raises(AuthError) as info:
        HttpBackend(HttpConfig(), transport=httpx.MockTransport(lambda r: httpx.Response(403))).complete(request())
    assert KEY not in str(info.value)
    cfg = tmp_path / "http.json"
    cfg.write_text(json.dumps({"model": "m", "api_key": "oops"}))
    with pytest.raises(BackendConfigError, match="api_key"):
        HttpConfig.from_file(cfg)


def test_token_bucket_waits():
    clock = [0.0]
    waits = []

    def sleep(s):
        waits.append(s)
        clock[0] += s

    bucket = TokenBucket(rate=2.0, burst=2, clock=lambda: clock[0], sleep=sleep)
    for _ in range(4):
        bucket.acquire()
    assert waits == pytest.approx([0.5, 0.5])
