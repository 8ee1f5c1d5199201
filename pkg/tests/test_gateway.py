import json
from decimal import Decimal

import pytest

from metaextract.gateway import (
    Attachment,
    Backend,
    BackendTimeout,
    Gateway,
    MockBackend,
    ModelRequest,
    ParseFailure,
    TokenBucket,
    UnknownModel,
    estimate_tokens,
    parse_response_json,
    strip_code_fences,
)


class CountingBackend(Backend):
    name = "counting"

    def __init__(self, text='{"ok": true}', fail_times=0):
        self.text = text
        self.calls = 0
        self.fail_times = fail_times

    def invoke(self, request):
        self.calls += 1
        if self.calls <= self.fail_times:
            raise BackendTimeout("flaky")
        return self.text, {"total_tokens": 10}


def make_gateway(tmp_path, backend, **kwargs):
    return Gateway(backends={"m": backend}, cache_dir=tmp_path / "cache",
                   audit_log_path=tmp_path / "audit.jsonl",
                   backoff_base_s=0.001, **kwargs)


def req(prompt="hello", **kwargs):
    return ModelRequest(model_id="m", prompt=prompt, **kwargs)


def test_strip_code_fences():
    assert strip_code_fences('```json\n{"a": 1}\n```') == '{"a": 1}'
    assert strip_code_fences('```\n{"a": 1}\n```') == '{"a": 1}'
    assert strip_code_fences('{"a": 1}') == '{"a": 1}'


def test_parse_response_json_decimal_and_fences():
    parsed = parse_response_json('```json\n{"x": 0.1}\n```')
    assert parsed["x"] == Decimal("0.1")
    with pytest.raises(ParseFailure):
        parse_response_json("not json at all")


def test_cache_hit_skips_backend(tmp_path):
    backend = CountingBackend()
    gateway = make_gateway(tmp_path, backend)
    first = gateway.complete(req())
    second = gateway.complete(req())
    assert backend.calls == 1
    assert not first.from_cache and second.from_cache
    assert first.text == second.text
    assert second.created_at == first.created_at


def test_cache_key_sensitivity(tmp_path):
    backend = CountingBackend()
    gateway = make_gateway(tmp_path, backend)
    gateway.complete(req("a"))
    gateway.complete(req("b"))
    gateway.complete(req("a", attachment=Attachment(b"doc", "text/plain")))
    assert backend.calls == 3


def test_unknown_model(tmp_path):
    gateway = make_gateway(tmp_path, CountingBackend())
    with pytest.raises(UnknownModel):
        gateway.complete(ModelRequest(model_id="nope", prompt="x"))


def test_retries_then_success(tmp_path):
    backend = CountingBackend(fail_times=2)
    gateway = make_gateway(tmp_path, backend)
    response = gateway.complete(req())
    assert backend.calls == 3
    assert response.parsed == {"ok": True}


def test_retries_exhausted(tmp_path):
    backend = CountingBackend(fail_times=5)
    gateway = make_gateway(tmp_path, backend)
    with pytest.raises(BackendTimeout):
        gateway.complete(req())
    assert backend.calls == 3


def test_audit_log_records_every_request(tmp_path):
    gateway = make_gateway(tmp_path, CountingBackend())
    gateway.complete(req("one"))
    gateway.complete(req("one"))
    lines = [json.loads(line) for line in
             (tmp_path / "audit.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    assert lines[0]["from_cache"] is False
    assert lines[1]["from_cache"] is True
    assert lines[0]["prompt"] == "one"
    assert lines[0]["temperature"] == 0.0


def test_temperature_always_zero():
    assert req().temperature == 0.0


def test_estimate_tokens_counts_words_and_punctuation():
    assert estimate_tokens("hello, world") == 3
    assert estimate_tokens("a b", b"c d") == 4


class TestMockBackend:
    def test_rule_matching_precedence(self):
        backend = MockBackend({
            "rules": [
                {"prompt_contains": "alpha", "response": "1"},
                {"response": "2"},
            ],
        })
        assert backend.invoke(req("contains alpha"))[0] == "1"
        assert backend.invoke(req("other"))[0] == "2"

    def test_attachment_rule(self):
        att = Attachment(b"doc-bytes", "text/plain")
        backend = MockBackend({
            "rules": [{"attachment_sha256": att.sha256, "response": "hit"}],
            "default_response": "miss",
        })
        assert backend.invoke(req("x", attachment=att))[0] == "hit"
        assert backend.invoke(req("x"))[0] == "miss"

    def test_no_match_raises(self):
        with pytest.raises(BackendTimeout):
            MockBackend({}).invoke(req("x"))

    def test_response_file(self, tmp_path):
        (tmp_path / "r.json").write_text('{"z": 1}')
        backend = MockBackend({"rules": [{"response_file": "r.json"}]},
                              base_dir=tmp_path)
        assert backend.invoke(req())[0] == '{"z": 1}'

    def test_auto_reflect_behavior(self):
        backend = MockBackend({"behaviors": ["auto_reflect"]})
        text, _ = backend.invoke(req(
            "... Self-Reflection and Reevaluation Steps ..."))
        assert "No corrections" in text

    def test_auto_judge_behavior(self):
        backend = MockBackend({"behaviors": ["auto_judge"]})
        prompt = (
            "judge these\n## GT FIELDS (Ground Truth)\n"
            '{"a": 1, "b": "x", "c": 2}\n'
            "## EXT FIELDS (Extracted)\n"
            '{"a": 1, "b": "y"}\n'
        )
        verdicts = json.loads(backend.invoke(req(prompt))[0])
        by_field = {v["field_name"]: v for v in verdicts}
        assert by_field["a"]["status"] == "Correct"
        assert by_field["b"]["status"] == "Hallucinated"
        assert by_field["c"]["status"] == "Missing"


def test_token_bucket_blocks_until_refill():
    import time

    bucket = TokenBucket(rate_per_s=200.0, burst=2)
    start = time.monotonic()
    for _ in range(4):
        bucket.acquire()
    # two tokens available immediately, two wait ~5ms each
    assert time.monotonic() - start >= 0.008


def test_gateway_rate_limit_wiring(tmp_path):
    backend = CountingBackend()
    gateway = make_gateway(tmp_path, backend,
                           rate_limits={"counting": TokenBucket(1000, 1000)})
    gateway.complete(req())
    assert backend.calls == 1


def test_parse_failure_preserves_raw_text(tmp_path):
    gateway = make_gateway(tmp_path, CountingBackend(text="garbage"))
    with pytest.raises(ParseFailure) as err:
        gateway.complete(req())
    assert err.value.raw_text == "garbage"


def test_free_text_not_parsed(tmp_path):
    gateway = make_gateway(tmp_path, CountingBackend(text="prose"))
    response = gateway.complete(req(response_format="free_text"))
    assert response.parsed is None
    assert response.text == "prose"


def test_cache_files_are_content_addressed(tmp_path):
    gateway = make_gateway(tmp_path, CountingBackend())
    request = req("stable")
    gateway.complete(request)
    cache_file = tmp_path / "cache" / f"{request.cache_key()}.json"
    assert cache_file.exists()
    stored = json.loads(cache_file.read_text())
    assert stored["text"] == '{"ok": true}'
