from __future__ import annotations

import math

import pytest
import requests

from answer_or_search.errors import CapabilityError, ConfigError, TransportError
from answer_or_search.inference import GenerationClient, GenerationRequest, ResponseCache, perplexity
from answer_or_search.mock_service import DEFAULT_ENTRY, Script, ScriptEntry, serve


def test_scripted_prompt_round_trip(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,))
    with serve(script) as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        response = client.generate(GenerationRequest("q?"))
    assert response["text"] == "Paris"
    assert perplexity(response["token_logprobs"]) == pytest.approx(math.exp(0.1))


def test_unknown_prompt_gets_the_default_entry():
    with serve(Script()) as service:
        resp = requests.post(service.url, json={"prompt": "never scripted"}, timeout=5)
    assert resp.json() == {"text": "UNKNOWN", "token_logprobs": [-5.0]}
    assert DEFAULT_ENTRY.text == "UNKNOWN"


def test_question_matching_prefers_last_occurrence():
    script = (
        Script()
        .add_question("first question?", "demo", (-1.0,))
        .add_question("target question?", "target", (-2.0,))
    )
    prompt = "Q: first question?\nA: demo\n\nQ: target question?\nA:"
    assert script.lookup(prompt).text == "target"


def test_request_log_counts_each_round_trip_exactly(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,))
    with serve(script) as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        client.generate(GenerationRequest("q?"))
        client.generate(GenerationRequest("q?"))  # warm cache: no round trip
        assert service.request_log == ["q?"]
        client.generate(GenerationRequest("other?"))
        assert service.request_log == ["q?", "other?"]


def test_no_logprobs_fault_raises_capability_error(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,), fault="no-logprobs")
    with serve(script) as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        with pytest.raises(CapabilityError):
            client.generate(GenerationRequest("q?"))


def test_http_error_fault_raises_transport_error(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,), fault="http-error")
    with serve(script) as service:
        client = GenerationClient(
            service.url, "m", ResponseCache(tmp_path),
            max_retries=1, backoff_seconds=0.01, timeout=5,
        )
        with pytest.raises(TransportError):
            client.generate(GenerationRequest("q?"))


def test_port_already_in_use_is_a_startup_error():
    with serve(Script()) as service:
        with pytest.raises(ConfigError, match="port"):
            serve(Script(), port=service.port)


def test_script_entry_rejects_unknown_fault():
    with pytest.raises(Exception, match="fault"):
        ScriptEntry(text="x", token_logprobs=(-1.0,), fault="explode")


def test_script_file_round_trip(tmp_path):
    script = (
        Script()
        .add_exact("exact prompt", "A", (-0.5,))
        .add_question("some question?", "B", (-1.0, -2.0), fault="no-logprobs")
    )
    path = script.to_file(tmp_path / "script.jsonl")
    again = Script.from_file(path)
    assert again.exact == script.exact
    assert again.by_question == script.by_question
