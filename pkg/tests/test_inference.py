from __future__ import annotations

import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from answer_or_search.errors import (
    BalanceError,
    CapabilityError,
    ConfigError,
    DataError,
    RunAbortedError,
    TemplateError,
    TransportError,
)
from answer_or_search.inference import (
    FewShotPool,
    GenerationClient,
    GenerationRequest,
    IDK_INSTRUCTION,
    Prediction,
    ResponseCache,
    build_fewshot_balanced_prompt,
    build_instruct_prompt,
    build_zeroshot_prompt,
    perplexity,
    read_predictions,
    run_corpus,
    write_predictions,
)
from answer_or_search.mock_service import Script, serve

from conftest import make_corpus, make_prediction, make_record

logprob_lists = st.lists(
    st.floats(min_value=-20.0, max_value=0.0, allow_nan=False), min_size=1, max_size=12
)


# ---------------------------------------------------------------------------
# perplexity
# ---------------------------------------------------------------------------


def test_perplexity_all_zero_logprobs_is_one():
    assert perplexity([0.0, 0.0]) == 1.0


def test_perplexity_constant_minus_one_is_e():
    assert perplexity([-1.0, -1.0, -1.0]) == pytest.approx(math.e)


def test_perplexity_uses_the_mean():
    assert perplexity([-0.5, -1.5]) == pytest.approx(math.e)


def test_perplexity_rejects_empty_list():
    with pytest.raises(DataError):
        perplexity([])


def test_perplexity_rejects_positive_logprobs():
    with pytest.raises(DataError):
        perplexity([-0.5, 0.1])


def test_perplexity_rejects_nan_logprobs():
    with pytest.raises(DataError):
        perplexity([-0.5, math.nan])


def test_perplexity_saturates_to_inf_instead_of_overflowing():
    assert perplexity([-800.0]) == math.inf


@given(logprob_lists)
@settings(max_examples=200, deadline=None)
def test_perplexity_at_least_one(logprobs):
    assert perplexity(logprobs) >= 1.0


@given(logprob_lists, st.randoms())
@settings(max_examples=100, deadline=None)
def test_perplexity_permutation_invariant(logprobs, rng):
    shuffled = list(logprobs)
    rng.shuffle(shuffled)
    assert perplexity(shuffled) == pytest.approx(perplexity(logprobs))


def test_prediction_build_derives_perplexity():
    pred = make_prediction("q1", "Paris", (-0.1, -0.2))
    assert pred.perplexity == pytest.approx(math.exp(0.15))


def test_prediction_rejects_inconsistent_perplexity():
    with pytest.raises(DataError):
        Prediction(
            record_id="q1",
            text="Paris",
            token_logprobs=(-0.1,),
            perplexity=3.0,
            model_tag="m",
            prompt_style="zeroshot-qa",
        )


def test_predictions_file_round_trip(tmp_path):
    preds = [make_prediction("q1", "Paris", (-0.1, -0.2)), make_prediction("q2", "Lyon")]
    path = write_predictions(preds, tmp_path / "preds.jsonl")
    assert read_predictions(path) == preds


# ---------------------------------------------------------------------------
# prompt builders
# ---------------------------------------------------------------------------


def test_zeroshot_substitutes_the_question():
    rec = make_record("q1", "capital of France?", ["Paris"])
    assert build_zeroshot_prompt(rec, "Q: {q}\nA:") == "Q: capital of France?\nA:"


def test_zeroshot_rejects_missing_placeholder():
    rec = make_record("q1", "capital of France?", ["Paris"])
    with pytest.raises(TemplateError):
        build_zeroshot_prompt(rec, "Q: question\nA:")


def test_zeroshot_rejects_double_placeholder():
    rec = make_record("q1", "capital of France?", ["Paris"])
    with pytest.raises(TemplateError):
        build_zeroshot_prompt(rec, "{q} {q}")


def _pool(n_answered: int, n_masked: int, seed: int = 7) -> FewShotPool:
    examples = [(f"answered question {i}?", f"answer {i}") for i in range(n_answered)]
    examples += [(f"masked question {i}?", "<search>") for i in range(n_masked)]
    return FewShotPool(examples=tuple(examples), seed=seed)


def test_fewshot_16_is_8_answered_8_masked():
    rec = make_record("q1", "target question?", ["x"])
    prompt = build_fewshot_balanced_prompt(_pool(10, 10), 16, rec)
    assert prompt.count("<search>") == 8
    assert prompt.count("Q:") == 17  # 16 demonstrations + the target
    assert prompt.endswith("Q: target question?\nA:")


def test_fewshot_minimal_pool_uses_both_examples():
    rec = make_record("q1", "target question?", ["x"])
    prompt = build_fewshot_balanced_prompt(_pool(1, 1), 2, rec)
    assert prompt.count("<search>") == 1
    assert "answered question 0?" in prompt
    assert "masked question 0?" in prompt


def test_fewshot_refuses_unbalanced_pool_naming_the_side():
    rec = make_record("q1", "target question?", ["x"])
    with pytest.raises(BalanceError, match="answered"):
        build_fewshot_balanced_prompt(_pool(1, 3), 4, rec)
    with pytest.raises(BalanceError, match="masked"):
        build_fewshot_balanced_prompt(_pool(3, 1), 4, rec)


def test_fewshot_rejects_odd_k():
    rec = make_record("q1", "target question?", ["x"])
    with pytest.raises(ConfigError):
        build_fewshot_balanced_prompt(_pool(4, 4), 3, rec)


def test_fewshot_deterministic_under_seed():
    rec = make_record("q1", "target question?", ["x"])
    first = build_fewshot_balanced_prompt(_pool(10, 10, seed=42), 8, rec)
    second = build_fewshot_balanced_prompt(_pool(10, 10, seed=42), 8, rec)
    different = build_fewshot_balanced_prompt(_pool(10, 10, seed=43), 8, rec)
    assert first == second
    assert first != different


@given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_fewshot_always_balanced(half_k, seed):
    rec = make_record("q1", "target question?", ["x"])
    prompt = build_fewshot_balanced_prompt(_pool(8, 8, seed=seed), 2 * half_k, rec)
    assert prompt.count("<search>") == half_k


def test_instruct_prompt_is_instruction_then_question():
    rec = make_record("q1", "capital of France?", ["Paris"])
    prompt = build_instruct_prompt(rec)
    assert prompt == IDK_INSTRUCTION + "\ncapital of France?"
    assert 'otherwise answer "I don\'t know"' in prompt


def test_instruct_prompts_differ_only_in_question():
    a = build_instruct_prompt(make_record("q1", "first?", ["x"]))
    b = build_instruct_prompt(make_record("q2", "second?", ["y"]))
    assert a.rsplit("\n", 1)[0] == b.rsplit("\n", 1)[0]
    assert a.rsplit("\n", 1)[1] == "first?"
    assert b.rsplit("\n", 1)[1] == "second?"


# ---------------------------------------------------------------------------
# response cache
# ---------------------------------------------------------------------------


def test_cache_keys_separate_every_request_dimension():
    base = ResponseCache.key("m", "prompt", 32, "greedy")
    assert ResponseCache.key("m2", "prompt", 32, "greedy") != base
    assert ResponseCache.key("m", "prompt!", 32, "greedy") != base
    assert ResponseCache.key("m", "prompt", 33, "greedy") != base


def test_cache_round_trip(tmp_path):
    cache = ResponseCache(tmp_path)
    key = ResponseCache.key("m", "p", 32, "greedy")
    assert cache.get(key) is None
    cache.put(key, {"response": {"text": "x", "token_logprobs": [-1.0]}})
    assert cache.get(key)["response"]["text"] == "x"


# ---------------------------------------------------------------------------
# client against the mock endpoint
# ---------------------------------------------------------------------------


@pytest.fixture
def paris_service():
    script = Script().add_exact("capital of France?", "Paris", (-0.1, -0.2))
    with serve(script) as service:
        yield service


def test_generate_returns_text_and_logprobs(paris_service, tmp_path):
    client = GenerationClient(paris_service.url, "m", ResponseCache(tmp_path), timeout=5)
    response = client.generate(GenerationRequest("capital of France?"))
    assert response["text"] == "Paris"
    assert perplexity(response["token_logprobs"]) == pytest.approx(math.exp(0.15))


def test_generate_cache_hit_makes_no_network_call(paris_service, tmp_path):
    client = GenerationClient(paris_service.url, "m", ResponseCache(tmp_path), timeout=5)
    first = client.generate(GenerationRequest("capital of France?"))
    second = client.generate(GenerationRequest("capital of France?"))
    assert first == second
    assert len(paris_service.request_log) == 1


def test_generate_without_logprobs_is_a_capability_error(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,), fault="no-logprobs")
    with serve(script) as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        with pytest.raises(CapabilityError, match="logprobs"):
            client.generate(GenerationRequest("q?"))


def test_generate_retries_then_raises_transport_error(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,), fault="http-error")
    with serve(script) as service:
        client = GenerationClient(
            service.url, "m", ResponseCache(tmp_path), max_retries=2,
            backoff_seconds=0.01, timeout=5,
        )
        with pytest.raises(TransportError):
            client.generate(GenerationRequest("q?"))
        assert len(service.request_log) == 3  # initial + 2 retries


def test_generate_timeout_becomes_transport_error(tmp_path):
    script = Script().add_exact("q?", "Paris", (-0.1,), fault="timeout")
    script.timeout_sleep = 1.0
    with serve(script) as service:
        client = GenerationClient(
            service.url, "m", ResponseCache(tmp_path), max_retries=0,
            backoff_seconds=0.01, timeout=0.2,
        )
        with pytest.raises(TransportError):
            client.generate(GenerationRequest("q?"))


def test_generate_unreachable_endpoint(tmp_path):
    client = GenerationClient(
        "http://127.0.0.1:1", "m", ResponseCache(tmp_path), max_retries=0,
        backoff_seconds=0.01, timeout=0.5,
    )
    with pytest.raises(TransportError):
        client.generate(GenerationRequest("q?"))


# ---------------------------------------------------------------------------
# run_corpus
# ---------------------------------------------------------------------------


def _three_record_corpus():
    return make_corpus(
        make_record("q1", "first question?", ["one"]),
        make_record("q2", "second question?", ["two"]),
        make_record("q3", "third question?", ["three"]),
    )


def _scripted_service():
    script = (
        Script()
        .add_question("first question?", "one", (-0.1,))
        .add_question("second question?", "two", (-0.2,))
        .add_question("third question?", "three", (-0.3,))
    )
    return serve(script)


def test_run_corpus_preserves_corpus_order(tmp_path):
    with _scripted_service() as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        preds = run_corpus(_three_record_corpus(), "zeroshot-qa", client, max_in_flight=3)
    assert [p.record_id for p in preds] == ["q1", "q2", "q3"]
    assert [p.text for p in preds] == ["one", "two", "three"]
    assert all(p.prompt_style == "zeroshot-qa" for p in preds)


def test_run_corpus_warm_cache_is_deterministic_and_offline(tmp_path):
    corpus = _three_record_corpus()
    with _scripted_service() as service:
        client = GenerationClient(service.url, "m", ResponseCache(tmp_path), timeout=5)
        first = run_corpus(corpus, "zeroshot-qa", client, max_in_flight=2)
        calls_after_first = len(service.request_log)
        second = run_corpus(corpus, "zeroshot-qa", client, max_in_flight=2)
        assert len(service.request_log) == calls_after_first
    assert first == second


def test_run_corpus_aborts_with_partial_progress_manifest(tmp_path):
    script = (
        Script()
        .add_question("first question?", "one", (-0.1,))
        .add_question("second question?", "two", (-0.2,), fault="http-error")
        .add_question("third question?", "three", (-0.3,))
    )
    with serve(script) as service:
        client = GenerationClient(
            service.url, "m", ResponseCache(tmp_path), max_retries=0,
            backoff_seconds=0.01, timeout=5,
        )
        with pytest.raises(RunAbortedError) as excinfo:
            run_corpus(_three_record_corpus(), "zeroshot-qa", client, max_in_flight=1)
    assert excinfo.value.failed_id == "q2"
    assert excinfo.value.completed_ids == ["q1"]


def test_run_corpus_rejects_unknown_style(tmp_path):
    client = GenerationClient("http://127.0.0.1:1", "m", ResponseCache(tmp_path))
    with pytest.raises(ConfigError):
        run_corpus(_three_record_corpus(), "sampling", client)
