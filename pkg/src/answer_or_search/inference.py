"""Prediction collection: prompts, perplexity, and a caching endpoint client.

Generation is delegated to an HTTP completion-style service that must return
the generated text together with one log-probability per generated token.
Every response is cached on disk keyed by a content hash of the request, so
re-running a corpus with a warm cache touches the network zero times and is
byte-for-byte deterministic.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import threading
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import requests

from .corpus import Corpus, QaRecord
from .errors import (
    BalanceError,
    CapabilityError,
    ConfigError,
    DataError,
    RunAbortedError,
    TemplateError,
    TransportError,
)

PROMPT_STYLES = ("zeroshot-qa", "fewshot-balanced", "instruct-idk")

#: Default zero-shot template: the bare question, for QA-tuned checkpoints.
DEFAULT_TEMPLATE = "{q}"

#: Instruction prepended by the instruct-idk prompt style.
IDK_INSTRUCTION = (
    'Answer to the question only if you know the answer, '
    'otherwise answer "I don\'t know"'
)

#: Environment variable holding the endpoint auth token, if any.
AUTH_TOKEN_ENV = "GENERATION_API_TOKEN"

DEFAULT_MAX_NEW_TOKENS = 32


def perplexity(token_logprobs: Sequence[float]) -> float:
    """Sequence perplexity: exp of the negative mean token log-probability.

    Always >= 1 for valid inputs (every log-probability <= 0); equals 1 iff
    every log-probability is exactly 0. Invariant under permutation.
    """
    if len(token_logprobs) == 0:
        raise DataError("perplexity is undefined for an empty log-probability list")
    if any(math.isnan(lp) or lp > 0.0 for lp in token_logprobs):
        raise DataError("token log-probabilities must be <= 0")
    try:
        return math.exp(-sum(token_logprobs) / len(token_logprobs))
    except OverflowError:
        return math.inf


@dataclass(frozen=True)
class GenerationRequest:
    """One greedy-decoding completion request."""

    prompt: str
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    decoding: str = "greedy"
    want_logprobs: bool = True

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be a positive integer")
        if self.decoding != "greedy":
            raise ConfigError(f"unsupported decoding mode {self.decoding!r}")


@dataclass(frozen=True)
class Prediction:
    """A model's answer for one record, with token log-probabilities."""

    record_id: str
    text: str
    token_logprobs: tuple[float, ...]
    perplexity: float
    model_tag: str
    prompt_style: str

    def __post_init__(self) -> None:
        if self.prompt_style not in PROMPT_STYLES:
            raise DataError(
                f"record {self.record_id}: unknown prompt style {self.prompt_style!r}"
            )
        if any(math.isnan(lp) or lp > 0.0 for lp in self.token_logprobs):
            raise DataError(f"record {self.record_id}: log-probabilities must be <= 0")
        if self.token_logprobs:
            expected = perplexity(self.token_logprobs)
            if not math.isclose(self.perplexity, expected, rel_tol=1e-9):
                raise DataError(
                    f"record {self.record_id}: perplexity {self.perplexity} does not "
                    f"match its log-probabilities (expected {expected})"
                )

    @classmethod
    def build(
        cls,
        record_id: str,
        text: str,
        token_logprobs: Sequence[float],
        model_tag: str,
        prompt_style: str,
    ) -> "Prediction":
        return cls(
            record_id=record_id,
            text=text,
            token_logprobs=tuple(token_logprobs),
            perplexity=perplexity(token_logprobs),
            model_tag=model_tag,
            prompt_style=prompt_style,
        )

    def to_dict(self) -> dict:
        return {
            "id": self.record_id,
            "text": self.text,
            "token_logprobs": list(self.token_logprobs),
            "perplexity": self.perplexity,
            "model_tag": self.model_tag,
            "prompt_style": self.prompt_style,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Prediction":
        return cls(
            record_id=str(raw["id"]),
            text=raw["text"],
            token_logprobs=tuple(raw["token_logprobs"]),
            perplexity=raw["perplexity"],
            model_tag=raw["model_tag"],
            prompt_style=raw["prompt_style"],
        )


def write_predictions(predictions: Sequence[Prediction], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for pred in predictions:
            fh.write(json.dumps(pred.to_dict(), ensure_ascii=False) + "\n")
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file does not exist: {path}")
    preds = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                preds.append(Prediction.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"malformed prediction at line {line_no}: {exc}") from exc
    return preds


# ---------------------------------------------------------------------------
# Prompt builders
# ---------------------------------------------------------------------------

_PLACEHOLDER = "{q}"


def build_zeroshot_prompt(record: QaRecord, template: str = DEFAULT_TEMPLATE) -> str:
    """Substitute the question into a template with exactly one ``{q}`` slot."""
    n = template.count(_PLACEHOLDER)
    if n != 1:
        raise TemplateError(
            f"template must contain exactly one {_PLACEHOLDER} placeholder, found {n}"
        )
    return template.replace(_PLACEHOLDER, record.question)


@dataclass(frozen=True)
class FewShotPool:
    """Demonstration pool for balanced few-shot prompts.

    An example whose target equals ``search_token`` counts as masked;
    anything else counts as answered. Selection under a fixed seed is
    deterministic.
    """

    examples: tuple[tuple[str, str], ...]
    seed: int
    search_token: str = "<search>"

    @property
    def answered(self) -> list[tuple[str, str]]:
        return [ex for ex in self.examples if ex[1] != self.search_token]

    @property
    def masked(self) -> list[tuple[str, str]]:
        return [ex for ex in self.examples if ex[1] == self.search_token]


def build_fewshot_balanced_prompt(pool: FewShotPool, k: int, record: QaRecord) -> str:
    """Prompt with exactly k/2 answered and k/2 masked demonstrations.

    An unbalanced demonstration set skews the model's predictions, so the
    builder refuses a pool that cannot supply both halves rather than warn.
    """
    if k <= 0 or k % 2 != 0:
        raise ConfigError(f"k must be an even positive integer, got {k}")
    need = k // 2
    answered = pool.answered
    masked = pool.masked
    if len(answered) < need:
        raise BalanceError("answered", need, len(answered))
    if len(masked) < need:
        raise BalanceError("masked", need, len(masked))

    rng = random.Random(pool.seed)
    chosen = rng.sample(answered, need) + rng.sample(masked, need)
    rng.shuffle(chosen)

    parts = [f"Q: {q}\nA: {t}\n" for q, t in chosen]
    parts.append(f"Q: {record.question}\nA:")
    return "\n".join(parts)


def build_instruct_prompt(record: QaRecord) -> str:
    """Instruction-style prompt asking the model to admit ignorance."""
    return f"{IDK_INSTRUCTION}\n{record.question}"


def build_prompt(
    record: QaRecord,
    prompt_style: str,
    template: str = DEFAULT_TEMPLATE,
    pool: FewShotPool | None = None,
    fewshot_k: int = 16,
) -> str:
    if prompt_style == "zeroshot-qa":
        return build_zeroshot_prompt(record, template)
    if prompt_style == "fewshot-balanced":
        if pool is None:
            raise ConfigError("fewshot-balanced prompts require a demonstration pool")
        return build_fewshot_balanced_prompt(pool, fewshot_k, record)
    if prompt_style == "instruct-idk":
        return build_instruct_prompt(record)
    raise ConfigError(f"unknown prompt style {prompt_style!r}")


# ---------------------------------------------------------------------------
# Response cache
# ---------------------------------------------------------------------------


class ResponseCache:
    """Content-addressed on-disk cache, one JSON file per response.

    Keys cover everything that can change a greedy completion: model tag,
    prompt, and decoding parameters. Writes are atomic (tmp + rename), so
    concurrent writers to distinct keys never interfere.
    """

    def __init__(self, directory: str | Path) -> None:
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(model_tag: str, prompt: str, max_new_tokens: int, decoding: str) -> str:
        blob = json.dumps(
            {
                "model_tag": model_tag,
                "prompt": prompt,
                "max_new_tokens": max_new_tokens,
                "decoding": decoding,
            },
            sort_keys=True,
            ensure_ascii=True,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> dict | None:
        path = self._path(key)
        if not path.exists():
            return None
        with path.open("r", encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, key: str, payload: dict) -> None:
        tmp = self.directory / f"{key}.{os.getpid()}.{threading.get_ident()}.tmp"
        with tmp.open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False)
        os.replace(tmp, self._path(key))


# ---------------------------------------------------------------------------
# Endpoint client
# ---------------------------------------------------------------------------

_RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})


class GenerationClient:
    """Client for a completion-style HTTP endpoint with retry and caching.

    The endpoint receives ``{"prompt", "max_new_tokens", "greedy": true,
    "logprobs": true}`` and must answer ``{"text": str, "token_logprobs":
    [float, ...]}``. A response without log-probabilities raises
    :class:`CapabilityError` telling the operator to enable them.
    """

    def __init__(
        self,
        endpoint: str,
        model_tag: str,
        cache: ResponseCache | None = None,
        *,
        max_retries: int = 3,
        backoff_seconds: float = 0.2,
        timeout: float = 30.0,
        session: requests.Session | None = None,
    ) -> None:
        self.endpoint = endpoint
        self.model_tag = model_tag
        self.cache = cache
        self.max_retries = max_retries
        self.backoff_seconds = backoff_seconds
        self.timeout = timeout
        self._session = session or requests.Session()
        token = os.environ.get(AUTH_TOKEN_ENV)
        self._headers = {"Authorization": f"Bearer {token}"} if token else {}

    def generate(self, request: GenerationRequest) -> dict:
        """Return ``{"text", "token_logprobs"}``, from cache when possible."""
        key = None
        if self.cache is not None:
            key = ResponseCache.key(
                self.model_tag, request.prompt, request.max_new_tokens, request.decoding
            )
            cached = self.cache.get(key)
            if cached is not None:
                return cached["response"]

        response = self._fetch(request)
        if self.cache is not None and key is not None:
            self.cache.put(
                key,
                {
                    "request": {
                        "model_tag": self.model_tag,
                        "prompt": request.prompt,
                        "max_new_tokens": request.max_new_tokens,
                        "decoding": request.decoding,
                    },
                    "response": response,
                },
            )
        return response

    def _fetch(self, request: GenerationRequest) -> dict:
        body = {
            "prompt": request.prompt,
            "max_new_tokens": request.max_new_tokens,
            "greedy": True,
            "logprobs": request.want_logprobs,
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt > 0:
                time.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
            try:
                resp = self._session.post(
                    self.endpoint, json=body, headers=self._headers, timeout=self.timeout
                )
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                continue
            if resp.status_code in _RETRYABLE_STATUS:
                last_error = TransportError(
                    f"endpoint returned HTTP {resp.status_code}"
                )
                continue
            if resp.status_code != 200:
                raise TransportError(f"endpoint returned HTTP {resp.status_code}")
            return self._parse(resp)
        raise TransportError(
            f"endpoint failed after {self.max_retries + 1} attempts: {last_error}"
        )

    @staticmethod
    def _parse(resp: requests.Response) -> dict:
        try:
            payload = resp.json()
        except ValueError as exc:
            raise TransportError(f"endpoint returned non-JSON body: {exc}") from exc
        if "text" not in payload:
            raise TransportError("endpoint response is missing 'text'")
        logprobs = payload.get("token_logprobs")
        if logprobs is None:
            raise CapabilityError(
                "endpoint returned no token log-probabilities; enable per-token "
                "logprobs on the generation service (required for perplexity)"
            )
        return {"text": payload["text"], "token_logprobs": list(logprobs)}


def run_corpus(
    corpus: Corpus,
    prompt_style: str,
    client: GenerationClient,
    *,
    template: str = DEFAULT_TEMPLATE,
    pool: FewShotPool | None = None,
    fewshot_k: int = 16,
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS,
    max_in_flight: int = 4,
) -> list[Prediction]:
    """Collect one prediction per record, in corpus order.

    Up to ``max_in_flight`` requests run concurrently; output order always
    equals corpus order. If any record still fails after the client's
    retries, the run aborts with a :class:`RunAbortedError` whose
    ``completed_ids`` lists every record that did finish.
    """
    if max_in_flight < 1:
        raise ConfigError("max_in_flight must be a positive integer")
    if prompt_style not in PROMPT_STYLES:
        raise ConfigError(f"unknown prompt style {prompt_style!r}")

    records = list(corpus)
    prompts = [
        build_prompt(rec, prompt_style, template=template, pool=pool, fewshot_k=fewshot_k)
        for rec in records
    ]

    results: list[Prediction | None] = [None] * len(records)
    failure: tuple[int, Exception] | None = None

    def fetch(index: int) -> None:
        request = GenerationRequest(prompt=prompts[index], max_new_tokens=max_new_tokens)
        response = client.generate(request)
        try:
            results[index] = Prediction.build(
                record_id=records[index].id,
                text=response["text"],
                token_logprobs=response["token_logprobs"],
                model_tag=client.model_tag,
                prompt_style=prompt_style,
            )
        except DataError as exc:
            raise DataError(f"record {records[index].id}: {exc}") from exc

    with ThreadPoolExecutor(max_workers=max_in_flight) as executor:
        # Keep at most max_in_flight requests outstanding so an abort stops
        # dispatching immediately; in-flight requests drain and still count
        # as done.
        pending: dict = {}
        next_index = 0
        while pending or (next_index < len(records) and failure is None):
            while (
                failure is None
                and next_index < len(records)
                and len(pending) < max_in_flight
            ):
                pending[executor.submit(fetch, next_index)] = next_index
                next_index += 1
            if not pending:
                break
            done, _ = wait(pending, return_when=FIRST_COMPLETED)
            failed_here = []
            for future in done:
                index = pending.pop(future)
                exc = future.exception()
                if exc is not None:
                    failed_here.append((index, exc))
            if failed_here and failure is None:
                failure = min(failed_here, key=lambda pair: pair[0])

    if failure is not None:
        index, cause = failure
        completed = [records[i].id for i, r in enumerate(results) if r is not None]
        if isinstance(cause, requests.RequestException):
            cause = TransportError(str(cause))
        raise RunAbortedError(records[index].id, cause, completed)

    return [pred for pred in results if pred is not None]
