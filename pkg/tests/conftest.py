from __future__ import annotations

import pytest

from answer_or_search.corpus import Corpus, QaRecord
from answer_or_search.inference import Prediction


def make_record(rec_id: str, question: str, answers: list[str], split: str = "dev") -> QaRecord:
    return QaRecord(id=rec_id, question=question, gold_answers=tuple(answers), split=split)


def make_corpus(*records: QaRecord, name: str = "fixture") -> Corpus:
    return Corpus(name=name, records=tuple(records))


def make_prediction(
    rec_id: str,
    text: str,
    logprobs: tuple[float, ...] = (-0.5,),
    model_tag: str = "mock-model",
    prompt_style: str = "zeroshot-qa",
) -> Prediction:
    return Prediction.build(rec_id, text, logprobs, model_tag, prompt_style)


@pytest.fixture
def small_corpus() -> Corpus:
    return make_corpus(
        make_record("q1", "capital of France?", ["Paris"]),
        make_record("q2", "first emperor of France?", ["Napoleon"]),
        make_record("q3", "capital of Italy?", ["Rome", "Roma"]),
    )
