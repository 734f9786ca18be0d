"""Hallucination masking: turn a model's own predictions into training labels.

A prediction that matches a gold answer keeps its exact surface form as the
training target; anything else is replaced by the search token. The mask rate
of the resulting dataset therefore equals the base model's hallucination rate
by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .corpus import Corpus, NormalizationProfile, QaRecord, exact_match, normalize
from .errors import DataError, PairingError
from .inference import Prediction

DEFAULT_SEARCH_TOKEN = "<search>"


@dataclass(frozen=True)
class SearchToken:
    """The output sequence that signals a call to an external tool."""

    literal: str = DEFAULT_SEARCH_TOKEN

    def __post_init__(self) -> None:
        if not self.literal.strip():
            raise DataError("search token literal must be non-empty")


@dataclass(frozen=True)
class MaskedExample:
    """One training pair: question -> (own answer kept verbatim | search token)."""

    record_id: str
    question: str
    target: str
    was_masked: bool


@dataclass(frozen=True)
class MaskedDataset:
    examples: tuple[MaskedExample, ...]
    model_tag: str
    corpus_name: str
    profile: NormalizationProfile
    token: SearchToken

    @property
    def n_total(self) -> int:
        return len(self.examples)

    @property
    def n_masked(self) -> int:
        return sum(1 for ex in self.examples if ex.was_masked)

    @property
    def n_answer(self) -> int:
        return self.n_total - self.n_masked

    def stats(self) -> dict:
        return {"n_total": self.n_total, "n_answer": self.n_answer, "n_masked": self.n_masked}


def mask_prediction(
    prediction: Prediction,
    record: QaRecord,
    profile: NormalizationProfile,
    token: SearchToken = SearchToken(),
) -> MaskedExample:
    """Keep a correct prediction verbatim; replace a wrong one with the token."""
    if prediction.record_id != record.id:
        raise PairingError(
            f"prediction {prediction.record_id!r} paired with record {record.id!r}"
        )
    if exact_match(prediction.text, record.gold_answers, profile):
        return MaskedExample(record.id, record.question, prediction.text, was_masked=False)
    return MaskedExample(record.id, record.question, token.literal, was_masked=True)


def build_masked_dataset(
    predictions: Sequence[Prediction],
    corpus: Corpus,
    profile: NormalizationProfile | None = None,
    token: SearchToken = SearchToken(),
) -> MaskedDataset:
    """One masked example per prediction, ordered by the corpus.

    Predictions must cover a subset of corpus ids with no duplicates.
    """
    profile = profile if profile is not None else corpus.profile
    by_id: dict[str, Prediction] = {}
    for pred in predictions:
        if pred.record_id in by_id:
            raise DataError(f"duplicate prediction for record {pred.record_id!r}")
        if pred.record_id not in corpus:
            raise DataError(f"prediction for unknown record {pred.record_id!r}")
        by_id[pred.record_id] = pred

    model_tags = {pred.model_tag for pred in predictions}
    if len(model_tags) > 1:
        raise DataError(f"predictions mix model tags: {sorted(model_tags)}")
    model_tag = model_tags.pop() if model_tags else ""

    examples = tuple(
        mask_prediction(by_id[rec.id], rec, profile, token)
        for rec in corpus
        if rec.id in by_id
    )
    return MaskedDataset(
        examples=examples,
        model_tag=model_tag,
        corpus_name=corpus.name,
        profile=profile,
        token=token,
    )


def _check_token_collisions(dataset: MaskedDataset, corpus: Corpus) -> None:
    token_norm = normalize(dataset.token.literal, dataset.profile)
    for ex in dataset.examples:
        record = corpus[ex.record_id]
        for gold in record.gold_answers:
            if normalize(gold, dataset.profile) == token_norm:
                raise DataError(
                    f"search token {dataset.token.literal!r} collides with a gold answer "
                    f"of record {record.id!r}; emission refused"
                )


def write_masked_dataset(
    dataset: MaskedDataset,
    path: str | Path,
    corpus: Corpus | None = None,
    extra_manifest: dict | None = None,
) -> Path:
    """Emit the dataset as line-delimited records plus a sidecar manifest.

    When ``corpus`` is given, refuses to emit if the search token collides
    with any normalized gold answer of a labeled record (such a dataset
    would judge masked outputs as correct).
    """
    if corpus is not None:
        _check_token_collisions(dataset, corpus)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in dataset.examples:
            fh.write(
                json.dumps(
                    {
                        "id": ex.record_id,
                        "question": ex.question,
                        "target": ex.target,
                        "was_masked": ex.was_masked,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    manifest = {
        "stats": dataset.stats(),
        "provenance": {
            "model_tag": dataset.model_tag,
            "corpus": dataset.corpus_name,
            "normalization_profile": dataset.profile.to_dict(),
            "normalization_profile_hash": dataset.profile.fingerprint(),
            "search_token": dataset.token.literal,
        },
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    manifest_path = manifest_path_for(path)
    with manifest_path.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, ensure_ascii=False, sort_keys=True)
        fh.write("\n")
    return path


def manifest_path_for(dataset_path: str | Path) -> Path:
    dataset_path = Path(dataset_path)
    return dataset_path.with_name(dataset_path.name + ".manifest.json")


def read_masked_dataset(path: str | Path) -> MaskedDataset:
    """Re-ingest an emitted dataset (with its manifest) exactly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"masked dataset does not exist: {path}")
    examples: list[MaskedExample] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                examples.append(
                    MaskedExample(
                        record_id=str(raw["id"]),
                        question=raw["question"],
                        target=raw["target"],
                        was_masked=raw["was_masked"],
                    )
                )
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"malformed masked example at line {line_no}: {exc}") from exc

    manifest_path = manifest_path_for(path)
    if not manifest_path.exists():
        raise DataError(f"missing manifest for masked dataset: {manifest_path}")
    with manifest_path.open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    provenance = manifest["provenance"]

    dataset = MaskedDataset(
        examples=tuple(examples),
        model_tag=provenance["model_tag"],
        corpus_name=provenance["corpus"],
        profile=NormalizationProfile.from_dict(provenance["normalization_profile"]),
        token=SearchToken(provenance["search_token"]),
    )
    if dataset.stats() != manifest["stats"]:
        raise DataError(
            f"manifest stats {manifest['stats']} do not match examples {dataset.stats()}"
        )
    return dataset
