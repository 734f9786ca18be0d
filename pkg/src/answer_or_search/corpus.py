"""QA corpora: canonical record format, answer normalization, exact-match judging.

A corpus is an ordered, immutable collection of question/gold-answer records.
Normalization follows the usual generative-QA convention: lowercase, strip
punctuation, drop stopwords, collapse whitespace. Both the prediction and the
gold answers are normalized before comparison, so "Napoleon I" matches a gold
answer of "Napoleon".
"""

from __future__ import annotations

import hashlib
import json
import string
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

from ._stopwords import ENGLISH_STOPWORDS, STOPWORDS_VERSION
from .errors import DataError

SPLITS = ("train", "dev", "test")

_ASCII_PUNCT = frozenset(string.punctuation)


@dataclass(frozen=True)
class NormalizationProfile:
    """Settings that define how answer text is canonicalized before judging.

    The profile travels with every emitted report (as a dict plus a content
    hash) so downstream numbers can be reproduced bit-for-bit.
    """

    lowercase: bool = True
    strip_punctuation: bool = True
    stopwords: tuple[str, ...] = ENGLISH_STOPWORDS
    collapse_whitespace: bool = True
    unicode_fold: bool = True
    stopwords_version: str = STOPWORDS_VERSION

    def to_dict(self) -> dict:
        return {
            "lowercase": self.lowercase,
            "strip_punctuation": self.strip_punctuation,
            "stopwords": list(self.stopwords),
            "collapse_whitespace": self.collapse_whitespace,
            "unicode_fold": self.unicode_fold,
            "stopwords_version": self.stopwords_version,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "NormalizationProfile":
        return cls(
            lowercase=raw["lowercase"],
            strip_punctuation=raw["strip_punctuation"],
            stopwords=tuple(raw["stopwords"]),
            collapse_whitespace=raw["collapse_whitespace"],
            unicode_fold=raw["unicode_fold"],
            stopwords_version=raw.get("stopwords_version", STOPWORDS_VERSION),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


DEFAULT_PROFILE = NormalizationProfile()


def _is_punctuation(ch: str) -> bool:
    # Unicode punctuation categories plus all ASCII symbols, so that e.g.
    # "<", "+" and "$" are stripped the same way on every platform.
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize(text: str, profile: NormalizationProfile = DEFAULT_PROFILE) -> str:
    """Canonicalize ``text`` under ``profile``. Deterministic and idempotent."""
    out = text
    if profile.unicode_fold:
        decomposed = unicodedata.normalize("NFKD", out)
        out = "".join(ch for ch in decomposed if unicodedata.category(ch) != "Mn")
    if profile.lowercase:
        out = out.lower()
    if profile.strip_punctuation:
        out = "".join(ch for ch in out if not _is_punctuation(ch))
    if profile.stopwords:
        # Stopword comparison happens after lowercasing; whole tokens only.
        drop = frozenset(profile.stopwords)
        out = " ".join(tok for tok in out.split() if tok not in drop)
    elif profile.collapse_whitespace:
        out = " ".join(out.split())
    return out


def exact_match(
    prediction: str,
    gold_answers: Sequence[str],
    profile: NormalizationProfile = DEFAULT_PROFILE,
) -> bool:
    """True iff the normalized prediction equals at least one normalized gold."""
    if not gold_answers:
        raise DataError("exact_match requires a non-empty gold answer list")
    pred = normalize(prediction, profile)
    return any(pred == normalize(g, profile) for g in gold_answers)


@dataclass(frozen=True)
class QaRecord:
    """One question with its admissible gold answers and split tag."""

    id: str
    question: str
    gold_answers: tuple[str, ...]
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("record id must be non-empty")
        if not self.question.strip():
            raise DataError(f"record {self.id}: question is empty")
        if not self.gold_answers:
            raise DataError(f"record {self.id}: gold answer list is empty")
        if any(not g.strip() for g in self.gold_answers):
            raise DataError(f"record {self.id}: gold answer is empty")
        if self.split not in SPLITS:
            raise DataError(f"record {self.id}: unknown split {self.split!r}")


@dataclass(frozen=True)
class Corpus:
    """Ordered, immutable collection of records; iteration order == ingestion order."""

    name: str
    records: tuple[QaRecord, ...]
    profile: NormalizationProfile = DEFAULT_PROFILE
    _by_id: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        by_id: dict[str, QaRecord] = {}
        for rec in self.records:
            if rec.id in by_id:
                raise DataError(f"duplicate record id {rec.id!r} in corpus {self.name!r}")
            by_id[rec.id] = rec
        object.__setattr__(self, "_by_id", by_id)

    def __iter__(self) -> Iterator[QaRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, record_id: str) -> QaRecord:
        try:
            return self._by_id[record_id]
        except KeyError:
            raise DataError(f"unknown record id {record_id!r} in corpus {self.name!r}") from None

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._by_id

    def for_split(self, split: str) -> "Corpus":
        kept = tuple(r for r in self.records if r.split == split)
        return Corpus(name=self.name, records=kept, profile=self.profile)


def _parse_canonical_line(line: str, line_no: int, default_split: str) -> QaRecord:
    try:
        raw = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed record at line {line_no}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"malformed record at line {line_no}: expected an object")
    try:
        question = raw["question"]
        answers = raw["answers"]
    except KeyError as exc:
        raise DataError(f"malformed record at line {line_no}: missing field {exc}") from exc
    rec_id = str(raw.get("id", f"q{line_no:06d}"))
    if not isinstance(answers, list) or not answers:
        raise DataError(f"record {rec_id}: gold answer list is empty or not a list")
    return QaRecord(
        id=rec_id,
        question=str(question),
        gold_answers=tuple(str(a) for a in answers),
        split=str(raw.get("split", default_split)),
    )


def _parse_tsv_line(line: str, line_no: int, split: str) -> QaRecord:
    parts = line.split("\t")
    if len(parts) != 2:
        raise DataError(f"malformed record at line {line_no}: expected question<TAB>answers")
    question, answer_field = parts
    answers = tuple(a for a in answer_field.split("|") if a.strip())
    if not answers:
        raise DataError(f"record q{line_no:06d}: gold answer list is empty")
    return QaRecord(id=f"q{line_no:06d}", question=question, gold_answers=answers, split=split)


def ingest(
    path: str | Path,
    fmt: str = "canonical-jsonl",
    split: str = "train",
    name: str | None = None,
    profile: NormalizationProfile = DEFAULT_PROFILE,
) -> Corpus:
    """Read a corpus file into a :class:`Corpus`, preserving file order.

    ``fmt`` is ``canonical-jsonl`` (one JSON object per line with fields
    ``id``, ``question``, ``answers``, optional ``split``) or ``tsv-pairs``
    (``question<TAB>answer1|answer2|...``). Records without ids get
    sequential ones derived from their line number. Malformed lines raise
    :class:`DataError` naming the offending line.
    """
    path = Path(path)
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    if fmt not in ("canonical-jsonl", "tsv-pairs"):
        raise DataError(f"unknown corpus format {fmt!r}")
    if not path.exists():
        raise DataError(f"corpus file does not exist: {path}")

    records: list[QaRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if fmt == "canonical-jsonl":
                records.append(_parse_canonical_line(line, line_no, split))
            else:
                records.append(_parse_tsv_line(line, line_no, split))
    return Corpus(name=name or path.stem, records=tuple(records), profile=profile)


def write_canonical(corpus: Corpus, path: str | Path) -> Path:
    """Emit ``corpus`` in the canonical line-delimited format.

    Re-ingesting the emitted file reproduces the corpus exactly (ids,
    order, text).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in corpus:
            fh.write(
                json.dumps(
                    {
                        "id": rec.id,
                        "question": rec.question,
                        "answers": list(rec.gold_answers),
                        "split": rec.split,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return path
