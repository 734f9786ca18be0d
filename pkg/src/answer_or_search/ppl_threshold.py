"""Perplexity-threshold routing: answer when confident, search otherwise.

A threshold tau is calibrated on a labeled development set, then a
prediction is routed to search exactly when its sequence perplexity
strictly exceeds tau ("exceeds" is read as strict, so a value equal to
tau is answered). The answered text is always the base prediction,
unchanged: this detector can drop correct answers but never create new
hallucinations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CalibrationError, ConfigError, DataError
from .inference import Prediction
from .labeling import SearchToken

STRATEGIES = ("max-f1", "target-search-rate")


class Decision(Enum):
    ANSWER = "answer"
    SEARCH = "search"


@dataclass(frozen=True)
class PplThreshold:
    """A calibrated routing threshold in raw-perplexity units.

    ``tau`` may be ``+inf`` (never search) or ``-inf`` (always search):
    those are the sentinel candidates the calibrator scans in addition to
    the midpoints between consecutive distinct perplexities.
    """

    tau: float
    calibration: str
    fitted_on: str
    target_rate: float | None = None

    def __post_init__(self) -> None:
        if math.isnan(self.tau):
            raise DataError("threshold tau must not be NaN")
        if self.calibration not in STRATEGIES:
            raise ConfigError(f"unknown calibration strategy {self.calibration!r}")
        if not self.fitted_on:
            raise DataError("threshold provenance (fitted_on) must be non-empty")
        if self.calibration == "target-search-rate":
            if self.target_rate is None or not 0.0 <= self.target_rate <= 1.0:
                raise ConfigError("target-search-rate requires target_rate in [0, 1]")


def _scan_candidates(perplexities: Sequence[float]) -> list[tuple[float, int]]:
    """Candidate thresholds with the number of items answered under each.

    Midpoints between consecutive sorted distinct perplexities cover every
    achievable answer/search partition; -inf and +inf sentinels add the
    all-search and all-answer extremes.
    """
    distinct = sorted(set(perplexities))
    counts: dict[float, int] = {}
    for p in perplexities:
        counts[p] = counts.get(p, 0) + 1

    candidates: list[tuple[float, int]] = [(-math.inf, 0)]
    answered = 0
    for lo, hi in zip(distinct, distinct[1:]):
        answered += counts[lo]
        candidates.append(((lo + hi) / 2.0, answered))
    candidates.append((math.inf, len(perplexities)))
    return candidates


def calibrate(
    scored: Sequence[tuple[float, bool]],
    strategy: str = "max-f1",
    target_rate: float | None = None,
    fitted_on: str = "unspecified",
) -> PplThreshold:
    """Derive a routing threshold from (perplexity, correct) pairs.

    ``max-f1`` scans all candidate thresholds (midpoints plus sentinels)
    and keeps the one maximizing F1 of the induced answer/search decisions,
    breaking ties toward the smaller tau. ``target-search-rate`` places tau
    at the (1 - target_rate) quantile of the observed perplexities.
    """
    if not scored:
        raise CalibrationError("cannot calibrate a threshold on an empty set")
    perplexities = [p for p, _ in scored]
    if any(math.isnan(p) or math.isinf(p) for p in perplexities):
        raise CalibrationError("perplexities must be finite")
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown calibration strategy {strategy!r}")

    if strategy == "target-search-rate":
        if target_rate is None:
            raise ConfigError("target-search-rate requires target_rate")
        if not 0.0 <= target_rate <= 1.0:
            raise ConfigError("target_rate must lie in [0, 1]")
        tau = float(np.quantile(np.asarray(perplexities, dtype=float), 1.0 - target_rate))
        return PplThreshold(
            tau=tau, calibration=strategy, fitted_on=fitted_on, target_rate=target_rate
        )

    # max-f1: answering the n smallest perplexities yields, per Table-1-style
    # accounting, tp = correct among answered, fp = wrong among answered,
    # fn = correct among searched.
    order = sorted(range(len(scored)), key=lambda i: scored[i][0])
    correct_sorted = [bool(scored[i][1]) for i in order]
    prefix_correct = [0]
    for c in correct_sorted:
        prefix_correct.append(prefix_correct[-1] + int(c))
    total_correct = prefix_correct[-1]

    best_tau = -math.inf
    best_f1 = -1.0
    for tau, n_answered in _scan_candidates(perplexities):
        tp = prefix_correct[n_answered]
        fp = n_answered - tp
        fn = total_correct - tp
        denom = 2 * tp + fp + fn
        f1 = (2 * tp / denom) if denom > 0 else 0.0
        if f1 > best_f1:
            best_f1 = f1
            best_tau = tau
    return PplThreshold(tau=best_tau, calibration=strategy, fitted_on=fitted_on)


def decide(prediction: Prediction, threshold: PplThreshold) -> Decision:
    """Route to search iff perplexity strictly exceeds tau."""
    if not math.isfinite(prediction.perplexity):
        raise DataError(
            f"record {prediction.record_id}: perplexity must be finite, "
            f"got {prediction.perplexity}"
        )
    return Decision.SEARCH if prediction.perplexity > threshold.tau else Decision.ANSWER


def apply_threshold(
    predictions: Sequence[Prediction],
    threshold: PplThreshold,
    token: SearchToken = SearchToken(),
) -> list[str]:
    """Map predictions to output strings: the text unchanged, or the token."""
    return [
        token.literal if decide(p, threshold) is Decision.SEARCH else p.text
        for p in predictions
    ]


def _encode_tau(tau: float) -> float | str:
    if tau == math.inf:
        return "+inf"
    if tau == -math.inf:
        return "-inf"
    return tau


def _decode_tau(raw: float | str) -> float:
    if raw == "+inf":
        return math.inf
    if raw == "-inf":
        return -math.inf
    return float(raw)


def save_threshold(threshold: PplThreshold, path: str | Path, extra: dict | None = None) -> Path:
    """Persist the threshold manifest: {tau, strategy, target_rate, fitted_on}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "tau": _encode_tau(threshold.tau),
        "strategy": threshold.calibration,
        "target_rate": threshold.target_rate,
        "fitted_on": threshold.fitted_on,
    }
    if extra:
        manifest.update(extra)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_threshold(path: str | Path) -> PplThreshold:
    path = Path(path)
    if not path.exists():
        raise DataError(f"threshold manifest does not exist: {path}")
    with path.open("r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return PplThreshold(
        tau=_decode_tau(manifest["tau"]),
        calibration=manifest["strategy"],
        fitted_on=manifest["fitted_on"],
        target_rate=manifest.get("target_rate"),
    )
