"""Post-hoc analyses: search-quality trade-off, budget sweeps, histograms.

The trade-off curve answers "what does the user see if a fraction r of
searches come back correct": every searched item resolves to either a
correct answer or a hallucination, so c(r) = c0 + r*s and
h(r) = h0 + (1-r)*s, with c(r) + h(r) constant in r.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .evaluation import Judgment

#: Percentage rates copied from published tables carry rounding residue.
RATE_SUM_TOLERANCE = 0.2


@dataclass(frozen=True)
class TradeoffPoint:
    ratio: float
    c: float
    h: float


def tradeoff_curve(
    c0: float, h0: float, s: float, ratios: Sequence[float]
) -> list[TradeoffPoint]:
    """Correct/hallucination percentages as the search success ratio varies.

    ``c0``, ``h0``, ``s`` are the adapted model's percentages (summing to
    100 up to rounding residue); each ratio r in [0, 1] is the fraction of
    searches that return a correct answer.
    """
    for name, value in (("c0", c0), ("h0", h0), ("s", s)):
        if not (math.isfinite(value) and value >= 0):
            raise DataError(f"rate {name} must be non-negative, got {value}")
    total = c0 + h0 + s
    if abs(total - 100.0) > RATE_SUM_TOLERANCE:
        raise DataError(f"rates must sum to 100 (within {RATE_SUM_TOLERANCE}), got {total}")
    points = []
    for r in ratios:
        if not 0.0 <= r <= 1.0:
            raise DataError(f"search success ratio must lie in [0, 1], got {r}")
        points.append(TradeoffPoint(ratio=r, c=c0 + r * s, h=h0 + (1.0 - r) * s))
    return points


def lambda_sweep(
    s_rate: float, h_rate: float, lambdas: Sequence[float]
) -> list[tuple[float, float]]:
    """Budget cost s + lambda*h for each lambda, sorted by lambda.

    Rates are fractions in [0, 1]; every lambda must be >= 1.
    """
    for name, value in (("s_rate", s_rate), ("h_rate", h_rate)):
        if not 0.0 <= value <= 1.0:
            raise DataError(f"{name} must lie in [0, 1], got {value}")
    for lam in lambdas:
        if not lam >= 1.0:
            raise DataError(f"lambda must be >= 1, got {lam}")
    return [(lam, s_rate + lam * h_rate) for lam in sorted(lambdas)]


@dataclass(frozen=True)
class HistogramSpec:
    """Binning recipe: strictly increasing edges, optional log transform.

    Bins are half-open [edge_i, edge_{i+1}) with the last bin closed;
    values outside [first, last] land in an explicit out-of-range bucket.
    """

    bin_edges: tuple[float, ...]
    value_transform: str = "log"
    class_key: Judgment | None = None

    def __post_init__(self) -> None:
        if len(self.bin_edges) < 2:
            raise DataError("histogram needs at least 2 bin edges")
        if any(b <= a for a, b in zip(self.bin_edges, self.bin_edges[1:])):
            raise DataError("bin edges must be strictly increasing")
        if self.value_transform not in ("log", "identity"):
            raise DataError(f"unknown value transform {self.value_transform!r}")


@dataclass(frozen=True)
class HistogramResult:
    spec: HistogramSpec
    counts: tuple[int, ...]
    out_of_range: int

    @property
    def total(self) -> int:
        return sum(self.counts) + self.out_of_range


def histogram(values: Sequence[float], spec: HistogramSpec) -> HistogramResult:
    """Bin ``values`` under ``spec``; log transform applies ln first."""
    arr = np.asarray(list(values), dtype=float)
    if spec.value_transform == "log":
        for i, v in enumerate(arr):
            if v <= 0:
                raise DataError(f"log transform undefined for item {i} with value {v}")
        arr = np.log(arr)
    if arr.size == 0:
        return HistogramResult(
            spec=spec, counts=tuple([0] * (len(spec.bin_edges) - 1)), out_of_range=0
        )
    edges = np.asarray(spec.bin_edges, dtype=float)
    in_range = (arr >= edges[0]) & (arr <= edges[-1])
    counts, _ = np.histogram(arr[in_range], bins=edges)
    return HistogramResult(
        spec=spec,
        counts=tuple(int(c) for c in counts),
        out_of_range=int(arr.size - in_range.sum()),
    )


def write_tradeoff_table(
    points: Sequence[TradeoffPoint],
    path: str | Path,
    comments: Sequence[str] = (),
) -> Path:
    """Emit a plot-ready table with ratio,c,h rows ('#' lines carry provenance)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["ratio", "c", "h"])
        for pt in points:
            writer.writerow([f"{pt.ratio:g}", f"{pt.c:.10g}", f"{pt.h:.10g}"])
    return path


def write_histogram_table(
    results: dict[str, HistogramResult],
    path: str | Path,
    comments: Sequence[str] = (),
) -> Path:
    """Emit per-class bin counts: one row per (class, bin) plus out-of-range rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["class", "bin_lo", "bin_hi", "count"])
        for cls, result in results.items():
            edges = result.spec.bin_edges
            for (lo, hi), count in zip(zip(edges, edges[1:]), result.counts):
                writer.writerow([cls, f"{lo:.10g}", f"{hi:.10g}", count])
            writer.writerow([cls, "out_of_range", "", result.out_of_range])
    return path


def read_table(path: str | Path) -> list[dict]:
    """Read back an emitted table, skipping '#' comment lines."""
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        data_lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(data_lines))
