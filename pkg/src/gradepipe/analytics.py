"""Agreement and stability statistics over graded batches.

Inputs arrive in integer tenths; everything is exact (integer or
Fraction arithmetic) until the final conversion to float for reporting.
Counting statistics (share of zero-sigma questions, verdict splits) are
exact counts, never float accumulations.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from fractions import Fraction
from pathlib import Path

from .core import GradePipeError, Score, score_gap

__all__ = [
    "WITHIN_ONE_TENTHS",
    "GapRecord",
    "SummaryStats",
    "StabilityStats",
    "CrossModelDelta",
    "OcrVerdict",
    "GradingVerdict",
    "VerdictRecord",
    "RaggedRuns",
    "KeyMismatch",
    "EmptyDataset",
    "summarize_gaps",
    "quiz_table",
    "stability",
    "cross_model",
    "verdict_distribution",
    "histogram",
    "percent",
    "write_report",
]

# "Within one point" is inclusive: |gap| <= 1.0 pt counts as agreement.
WITHIN_ONE_TENTHS = 10


class RaggedRuns(GradePipeError):
    """Per-question run lists have unequal lengths."""


class KeyMismatch(GradePipeError):
    """Cross-model comparison got different question key sets."""


class EmptyDataset(GradePipeError):
    """A statistic was asked of zero records."""


@dataclass(frozen=True)
class GapRecord:
    """One graded question joined with its human score."""

    test_code: str
    quiz_id: str
    question_id: str
    ai: Score
    ta: Score

    @property
    def gap_tenths(self) -> int:
        return score_gap(self.ai, self.ta)


@dataclass(frozen=True)
class SummaryStats:
    """Gap summary in points. std is the population deviation."""

    n: int
    mean_gap: float
    std_gap: float
    mae: float
    within_one_pct: float


@dataclass(frozen=True)
class StabilityStats:
    n_questions: int
    mean_sigma: float
    prob_sigma_zero: float


@dataclass(frozen=True)
class CrossModelDelta:
    n_questions: int
    mean_delta: float
    mean_abs_delta: float
    prob_delta_zero: float


class OcrVerdict(str, Enum):
    ACCEPTABLE = "acceptable"
    PROBLEMATIC = "problematic"


class GradingVerdict(str, Enum):
    CORRECT = "correct"
    ACCEPTABLE = "acceptable"
    INCORRECT = "incorrect"


@dataclass(frozen=True)
class VerdictRecord:
    test_code: str
    question_id: str
    ocr_verdict: OcrVerdict
    grading_verdict: GradingVerdict


def percent(count: int, total: int) -> float:
    """count/total as a percentage, two decimals, round half up, exact."""
    if total <= 0:
        raise EmptyDataset("percentage of an empty set")
    value = Fraction(100 * count, total)
    quantized = (
        Decimal(value.numerator) / Decimal(value.denominator)
    ).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(quantized)


# ── gap statistics ───────────────────────────────────────────────────────────


def summarize_gaps(records: list[GapRecord]) -> SummaryStats:
    """Mean/std/MAE of the signed AI-minus-TA gap, plus the within-1 share.

    Variance comes from the exact integer identity
    n*sum(g^2) - sum(g)^2 over n^2, so equal datasets can never produce
    different floats through accumulation order.
    """
    if not records:
        raise EmptyDataset("summarize_gaps needs at least one record")
    n = len(records)
    gaps = [r.gap_tenths for r in records]
    total = sum(gaps)
    total_sq = sum(g * g for g in gaps)
    total_abs = sum(abs(g) for g in gaps)
    within = sum(1 for g in gaps if abs(g) <= WITHIN_ONE_TENTHS)
    var_numer = n * total_sq - total * total
    return SummaryStats(
        n=n,
        mean_gap=total / n / 10.0,
        std_gap=math.sqrt(var_numer / (n * n)) / 10.0,
        mae=total_abs / n / 10.0,
        within_one_pct=100.0 * within / n,
    )


def quiz_table(records: list[GapRecord]) -> list[tuple[str, SummaryStats]]:
    """Per-quiz summary rows, sorted by quiz_id."""
    by_quiz: dict[str, list[GapRecord]] = {}
    for record in records:
        by_quiz.setdefault(record.quiz_id, []).append(record)
    return [(quiz_id, summarize_gaps(by_quiz[quiz_id])) for quiz_id in sorted(by_quiz)]


# ── run stability and cross-model deltas ─────────────────────────────────────


def stability(runs_by_question: dict[str, list[Score]]) -> StabilityStats:
    """Mean per-question run sigma and the exact share of zero-sigma questions."""
    if not runs_by_question:
        raise EmptyDataset("stability needs at least one question")
    lengths = {len(scores) for scores in runs_by_question.values()}
    if len(lengths) > 1:
        raise RaggedRuns(f"run lists have unequal lengths: {sorted(lengths)}")
    if lengths == {0}:
        raise EmptyDataset("stability got empty run lists")
    sigma_sum = 0.0
    zero_count = 0
    for scores in runs_by_question.values():
        tenths = [score.tenths for score in scores]
        k = len(tenths)
        total = sum(tenths)
        total_sq = sum(t * t for t in tenths)
        numer = k * total_sq - total * total
        if numer == 0:
            zero_count += 1
        else:
            sigma_sum += math.sqrt(numer / (k * k))
    n = len(runs_by_question)
    return StabilityStats(
        n_questions=n,
        mean_sigma=sigma_sum / n / 10.0,
        prob_sigma_zero=zero_count / n,
    )


def cross_model(
    runs_a: dict[str, list[Score]],
    runs_b: dict[str, list[Score]],
) -> CrossModelDelta:
    """Per-question delta of run means between two models, a minus b.

    Means are exact rationals; a delta is zero iff the rationals are
    equal, so prob_delta_zero is an exact count.
    """
    if set(runs_a) != set(runs_b):
        only_a = sorted(set(runs_a) - set(runs_b))[:3]
        only_b = sorted(set(runs_b) - set(runs_a))[:3]
        raise KeyMismatch(f"question keys differ (a-only {only_a}, b-only {only_b})")
    if not runs_a:
        raise EmptyDataset("cross_model needs at least one question")
    deltas: list[Fraction] = []
    for key in runs_a:
        a_scores, b_scores = runs_a[key], runs_b[key]
        if not a_scores or not b_scores:
            raise EmptyDataset(f"question {key} has an empty run list")
        mean_a = Fraction(sum(s.tenths for s in a_scores), len(a_scores))
        mean_b = Fraction(sum(s.tenths for s in b_scores), len(b_scores))
        deltas.append(mean_a - mean_b)
    n = len(deltas)
    total = sum(deltas, start=Fraction(0))
    total_abs = sum((abs(d) for d in deltas), start=Fraction(0))
    zero_count = sum(1 for d in deltas if d == 0)
    return CrossModelDelta(
        n_questions=n,
        mean_delta=float(total / n) / 10.0,
        mean_abs_delta=float(total_abs / n) / 10.0,
        prob_delta_zero=zero_count / n,
    )


# ── verdict distributions ────────────────────────────────────────────────────


def verdict_distribution(records: list[VerdictRecord]) -> dict[str, dict[str, float]]:
    """Two-decimal percentage split of OCR and grading verdicts.

    Rounding is per-category half-up, so the splits may sum to 100 plus
    or minus a rounding step, matching how they are reported.
    """
    if not records:
        raise EmptyDataset("verdict_distribution needs at least one record")
    n = len(records)
    ocr_counts = {verdict: 0 for verdict in OcrVerdict}
    grading_counts = {verdict: 0 for verdict in GradingVerdict}
    for record in records:
        ocr_counts[record.ocr_verdict] += 1
        grading_counts[record.grading_verdict] += 1
    return {
        "ocr": {v.value: percent(c, n) for v, c in ocr_counts.items()},
        "grading": {v.value: percent(c, n) for v, c in grading_counts.items()},
    }


# ── histograms ───────────────────────────────────────────────────────────────


def histogram(values_tenths: list[int], bin_width_tenths: int = 5) -> list[tuple[int, int]]:
    """Counts per bin centered on multiples of the width.

    Bins are half-open [center - w/2, center + w/2); a value exactly on
    a boundary belongs to the higher bin. Zero-count bins between the
    extremes are included so the table plots without gaps.
    """
    if bin_width_tenths <= 0:
        raise GradePipeError(f"bin width must be positive, got {bin_width_tenths}")
    if not values_tenths:
        return []
    w = bin_width_tenths
    indices = [(2 * v + w) // (2 * w) for v in values_tenths]
    counts: dict[int, int] = {}
    for idx in indices:
        counts[idx] = counts.get(idx, 0) + 1
    low, high = min(counts), max(counts)
    return [(idx * w, counts.get(idx, 0)) for idx in range(low, high + 1)]


# ── report directory ─────────────────────────────────────────────────────────


def _stats_row(stats: SummaryStats) -> dict:
    return {
        "n": stats.n,
        "mean_gap": stats.mean_gap,
        "std_gap": stats.std_gap,
        "mae": stats.mae,
        "within_one_pct": stats.within_one_pct,
    }


def write_report(
    out_dir: Path | str,
    gaps: list[GapRecord],
    runs_by_question: dict[str, list[Score]] | None = None,
    cross_model_runs: tuple[dict[str, list[Score]], dict[str, list[Score]]] | None = None,
    verdicts: list[VerdictRecord] | None = None,
    bin_width_tenths: int = 5,
    template_version: str = "",
    config_hash: str = "",
) -> None:
    """Write the full report directory. Optional sections are omitted
    when their inputs are absent, never written half-empty."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"template_version": template_version, "config_hash": config_hash}

    summary = dict(_stats_row(summarize_gaps(gaps)), **meta)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    with open(out / "quiz_table.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["quiz_id", "n", "mean_gap", "std_gap", "mae", "within_one_pct"])
        for quiz_id, stats in quiz_table(gaps):
            writer.writerow(
                [quiz_id, stats.n, repr(stats.mean_gap), repr(stats.std_gap),
                 repr(stats.mae), repr(stats.within_one_pct)]
            )

    with open(out / "histogram_gap.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["center_tenths", "center_points", "count"])
        for center, count in histogram([g.gap_tenths for g in gaps], bin_width_tenths):
            writer.writerow([center, repr(center / 10.0), count])

    if runs_by_question:
        stats = stability(runs_by_question)
        payload = dict(
            n_questions=stats.n_questions,
            mean_sigma=stats.mean_sigma,
            prob_sigma_zero=stats.prob_sigma_zero,
            **meta,
        )
        (out / "stability.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    if cross_model_runs:
        delta = cross_model(*cross_model_runs)
        payload = dict(
            n_questions=delta.n_questions,
            mean_delta=delta.mean_delta,
            mean_abs_delta=delta.mean_abs_delta,
            prob_delta_zero=delta.prob_delta_zero,
            **meta,
        )
        (out / "cross_model.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    if verdicts:
        payload = dict(verdict_distribution(verdicts), n=len(verdicts), **meta)
        (out / "verdicts.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
