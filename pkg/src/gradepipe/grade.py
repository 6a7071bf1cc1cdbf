"""Grading runs, dual-rubric max-rule, k-run stabilization, review flags.

Selection arithmetic stays in integer tenths. Closest-to-mean compares
|n*score - sum| so the run mean is never materialized as a float, and
the variance threshold test is an exact integer comparison.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .backend import Backend, CallLog, complete_with_retry, parse_scored_feedback
from .core import (
    GradePipeError,
    QuestionSpec,
    Score,
    normalize_answer,
    render_decimal,
    score_from_tenths,
)
from .prompting import DEFAULT_PRINCIPLES, RubricKind, RubricSpec, build_grading_prompt, template_version

__all__ = [
    "BLANK_WORK_FEEDBACK",
    "HIGH_VARIANCE_THRESHOLD_TENTHS",
    "SelectionRule",
    "FlagKind",
    "Flag",
    "GradeRun",
    "GradeOutcome",
    "EmptyRuns",
    "MixedRubrics",
    "grade_once",
    "grade_dual",
    "stabilize",
    "detect_flags",
    "run_repeated",
    "grade_question",
    "write_results",
    "read_results",
]

BLANK_WORK_FEEDBACK = "No work detected."

# Run-to-run score spread that triggers review: 0.5 pt population sigma.
HIGH_VARIANCE_THRESHOLD_TENTHS = 5


class SelectionRule(str, Enum):
    SINGLE_RUN = "single_run"
    MAX_RULE = "max_rule"
    CLOSEST_TO_MEAN = "closest_to_mean"


class FlagKind(str, Enum):
    FULL_CREDIT_SPLIT = "full_credit_split"
    CORRECT_ANSWER_UNDER_CREDITED = "correct_answer_under_credited"
    HIGH_VARIANCE = "high_variance"
    OFF_GRID_SCORE = "off_grid_score"
    OCR_SUSPECT = "ocr_suspect"


@dataclass(frozen=True)
class Flag:
    kind: FlagKind
    sigma_tenths: float | None = None


@dataclass(frozen=True)
class GradeRun:
    """One backend grading call, or the blank-work short circuit."""

    rubric_id: str
    run_index: int
    model_id: str
    score: Score
    feedback: str
    template_version: str


@dataclass(frozen=True)
class GradeOutcome:
    """Selected grade plus everything needed to audit the selection."""

    selected_score: Score
    selected_feedback: str
    selection_rule: SelectionRule
    selected_rubric_id: str
    runs: tuple[GradeRun, ...]
    flags: tuple[Flag, ...] = ()


class EmptyRuns(GradePipeError):
    """stabilize() received no runs."""


class MixedRubrics(GradePipeError):
    """stabilize() received runs from more than one rubric."""


# ── single run ───────────────────────────────────────────────────────────────


def grade_once(
    transcription: str,
    question: QuestionSpec,
    rubric: RubricSpec,
    backend: Backend,
    final_answer_text: str = "",
    run_index: int = 0,
    temperature: float | None = 0.0,
    max_retries: int = 2,
    call_log: CallLog | None = None,
    principles: tuple[str, ...] = DEFAULT_PRINCIPLES,
    template_dir: Path | None = None,
) -> GradeRun:
    """Grade one transcription against one rubric.

    A blank transcription short-circuits to score 0 without touching
    the backend; there is nothing for a model to evaluate and a zero
    with an explicit marker is auditable.
    """
    version = template_version(template_dir)
    if not transcription.strip():
        return GradeRun(
            rubric_id=rubric.rubric_id,
            run_index=run_index,
            model_id=backend.model_id,
            score=score_from_tenths(0, question.grid_tenths),
            feedback=BLANK_WORK_FEEDBACK,
            template_version=version,
        )
    bundle = build_grading_prompt(
        transcription,
        question,
        rubric,
        final_answer_text=final_answer_text,
        temperature=temperature,
        principles=principles,
        template_dir=template_dir,
    )
    text = complete_with_retry(
        backend,
        bundle,
        max_retries=max_retries,
        max_points_tenths=question.max_points.tenths,
        grid_tenths=question.grid_tenths,
        call_log=call_log,
    )
    score, feedback = parse_scored_feedback(
        text, question.max_points.tenths, question.grid_tenths
    )
    return GradeRun(
        rubric_id=rubric.rubric_id,
        run_index=run_index,
        model_id=backend.model_id,
        score=score,
        feedback=feedback,
        template_version=version,
    )


def run_repeated(
    transcription: str,
    question: QuestionSpec,
    rubric: RubricSpec,
    backend: Backend,
    k: int,
    **kwargs,
) -> list[GradeRun]:
    """k independent runs of the same rubric, run_index 0..k-1."""
    return [
        grade_once(transcription, question, rubric, backend, run_index=i, **kwargs)
        for i in range(k)
    ]


# ── flag detection ───────────────────────────────────────────────────────────


def _rubric_groups(runs: tuple[GradeRun, ...]) -> list[list[GradeRun]]:
    groups: dict[str, list[GradeRun]] = {}
    for run in runs:
        groups.setdefault(run.rubric_id, []).append(run)
    return list(groups.values())


def detect_flags(
    outcome: GradeOutcome,
    question: QuestionSpec,
    final_answer_text: str = "",
    high_variance_threshold_tenths: int = HIGH_VARIANCE_THRESHOLD_TENTHS,
) -> tuple[Flag, ...]:
    """Review flags for one outcome. Set-valued: one flag per kind.

    Run-spread flags (full-credit split, high variance) are computed per
    same-rubric run group: the Flexible and Fixed rubrics disagreeing is
    what max-rule exists for, not run instability.
    """
    flags: list[Flag] = []
    max_tenths = question.max_points.tenths

    split = False
    worst_sigma_sq: float | None = None
    for group in _rubric_groups(outcome.runs):
        if len(group) < 2:
            continue
        at_max = sum(1 for run in group if run.score.tenths == max_tenths)
        if at_max == 1:
            split = True
        n = len(group)
        total = sum(run.score.tenths for run in group)
        total_sq = sum(run.score.tenths**2 for run in group)
        # population variance >= t^2  <=>  n*sum(x^2) - sum(x)^2 >= n^2 t^2
        spread = n * total_sq - total * total
        if spread >= n * n * high_variance_threshold_tenths**2:
            sigma_sq = spread / (n * n)
            if worst_sigma_sq is None or sigma_sq > worst_sigma_sq:
                worst_sigma_sq = sigma_sq
    if split:
        flags.append(Flag(FlagKind.FULL_CREDIT_SPLIT))

    reference = normalize_answer(question.reference_final_answer)
    if (
        reference
        and normalize_answer(final_answer_text) == reference
        and outcome.selected_score.tenths < max_tenths
    ):
        flags.append(Flag(FlagKind.CORRECT_ANSWER_UNDER_CREDITED))

    if worst_sigma_sq is not None:
        flags.append(Flag(FlagKind.HIGH_VARIANCE, sigma_tenths=math.sqrt(worst_sigma_sq)))

    if outcome.selected_score.off_grid or any(run.score.off_grid for run in outcome.runs):
        flags.append(Flag(FlagKind.OFF_GRID_SCORE))

    return tuple(flags)


# ── aggregation rules ────────────────────────────────────────────────────────


def _with_flags(
    outcome: GradeOutcome,
    question: QuestionSpec,
    final_answer_text: str,
    threshold: int,
) -> GradeOutcome:
    flags = detect_flags(outcome, question, final_answer_text, threshold)
    return GradeOutcome(
        selected_score=outcome.selected_score,
        selected_feedback=outcome.selected_feedback,
        selection_rule=outcome.selection_rule,
        selected_rubric_id=outcome.selected_rubric_id,
        runs=outcome.runs,
        flags=flags,
    )


def _max_rule_select(flexible: GradeRun, fixed: GradeRun) -> GradeRun:
    # Strictly higher wins; ties go to the flexible rubric's feedback.
    return fixed if fixed.score.tenths > flexible.score.tenths else flexible


def grade_dual(
    transcription: str,
    question: QuestionSpec,
    rubrics: tuple[RubricSpec, RubricSpec],
    backend: Backend,
    final_answer_text: str = "",
    high_variance_threshold_tenths: int = HIGH_VARIANCE_THRESHOLD_TENTHS,
    **kwargs,
) -> GradeOutcome:
    """Grade with both rubrics and keep the higher score with its feedback.

    Requires exactly one flexible and one fixed rubric. Either call
    failing fails the whole outcome; no partial results are kept.
    """
    by_kind = {rubric.kind: rubric for rubric in rubrics}
    if len(rubrics) != 2 or set(by_kind) != {RubricKind.FLEXIBLE, RubricKind.FIXED}:
        raise GradePipeError("grade_dual needs exactly one flexible and one fixed rubric")
    flexible_run = grade_once(
        transcription, question, by_kind[RubricKind.FLEXIBLE], backend,
        final_answer_text=final_answer_text, **kwargs,
    )
    fixed_run = grade_once(
        transcription, question, by_kind[RubricKind.FIXED], backend,
        final_answer_text=final_answer_text, **kwargs,
    )
    winner = _max_rule_select(flexible_run, fixed_run)
    outcome = GradeOutcome(
        selected_score=winner.score,
        selected_feedback=winner.feedback,
        selection_rule=SelectionRule.MAX_RULE,
        selected_rubric_id=winner.rubric_id,
        runs=(flexible_run, fixed_run),
    )
    return _with_flags(outcome, question, final_answer_text, high_variance_threshold_tenths)


def stabilize(
    runs: list[GradeRun] | tuple[GradeRun, ...],
    question: QuestionSpec,
    final_answer_text: str = "",
    k: int = 3,
    high_variance_threshold_tenths: int = HIGH_VARIANCE_THRESHOLD_TENTHS,
) -> GradeOutcome:
    """Select the run whose score is closest to the k-run mean.

    The mean is held as the exact sum: run i wins iff |n*s_i - sum| is
    minimal, ties broken by lowest run_index. The selected score is
    always one of the runs' scores; the mean itself is never emitted.
    """
    if not runs:
        raise EmptyRuns("stabilize needs at least one run")
    rubric_ids = {run.rubric_id for run in runs}
    if len(rubric_ids) > 1:
        raise MixedRubrics(f"stabilize got runs from rubrics {sorted(rubric_ids)}")
    if len(runs) < 2:
        raise GradePipeError("stabilization needs at least 2 runs")
    ordered = sorted(runs, key=lambda run: run.run_index)
    n = len(ordered)
    total = sum(run.score.tenths for run in ordered)
    best = min(ordered, key=lambda run: (abs(n * run.score.tenths - total), run.run_index))
    outcome = GradeOutcome(
        selected_score=best.score,
        selected_feedback=best.feedback,
        selection_rule=SelectionRule.CLOSEST_TO_MEAN,
        selected_rubric_id=best.rubric_id,
        runs=tuple(ordered),
    )
    return _with_flags(outcome, question, final_answer_text, high_variance_threshold_tenths)


def grade_question(
    transcription: str,
    question: QuestionSpec,
    rubrics: list[RubricSpec] | tuple[RubricSpec, ...],
    backend: Backend,
    mode: str = "dual",
    runs_per_rubric: int = 3,
    final_answer_text: str = "",
    high_variance_threshold_tenths: int = HIGH_VARIANCE_THRESHOLD_TENTHS,
    **kwargs,
) -> GradeOutcome:
    """One question end to end in the configured mode.

    dual: one run per rubric, max-rule. stabilized: k runs of one rubric
    (the flexible one when both exist). dual+stabilized: stabilize each
    rubric's k runs first, then apply max-rule to the stabilized scores.
    """
    threshold = high_variance_threshold_tenths
    if mode == "dual":
        if len(rubrics) != 2:
            raise GradePipeError(f"dual mode needs 2 rubrics, got {len(rubrics)}")
        return grade_dual(
            transcription, question, (rubrics[0], rubrics[1]), backend,
            final_answer_text=final_answer_text,
            high_variance_threshold_tenths=threshold, **kwargs,
        )
    if mode == "stabilized":
        if runs_per_rubric < 2:
            raise GradePipeError("stabilization needs at least 2 runs")
        rubric = _primary_rubric(rubrics)
        runs = run_repeated(
            transcription, question, rubric, backend, runs_per_rubric,
            final_answer_text=final_answer_text, **kwargs,
        )
        return stabilize(
            runs, question, final_answer_text, k=runs_per_rubric,
            high_variance_threshold_tenths=threshold,
        )
    if mode == "dual+stabilized":
        if len(rubrics) != 2:
            raise GradePipeError(f"dual+stabilized mode needs 2 rubrics, got {len(rubrics)}")
        if runs_per_rubric < 2:
            raise GradePipeError("stabilization needs at least 2 runs")
        by_kind = {rubric.kind: rubric for rubric in rubrics}
        if set(by_kind) != {RubricKind.FLEXIBLE, RubricKind.FIXED}:
            raise GradePipeError("dual+stabilized needs one flexible and one fixed rubric")
        stabilized: dict[RubricKind, GradeOutcome] = {}
        all_runs: list[GradeRun] = []
        for kind in (RubricKind.FLEXIBLE, RubricKind.FIXED):
            runs = run_repeated(
                transcription, question, by_kind[kind], backend, runs_per_rubric,
                final_answer_text=final_answer_text, **kwargs,
            )
            all_runs.extend(runs)
            stabilized[kind] = stabilize(
                runs, question, final_answer_text, k=runs_per_rubric,
                high_variance_threshold_tenths=threshold,
            )
        flex, fixed = stabilized[RubricKind.FLEXIBLE], stabilized[RubricKind.FIXED]
        if fixed.selected_score.tenths > flex.selected_score.tenths:
            winner = fixed
        else:
            winner = flex
        outcome = GradeOutcome(
            selected_score=winner.selected_score,
            selected_feedback=winner.selected_feedback,
            selection_rule=SelectionRule.MAX_RULE,
            selected_rubric_id=winner.selected_rubric_id,
            runs=tuple(all_runs),
        )
        return _with_flags(outcome, question, final_answer_text, threshold)
    raise GradePipeError(f"unknown grading mode: {mode!r}")


def _primary_rubric(rubrics) -> RubricSpec:
    if len(rubrics) == 1:
        return rubrics[0]
    for rubric in rubrics:
        if rubric.kind is RubricKind.FLEXIBLE:
            return rubric
    raise GradePipeError("stabilized mode needs a flexible rubric when several exist")


# ── results file (JSON Lines, one record per submission x question) ──────────


def outcome_record(
    test_code: str,
    question_id: str,
    outcome: GradeOutcome,
    config_hash: str = "",
) -> dict:
    versions = {run.template_version for run in outcome.runs}
    return {
        "test_code": test_code,
        "question_id": question_id,
        "selected_score": render_decimal(outcome.selected_score),
        "selection_rule": outcome.selection_rule.value,
        "selected_rubric_id": outcome.selected_rubric_id,
        "feedback": outcome.selected_feedback,
        "flags": [
            {"kind": flag.kind.value, "sigma_tenths": flag.sigma_tenths}
            for flag in outcome.flags
        ],
        "runs": [
            {
                "rubric_id": run.rubric_id,
                "run_index": run.run_index,
                "model_id": run.model_id,
                "score": render_decimal(run.score),
            }
            for run in outcome.runs
        ],
        "template_version": versions.pop() if len(versions) == 1 else sorted(versions),
        "config_hash": config_hash,
    }


def write_results(path: Path | str, records: list[dict]) -> None:
    ordered = sorted(records, key=lambda r: (r["test_code"], r["question_id"]))
    with open(path, "w", encoding="utf-8") as fh:
        for record in ordered:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_results(path: Path | str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
