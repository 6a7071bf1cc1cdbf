from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradepipe.core import GradePipeError, QuestionSpec, score_from_decimal, score_from_tenths
from gradepipe.grade import (
    BLANK_WORK_FEEDBACK,
    EmptyRuns,
    Flag,
    FlagKind,
    GradeOutcome,
    GradeRun,
    MixedRubrics,
    SelectionRule,
    detect_flags,
    grade_dual,
    grade_once,
    grade_question,
    outcome_record,
    read_results,
    stabilize,
    write_results,
)
from gradepipe.prompting import RubricKind, RubricSpec, template_version


def make_question(max_points="3", **overrides) -> QuestionSpec:
    defaults = dict(
        question_id="q1",
        statement="Find the sum of the series.",
        reference_solution="Geometric with ratio 2/3; the sum is 4/243.",
        reference_final_answer="4/243",
        max_points=score_from_decimal(max_points),
    )
    defaults.update(overrides)
    return QuestionSpec(**defaults)


def flexible_rubric(**overrides) -> RubricSpec:
    defaults = dict(
        rubric_id="q1-flex",
        question_id="q1",
        kind=RubricKind.FLEXIBLE,
        body="Full credit for a correct, justified sum.",
        max_points_tenths=30,
    )
    defaults.update(overrides)
    return RubricSpec(**defaults)


def fixed_rubric(**overrides) -> RubricSpec:
    defaults = dict(
        rubric_id="q1-fixed",
        question_id="q1",
        kind=RubricKind.FIXED,
        body="Setup (1.0 pt). Ratio (1.0 pt). Final value (1.0 pt).",
        max_points_tenths=30,
    )
    defaults.update(overrides)
    return RubricSpec(**defaults)


def make_run(tenths: int, run_index: int = 0, rubric_id: str = "q1-flex") -> GradeRun:
    return GradeRun(
        rubric_id=rubric_id,
        run_index=run_index,
        model_id="scripted",
        score=score_from_tenths(tenths),
        feedback=f"feedback for run {run_index}",
        template_version="t0",
    )


def make_triple(a: int, b: int, c: int, rubric_id: str = "q1-flex") -> list[GradeRun]:
    return [make_run(t, i, rubric_id) for i, t in enumerate((a, b, c))]


class ScriptedBackend:
    """Pops one canned response per complete() call, in call order."""

    model_id = "scripted"

    def __init__(self, responses):
        self.responses = list(responses)
        self.calls = 0

    def complete(self, bundle):
        self.calls += 1
        return self.responses.pop(0)

    def transcribe(self, image_ref, bundle):
        raise AssertionError("grading must not transcribe")


def scored(score, feedback="fb") -> str:
    return json.dumps({"score": score, "feedback": feedback})


class TestGradeOnce:
    def test_parses_and_stamps_run(self):
        backend = ScriptedBackend([scored(2.5, "close")])
        run = grade_once("student work", make_question(), flexible_rubric(), backend)
        assert run.score.tenths == 25
        assert run.feedback == "close"
        assert run.rubric_id == "q1-flex"
        assert run.model_id == "scripted"
        assert run.template_version == template_version()

    def test_blank_transcription_short_circuits(self):
        class ExplodingBackend:
            model_id = "nope"

            def complete(self, bundle):
                raise AssertionError("backend must not be called for blank work")

            def transcribe(self, image_ref, bundle):
                raise AssertionError("no")

        run = grade_once("   \n", make_question(), flexible_rubric(), ExplodingBackend())
        assert run.score.tenths == 0
        assert run.feedback == BLANK_WORK_FEEDBACK


class TestMaxRule:
    def test_flexible_higher(self):
        backend = ScriptedBackend([scored(3, "flex fb"), scored(2, "fixed fb")])
        outcome = grade_dual("work", make_question(), (flexible_rubric(), fixed_rubric()), backend)
        assert outcome.selected_score.tenths == 30
        assert outcome.selected_feedback == "flex fb"
        assert outcome.selected_rubric_id == "q1-flex"
        assert outcome.selection_rule is SelectionRule.MAX_RULE

    def test_fixed_higher(self):
        backend = ScriptedBackend([scored(1.5, "flex fb"), scored(2.5, "fixed fb")])
        outcome = grade_dual("work", make_question(), (flexible_rubric(), fixed_rubric()), backend)
        assert outcome.selected_score.tenths == 25
        assert outcome.selected_feedback == "fixed fb"
        assert outcome.selected_rubric_id == "q1-fixed"

    def test_tie_takes_flexible_feedback(self):
        backend = ScriptedBackend([scored(2, "flex fb"), scored(2, "fixed fb")])
        outcome = grade_dual("work", make_question(), (flexible_rubric(), fixed_rubric()), backend)
        assert outcome.selected_score.tenths == 20
        assert outcome.selected_feedback == "flex fb"
        assert outcome.selected_rubric_id == "q1-flex"

    def test_rubric_order_does_not_matter(self):
        backend = ScriptedBackend([scored(3, "flex fb"), scored(2, "fixed fb")])
        outcome = grade_dual("work", make_question(), (fixed_rubric(), flexible_rubric()), backend)
        assert outcome.selected_feedback == "flex fb"
        assert [run.rubric_id for run in outcome.runs] == ["q1-flex", "q1-fixed"]

    def test_needs_one_of_each_kind(self):
        with pytest.raises(GradePipeError):
            grade_dual(
                "work",
                make_question(),
                (flexible_rubric(), flexible_rubric(rubric_id="q1-flex2")),
                ScriptedBackend([]),
            )

    def test_failure_of_either_call_fails_outcome(self):
        backend = ScriptedBackend([scored(3), '{"score": 99, "feedback": "x"}'])
        from gradepipe.backend import ScoreOutOfRange

        with pytest.raises(ScoreOutOfRange):
            grade_dual("work", make_question(), (flexible_rubric(), fixed_rubric()), backend)


class TestStabilize:
    def test_two_agree_example(self):
        outcome = stabilize(make_triple(20, 20, 30), make_question())
        assert outcome.selected_score.tenths == 20
        assert outcome.selected_feedback == "feedback for run 0"
        assert outcome.selection_rule is SelectionRule.CLOSEST_TO_MEAN

    def test_evenly_spread_takes_middle(self):
        outcome = stabilize(make_triple(10, 20, 30), make_question())
        assert outcome.selected_score.tenths == 20
        assert outcome.selected_feedback == "feedback for run 1"

    def test_identical_runs_take_lowest_index(self):
        outcome = stabilize(make_triple(25, 25, 25), make_question())
        assert outcome.selected_feedback == "feedback for run 0"
        assert not outcome.flags

    def test_selected_score_always_among_runs(self):
        outcome = stabilize(make_triple(0, 25, 30), make_question())
        assert outcome.selected_score.tenths in {0, 25, 30}

    def test_empty_runs(self):
        with pytest.raises(EmptyRuns):
            stabilize([], make_question())

    def test_single_run_rejected(self):
        with pytest.raises(GradePipeError):
            stabilize([make_run(20)], make_question())

    def test_mixed_rubrics_rejected(self):
        runs = [make_run(20, 0, "q1-flex"), make_run(20, 1, "q1-fixed")]
        with pytest.raises(MixedRubrics):
            stabilize(runs, make_question())

    def test_run_order_input_does_not_matter(self):
        runs = make_triple(20, 20, 30)
        assert stabilize(list(reversed(runs)), make_question()) == stabilize(runs, make_question())


@given(
    a=st.integers(min_value=0, max_value=30),
    b=st.integers(min_value=0, max_value=30),
    positions=st.permutations([0, 1, 2]),
)
def test_two_agree_triples_select_majority(a, b, positions):
    # Any triple with two agreeing scores behaves like a majority vote.
    if a == b:
        return
    values = [a, a, b]
    runs = [make_run(values[positions[i]], i) for i in range(3)]
    outcome = stabilize(runs, make_question())
    assert outcome.selected_score.tenths == a


class TestDetectFlags:
    def outcome_of(self, runs, selected=None) -> GradeOutcome:
        chosen = runs[0] if selected is None else selected
        return GradeOutcome(
            selected_score=chosen.score,
            selected_feedback=chosen.feedback,
            selection_rule=SelectionRule.CLOSEST_TO_MEAN,
            selected_rubric_id=chosen.rubric_id,
            runs=tuple(runs),
        )

    def test_full_credit_split_fires(self):
        runs = make_triple(30, 20, 20)
        flags = detect_flags(self.outcome_of(runs), make_question())
        assert FlagKind.FULL_CREDIT_SPLIT in {f.kind for f in flags}

    def test_full_credit_split_needs_exactly_one(self):
        for triple in [(30, 30, 20), (30, 30, 30), (20, 20, 20), (25, 20, 15)]:
            flags = detect_flags(self.outcome_of(make_triple(*triple)), make_question())
            assert FlagKind.FULL_CREDIT_SPLIT not in {f.kind for f in flags}, triple

    def test_correct_answer_under_credited(self):
        runs = make_triple(20, 20, 20)
        flags = detect_flags(self.outcome_of(runs), make_question(), final_answer_text="4/243.")
        assert FlagKind.CORRECT_ANSWER_UNDER_CREDITED in {f.kind for f in flags}

    def test_correct_answer_at_full_credit_not_flagged(self):
        runs = make_triple(30, 30, 30)
        flags = detect_flags(self.outcome_of(runs), make_question(), final_answer_text="4/243")
        assert FlagKind.CORRECT_ANSWER_UNDER_CREDITED not in {f.kind for f in flags}

    def test_wrong_answer_not_flagged(self):
        runs = make_triple(20, 20, 20)
        flags = detect_flags(self.outcome_of(runs), make_question(), final_answer_text="5/243")
        assert FlagKind.CORRECT_ANSWER_UNDER_CREDITED not in {f.kind for f in flags}

    def test_high_variance_with_sigma_payload(self):
        runs = make_triple(0, 0, 30)
        flags = detect_flags(self.outcome_of(runs), make_question())
        hv = [f for f in flags if f.kind is FlagKind.HIGH_VARIANCE]
        assert len(hv) == 1
        assert hv[0].sigma_tenths == pytest.approx(14.1421356, abs=1e-6)

    def test_high_variance_threshold_inclusive(self):
        # Two runs 1.0 pt apart have population sigma exactly 0.5 pt.
        runs = [make_run(20, 0), make_run(30, 1)]
        flags = detect_flags(self.outcome_of(runs), make_question())
        assert FlagKind.HIGH_VARIANCE in {f.kind for f in flags}

    def test_small_spread_not_flagged(self):
        runs = make_triple(20, 20, 25)
        flags = detect_flags(self.outcome_of(runs), make_question())
        assert FlagKind.HIGH_VARIANCE not in {f.kind for f in flags}

    def test_off_grid_score_flagged(self):
        runs = [make_run(23, 0), make_run(23, 1)]
        flags = detect_flags(self.outcome_of(runs), make_question())
        assert FlagKind.OFF_GRID_SCORE in {f.kind for f in flags}

    def test_single_run_groups_never_spread_flag(self):
        # One run per rubric: rubric disagreement is not run variance.
        runs = [make_run(30, 0, "q1-flex"), make_run(0, 0, "q1-fixed")]
        flags = detect_flags(self.outcome_of(runs), make_question())
        kinds = {f.kind for f in flags}
        assert FlagKind.HIGH_VARIANCE not in kinds
        assert FlagKind.FULL_CREDIT_SPLIT not in kinds

    def test_no_duplicate_kinds(self):
        runs = make_triple(30, 0, 0, "q1-flex") + make_triple(30, 0, 0, "q1-fixed")
        outcome = self.outcome_of(runs)
        flags = detect_flags(outcome, make_question())
        kinds = [f.kind for f in flags]
        assert len(kinds) == len(set(kinds))


class TestComposition:
    def test_dual_plus_stabilized(self):
        # Flexible triple (2.0, 2.5, 2.5) stabilizes to 2.5; fixed triple
        # (2.0, 2.0, 3.0) stabilizes to 2.0; max-rule keeps 2.5 and the
        # fixed triple's full-credit split survives on the composed outcome.
        responses = [
            scored(2.0, "flex r0"), scored(2.5, "flex r1"), scored(2.5, "flex r2"),
            scored(2.0, "fix r0"), scored(2.0, "fix r1"), scored(3.0, "fix r2"),
        ]
        backend = ScriptedBackend(responses)
        outcome = grade_question(
            "work", make_question(), [flexible_rubric(), fixed_rubric()], backend,
            mode="dual+stabilized", runs_per_rubric=3,
        )
        assert backend.calls == 6
        assert outcome.selected_score.tenths == 25
        assert outcome.selected_feedback == "flex r1"
        assert outcome.selection_rule is SelectionRule.MAX_RULE
        assert len(outcome.runs) == 6
        assert FlagKind.FULL_CREDIT_SPLIT in {f.kind for f in outcome.flags}

    def test_stabilized_mode_uses_flexible_rubric(self):
        backend = ScriptedBackend([scored(2), scored(2), scored(3)])
        outcome = grade_question(
            "work", make_question(), [fixed_rubric(), flexible_rubric()], backend,
            mode="stabilized", runs_per_rubric=3,
        )
        assert outcome.selected_rubric_id == "q1-flex"
        assert outcome.selected_score.tenths == 20

    def test_stabilized_mode_rejects_single_run(self):
        with pytest.raises(GradePipeError):
            grade_question(
                "work", make_question(), [flexible_rubric()], ScriptedBackend([]),
                mode="stabilized", runs_per_rubric=1,
            )

    def test_unknown_mode(self):
        with pytest.raises(GradePipeError):
            grade_question("w", make_question(), [flexible_rubric()], ScriptedBackend([]), mode="zen")


class TestResultsFile:
    def test_round_trip_sorted(self, tmp_path):
        outcome = stabilize(make_triple(20, 20, 30), make_question())
        records = [
            outcome_record("zz9", "q2", outcome, config_hash="cfg"),
            outcome_record("aa1", "q1", outcome, config_hash="cfg"),
        ]
        path = tmp_path / "results.jsonl"
        write_results(path, records)
        back = read_results(path)
        assert [(r["test_code"], r["question_id"]) for r in back] == [("aa1", "q1"), ("zz9", "q2")]
        assert back[0]["selected_score"] == "2"
        assert back[0]["selection_rule"] == "closest_to_mean"
        assert back[0]["runs"][2]["score"] == "3"
        assert back[0]["runs"][2]["run_index"] == 2
        assert back[0]["config_hash"] == "cfg"
        assert back[0]["template_version"] == "t0"

    def test_flag_serialization(self, tmp_path):
        outcome = stabilize(make_triple(0, 0, 30), make_question())
        record = outcome_record("c1", "q1", outcome)
        kinds = [f["kind"] for f in record["flags"]]
        assert "full_credit_split" in kinds and "high_variance" in kinds
