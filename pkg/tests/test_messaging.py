from __future__ import annotations

import csv
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gradepipe.core import score_from_decimal, score_from_tenths
from gradepipe.grade import Flag, FlagKind, GradeOutcome, GradeRun, SelectionRule
from gradepipe.messaging import (
    DEFAULT_SALUTATION_NAME,
    PENDING_REVIEW_NOTICE,
    DuplicateQuestion,
    MessagePolicy,
    RosterError,
    disclaimer_text,
    load_roster,
    render_message,
    write_messages,
)

GOLDEN = Path(__file__).parent / "golden"

FEEDBACK_ONE = (
    "The work is correct throughout. Integration by parts is set up with the "
    "right choice of parts, the antiderivative is computed accurately, and the "
    "limits are evaluated without error, so full credit is awarded."
)
FEEDBACK_TWO = (
    "The opening identity is recalled correctly and the integrand rewrite is a "
    "reasonable start (criterion 1). The cube expansion step substitutes the "
    "wrong factorization, which produces an incorrect polynomial (criterion 3) "
    "and an incorrect antiderivative (criteria 4 and 5). The resulting terms "
    "are integrated correctly, but the setup error caps the result at 2 out of "
    "5 points."
)


def make_outcome(rubric_id, decimal_score, feedback, flags=()):
    score = score_from_decimal(decimal_score)
    run = GradeRun(rubric_id, 0, "demo-model", score, feedback, "abcdef123456")
    return GradeOutcome(score, feedback, SelectionRule.SINGLE_RUN, rubric_id, (run,), tuple(flags))


def two_question_sections():
    return [
        ("q1", make_outcome("q1-flex", "5", FEEDBACK_ONE)),
        ("q2", make_outcome("q2-flex", "2", FEEDBACK_TWO)),
    ]


class TestRenderMessage:
    def test_two_question_golden(self):
        message = render_message("ab12", two_question_sections(), "Alex Doe")
        assert message.text == (GOLDEN / "message_two_questions.txt").read_text(encoding="utf-8")

    def test_message_frame_structure(self):
        text = render_message("ab12", two_question_sections(), "Alex Doe").text
        assert text.startswith("Dear Alex Doe,\n\n")
        assert "Your test AI grading result is as follows:" in text
        assert text.index("Question 1:") < text.index("Points: 5") < text.index("Question 2:")
        assert text.index("Question 2:") < text.index("Points: 2") < text.index("Total Score: 7")
        assert "Total Score: 7" in text
        assert text.rstrip("\n").endswith("occasional mistakes can occur.")

    def test_total_is_sum_of_points(self):
        message = render_message("ab12", two_question_sections())
        assert message.total.tenths == 70
        assert message.total.tenths == sum(s.points.tenths for s in message.per_question)

    def test_zero_questions_keeps_disclaimer(self):
        message = render_message("ef56", [])
        assert message.text == (GOLDEN / "message_empty.txt").read_text(encoding="utf-8")
        assert message.total.tenths == 0
        assert "Total Score: 0" in message.text
        assert message.disclaimer in message.text
        assert "Question" not in message.text

    def test_withheld_golden(self):
        flagged = make_outcome("q2-flex", "5", "Full credit.", [Flag(FlagKind.FULL_CREDIT_SPLIT)])
        message = render_message(
            "cd34", [("q1", make_outcome("q1-flex", "5", FEEDBACK_ONE)), ("q2", flagged)]
        )
        assert message.text == (GOLDEN / "message_withheld.txt").read_text(encoding="utf-8")

    def test_withheld_section_content(self):
        flagged = make_outcome("q2-flex", "5", "SECRET SCORE", [Flag(FlagKind.HIGH_VARIANCE, 7.0)])
        message = render_message(
            "cd34", [("q1", make_outcome("q1-flex", "5", FEEDBACK_ONE)), ("q2", flagged)]
        )
        assert PENDING_REVIEW_NOTICE in message.text
        assert "SECRET SCORE" not in message.text
        # Hidden points stay out of the total, which is then provisional.
        assert message.total.tenths == 50
        assert message.provisional
        assert "Total Score (provisional): 5" in message.text
        assert message.withheld_question_ids == ("q2",)
        assert [s.question_id for s in message.per_question] == ["q1"]

    def test_withhold_disabled_shows_flagged(self):
        flagged = make_outcome("q2-flex", "3", "Shown anyway.", [Flag(FlagKind.OFF_GRID_SCORE)])
        message = render_message(
            "cd34", [("q2", flagged)], policy=MessagePolicy(withhold_flagged=False)
        )
        assert not message.provisional
        assert "Shown anyway." in message.text
        assert "Total Score: 3" in message.text

    def test_duplicate_question_rejected(self):
        sections = [
            ("q1", make_outcome("q1-flex", "5", "a")),
            ("q1", make_outcome("q1-flex", "4", "b")),
        ]
        with pytest.raises(DuplicateQuestion):
            render_message("ab12", sections)

    def test_default_salutation(self):
        message = render_message("ab12", [])
        assert message.salutation_name == DEFAULT_SALUTATION_NAME
        assert message.text.startswith("Dear Student,")

    def test_sections_numbered_in_given_order(self):
        sections = [
            ("late", make_outcome("late-flex", "1", "x")),
            ("early", make_outcome("early-flex", "2", "y")),
        ]
        text = render_message("ab12", sections).text
        assert text.index("Question 1:") < text.index("Points: 1") < text.index("Question 2:")

    @given(st.lists(st.integers(min_value=0, max_value=60), max_size=6))
    def test_total_property(self, tenths_list):
        sections = []
        for i, tenths in enumerate(tenths_list):
            score = score_from_tenths(tenths)
            run = GradeRun(f"q{i}-flex", 0, "m", score, "fb", "abcdef123456")
            sections.append(
                (f"q{i}", GradeOutcome(score, "fb", SelectionRule.SINGLE_RUN, f"q{i}-flex", (run,)))
            )
        message = render_message("zz99", sections)
        assert message.total.tenths == sum(tenths_list)
        assert len(message.per_question) == len(tenths_list)


class TestDisclaimer:
    def test_two_paragraphs(self):
        text = disclaimer_text()
        first, second = text.split("\n\n")
        assert first.startswith("Please note: AI grading is for reference only.")
        assert second.startswith("Our AI grading has two LLM-based steps:")

    def test_every_message_carries_it(self):
        for sections in ([], two_question_sections()):
            assert disclaimer_text() in render_message("ab12", sections).text


class TestRoster:
    def test_load_and_fallback(self, tmp_path):
        path = tmp_path / "roster.csv"
        path.write_text("test_code,name\nAB12,Alex Doe\n CD34 ,Sam Lee\n")
        roster = load_roster(path)
        assert roster == {"ab12": "Alex Doe", "cd34": "Sam Lee"}

    def test_bad_header(self, tmp_path):
        path = tmp_path / "roster.csv"
        path.write_text("code,student\nAB12,Alex\n")
        with pytest.raises(RosterError):
            load_roster(path)

    def test_bad_row(self, tmp_path):
        path = tmp_path / "roster.csv"
        path.write_text("test_code,name\nAB12,Alex,extra\n")
        with pytest.raises(RosterError):
            load_roster(path)


class TestWriteMessages:
    def test_files_and_index(self, tmp_path):
        flagged = make_outcome("q1-flex", "5", "Full.", [Flag(FlagKind.FULL_CREDIT_SPLIT)])
        per_student = {
            "CD34": [("q1", flagged)],
            "AB12": two_question_sections(),
        }
        rendered = write_messages(tmp_path, per_student, roster={"ab12": "Alex Doe"})
        assert [m.test_code for m in rendered] == ["ab12", "cd34"]
        messages_dir = tmp_path / "messages"
        assert (messages_dir / "ab12.txt").read_text(encoding="utf-8") == rendered[0].text
        assert (messages_dir / "cd34.txt").read_text(encoding="utf-8") == rendered[1].text
        with open(messages_dir / "index.csv", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["test_code", "file", "total", "provisional_flag"]
        assert rows[1] == ["ab12", "ab12.txt", "7", "false"]
        assert rows[2] == ["cd34", "cd34.txt", "0", "true"]

    def test_rerun_overwrites_cleanly(self, tmp_path):
        per_student = {"AB12": two_question_sections()}
        write_messages(tmp_path, per_student)
        first = (tmp_path / "messages" / "ab12.txt").read_bytes()
        write_messages(tmp_path, per_student)
        assert (tmp_path / "messages" / "ab12.txt").read_bytes() == first
