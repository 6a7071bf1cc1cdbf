"""Student-facing result messages and the per-batch email export.

The message skeleton lives in templates/message.txt, so any wording change
moves the template version along with the prompts. Rendering is pure text
assembly; scores stay in tenths until the final decimal formatting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .core import (
    GradePipeError,
    Score,
    normalize_test_code,
    render_decimal,
    score_from_tenths,
)
from .grade import GradeOutcome
from .prompting import render_template

DEFAULT_SALUTATION_NAME = "Student"

ROSTER_HEADER = ["test_code", "name"]

# Shown in place of Points/Evaluation when a flagged question is withheld.
PENDING_REVIEW_NOTICE = (
    "This question is pending human review. Your score will be updated once "
    "review is complete."
)

_TOTAL_SENTINEL = "\x00total\x00"


class DuplicateQuestion(GradePipeError):
    """Two outcomes claim the same question for one student."""


class RosterError(GradePipeError):
    """Roster CSV is malformed."""


@dataclass(frozen=True)
class MessagePolicy:
    # Flagged outcomes are contested; default keeps them out of student mail.
    withhold_flagged: bool = True


@dataclass(frozen=True)
class QuestionSection:
    question_id: str
    points: Score
    evaluation: str


@dataclass(frozen=True)
class StudentMessage:
    test_code: str
    salutation_name: str
    per_question: tuple[QuestionSection, ...]  # displayed sections only
    withheld_question_ids: tuple[str, ...]
    total: Score  # sum of displayed points, never of hidden ones
    disclaimer: str
    text: str  # the full rendered message

    @property
    def provisional(self) -> bool:
        return bool(self.withheld_question_ids)


def disclaimer_text(template_dir: Path | None = None) -> str:
    """The two-paragraph closing disclaimer, exactly as the template has it."""
    rendered = render_template(
        "message.txt",
        {"salutation_name": "", "sections": "", "total_line": _TOTAL_SENTINEL},
        template_dir=template_dir,
    )
    return rendered.split(_TOTAL_SENTINEL, 1)[1].strip("\n")


def render_message(
    test_code: str,
    sections: list[tuple[str, GradeOutcome]],
    roster_name: str | None = None,
    policy: MessagePolicy | None = None,
    *,
    template_dir: Path | None = None,
) -> StudentMessage:
    """Render one student's message from (question_id, outcome) pairs.

    Sections appear in the order given, numbered from 1. With
    policy.withhold_flagged set, any outcome carrying flags collapses to a
    pending-review notice and its points are left out of the total, which is
    then labeled provisional.
    """
    policy = policy or MessagePolicy()
    name = roster_name or DEFAULT_SALUTATION_NAME
    seen: set[str] = set()
    displayed: list[QuestionSection] = []
    withheld: list[str] = []
    parts: list[str] = []
    for number, (question_id, outcome) in enumerate(sections, start=1):
        if question_id in seen:
            raise DuplicateQuestion(f"question {question_id!r} appears twice for {test_code!r}")
        seen.add(question_id)
        if policy.withhold_flagged and outcome.flags:
            withheld.append(question_id)
            parts.append(f"Question {number}:\n\n{PENDING_REVIEW_NOTICE}\n\n")
            continue
        displayed.append(
            QuestionSection(question_id, outcome.selected_score, outcome.selected_feedback)
        )
        parts.append(
            f"Question {number}:\n\n"
            f"Points: {render_decimal(outcome.selected_score)}\n\n"
            f"Evaluation: {outcome.selected_feedback}\n\n"
        )
    total = score_from_tenths(sum(s.points.tenths for s in displayed))
    label = "Total Score (provisional)" if withheld else "Total Score"
    text = render_template(
        "message.txt",
        {
            "salutation_name": name,
            "sections": "".join(parts),
            "total_line": f"{label}: {render_decimal(total)}",
        },
        template_dir=template_dir,
    )
    return StudentMessage(
        test_code=test_code,
        salutation_name=name,
        per_question=tuple(displayed),
        withheld_question_ids=tuple(withheld),
        total=total,
        disclaimer=disclaimer_text(template_dir),
        text=text,
    )


def load_roster(path: Path | str) -> dict[str, str]:
    """Read a test_code,name CSV keyed like the TA-export join."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ROSTER_HEADER:
            raise RosterError(f"roster header must be {','.join(ROSTER_HEADER)}")
        names: dict[str, str] = {}
        for row in reader:
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise RosterError(f"bad roster row: {row!r}")
            names[normalize_test_code(row[0])] = row[1].strip()
    return names


def write_messages(
    out_dir: Path | str,
    per_student: dict[str, list[tuple[str, GradeOutcome]]],
    roster: dict[str, str] | None = None,
    policy: MessagePolicy | None = None,
    *,
    template_dir: Path | None = None,
) -> list[StudentMessage]:
    """Write messages/<test_code>.txt plus messages/index.csv under out_dir.

    Returns the rendered messages in index order (sorted by test code).
    """
    messages_dir = Path(out_dir) / "messages"
    messages_dir.mkdir(parents=True, exist_ok=True)
    roster = roster or {}
    rendered: list[StudentMessage] = []
    rows: list[list[str]] = []
    for code in sorted(per_student, key=normalize_test_code):
        norm = normalize_test_code(code)
        message = render_message(
            norm, per_student[code], roster.get(norm), policy, template_dir=template_dir
        )
        file_name = f"{norm}.txt"
        (messages_dir / file_name).write_text(message.text, encoding="utf-8")
        rows.append(
            [
                norm,
                file_name,
                render_decimal(message.total),
                "true" if message.provisional else "false",
            ]
        )
        rendered.append(message)
    with open(messages_dir / "index.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["test_code", "file", "total", "provisional_flag"])
        writer.writerows(rows)
    return rendered
