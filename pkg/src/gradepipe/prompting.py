"""Prompt assembly from versioned template files.

All prompt text lives in templates/*.txt and is stitched together here.
Builders are pure: same inputs, byte-identical bundles. The digest of
the template set travels with every run so fixture drift is loud.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import GradePipeError, QuestionSpec, RegionKind, render_decimal, score_from_tenths

__all__ = [
    "DEFAULT_PRINCIPLES",
    "ResponseContract",
    "RubricKind",
    "RubricSpec",
    "PromptBundle",
    "TemplateError",
    "EmptyStatement",
    "RubricQuestionMismatch",
    "UnreviewedDraft",
    "MalformedDraft",
    "render_template",
    "template_version",
    "build_system_message",
    "build_ocr_prompt",
    "build_grading_prompt",
    "draft_rubric",
]

# Grading principles included in every system message, in this order.
DEFAULT_PRINCIPLES: tuple[str, ...] = (
    "Distinguish between mathematically correct statements and incorrect reasoning.",
    "Avoid contradictions in feedback.",
    "Do not penalize false starts if later corrected.",
    "Provide concise, constructive explanations for point deductions.",
    "Write feedback in clear, natural language suitable for students.",
)

# The closed set of template files; the version digest covers exactly these.
TEMPLATE_NAMES: tuple[str, ...] = (
    "system.txt",
    "ocr_solution.txt",
    "ocr_final.txt",
    "grade.txt",
    "draft_rubric.txt",
    "message.txt",
)

_PLACEHOLDER_RE = re.compile(r"\{\{(\w+)\}\}")
_POINT_PART_RE = re.compile(r"\((\d+(?:\.\d)?)\s*(?:points?|pts?)\)", re.IGNORECASE)

_PACKAGED_TEMPLATES = Path(__file__).parent / "templates"
_template_cache: dict[tuple[str, str], str] = {}


class TemplateError(GradePipeError):
    """A template file is missing or references an unknown placeholder."""


class EmptyStatement(GradePipeError):
    """The question has a blank problem statement; no prompt can restate it."""


class RubricQuestionMismatch(GradePipeError):
    """The rubric belongs to a different question than the one being graded."""


class UnreviewedDraft(GradePipeError):
    """A drafted rubric was used for grading before a human cleared it."""


class MalformedDraft(GradePipeError):
    """A drafted fixed rubric's point breakdown does not sum to max points."""


class ResponseContract(str, Enum):
    """What shape of response the backend call is expected to produce."""

    FREE_TEXT = "free_text"
    SCORED_FEEDBACK = "scored_feedback"


class RubricKind(str, Enum):
    FLEXIBLE = "flexible"
    FIXED = "fixed"


@dataclass(frozen=True)
class RubricSpec:
    """One rubric for one question.

    guidance_blocks carry standing instructions (no style penalties,
    leniency toward transcription artifacts, ...) appended after the body.
    review_required marks machine drafts that a human has not cleared yet.
    """

    rubric_id: str
    question_id: str
    kind: RubricKind
    body: str
    max_points_tenths: int
    guidance_blocks: tuple[str, ...] = field(default_factory=tuple)
    review_required: bool = False


@dataclass(frozen=True)
class PromptBundle:
    """Everything one backend call needs, fully rendered."""

    system_message: str
    user_message: str
    contract: ResponseContract
    temperature: float | None = None
    image_ref: str | None = None
    audit_override: bool = False

    def __post_init__(self) -> None:
        # Scored grading stays near-deterministic unless explicitly audited.
        if (
            self.contract is ResponseContract.SCORED_FEEDBACK
            and self.temperature is not None
            and self.temperature > 0.1
            and not self.audit_override
        ):
            raise GradePipeError(
                f"scored-feedback temperature {self.temperature} above 0.1 "
                "requires audit_override"
            )

    def cache_text(self) -> str:
        """Canonical text used to key replay fixtures. Prompt-sensitive on purpose."""
        temp = "none" if self.temperature is None else repr(self.temperature)
        return (
            f"contract={self.contract.value}\ntemperature={temp}\n"
            f"--system--\n{self.system_message}\n--user--\n{self.user_message}"
        )


# ── template engine ──────────────────────────────────────────────────────────


def _load_template(name: str, template_dir: Path | None = None) -> str:
    base = Path(template_dir) if template_dir is not None else _PACKAGED_TEMPLATES
    key = (str(base), name)
    if key not in _template_cache:
        path = base / name
        try:
            _template_cache[key] = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"template file not found: {path}") from exc
    return _template_cache[key]


def render_template(name: str, mapping: dict[str, str], template_dir: Path | None = None) -> str:
    """Substitute {{placeholders}} in one pass.

    Values are inserted verbatim and never rescanned, so student text
    containing braces cannot inject placeholders. A placeholder in the
    template with no mapping entry is a build error.
    """
    text = _load_template(name, template_dir)
    missing: list[str] = []

    def sub(match: re.Match[str]) -> str:
        key = match.group(1)
        if key not in mapping:
            missing.append(key)
            return match.group(0)
        return mapping[key]

    rendered = _PLACEHOLDER_RE.sub(sub, text)
    if missing:
        raise TemplateError(f"unknown placeholder(s) in {name}: {sorted(set(missing))}")
    return rendered


def template_version(template_dir: Path | None = None) -> str:
    """12-hex digest over the closed template set, in declaration order."""
    digest = hashlib.sha256()
    for name in TEMPLATE_NAMES:
        digest.update(name.encode())
        digest.update(b"\x00")
        digest.update(_load_template(name, template_dir).encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()[:12]


# ── builders ─────────────────────────────────────────────────────────────────


def build_system_message(
    principles: tuple[str, ...] = DEFAULT_PRINCIPLES,
    template_dir: Path | None = None,
) -> str:
    numbered = "\n".join(f"{i}. {p}" for i, p in enumerate(principles, start=1))
    return render_template("system.txt", {"principles": numbered}, template_dir)


def build_ocr_prompt(
    question: QuestionSpec,
    kind: RegionKind,
    template_dir: Path | None = None,
) -> PromptBundle:
    """Transcription prompt for one answer-box image.

    The final-answer variant tells the model the box holds only a final
    answer. Both restate the problem before the instructions.
    """
    if not question.statement.strip():
        raise EmptyStatement(f"question {question.question_id} has a blank statement")
    name = "ocr_final.txt" if kind is RegionKind.FINAL_ANSWER else "ocr_solution.txt"
    user = render_template(name, {"problem_statement": question.statement}, template_dir)
    return PromptBundle(
        system_message="",
        user_message=user,
        contract=ResponseContract.FREE_TEXT,
        temperature=0.0,
    )


def _final_answer_block(final_answer_text: str) -> str:
    if not final_answer_text.strip():
        return "\n"
    return (
        "\nFinal answer box transcription:\n"
        f"{final_answer_text}\n\n"
        "If the final answer shows a small character-level discrepancy that "
        "transcription likely introduced, and the solution steps clearly support "
        "the correct value, do not deduct points for it.\n\n"
    )


def build_grading_prompt(
    transcription: str,
    question: QuestionSpec,
    rubric: RubricSpec,
    final_answer_text: str = "",
    temperature: float | None = 0.0,
    principles: tuple[str, ...] = DEFAULT_PRINCIPLES,
    template_dir: Path | None = None,
) -> PromptBundle:
    """Scored-feedback bundle for one (transcription, rubric) pair."""
    if rubric.question_id != question.question_id:
        raise RubricQuestionMismatch(
            f"rubric {rubric.rubric_id} is for question {rubric.question_id}, "
            f"not {question.question_id}"
        )
    if rubric.review_required:
        raise UnreviewedDraft(
            f"rubric {rubric.rubric_id} is an unreviewed draft and cannot grade"
        )
    guidance = ""
    if rubric.guidance_blocks:
        guidance = "\n" + "\n\n".join(rubric.guidance_blocks) + "\n"
    max_points = render_decimal(question.max_points)
    grid_step = render_decimal(score_from_tenths(question.grid_tenths, question.grid_tenths))
    user = render_template(
        "grade.txt",
        {
            "problem_statement": question.statement,
            "reference_solution": question.reference_solution,
            "rubric_kind": rubric.kind.value,
            "rubric_body": rubric.body,
            "guidance": guidance,
            "transcription": transcription,
            "final_answer_block": _final_answer_block(final_answer_text),
            "max_points": max_points,
            "grid_step": grid_step,
        },
        template_dir,
    )
    return PromptBundle(
        system_message=build_system_message(principles, template_dir),
        user_message=user,
        contract=ResponseContract.SCORED_FEEDBACK,
        temperature=temperature,
    )


def fixed_breakdown_tenths(body: str) -> int | None:
    """Sum of parenthesized point parts like "(1.0 pt)", in tenths.

    None when the body itemizes nothing.
    """
    parts = _POINT_PART_RE.findall(body)
    if not parts:
        return None
    total = 0
    for part in parts:
        whole, _, frac = part.partition(".")
        total += int(whole) * 10 + (int(frac) if frac else 0)
    return total


def draft_rubric(
    question: QuestionSpec,
    exemplar: RubricSpec,
    backend,
    template_dir: Path | None = None,
) -> RubricSpec:
    """Draft a rubric for a new question from a same-category exemplar.

    The draft comes back review_required; grading refuses it until a
    human clears the flag. Fixed drafts must itemize a point breakdown
    summing to the question's max.
    """
    if not question.statement.strip():
        raise EmptyStatement(f"question {question.question_id} has a blank statement")
    user = render_template(
        "draft_rubric.txt",
        {
            "problem_statement": question.statement,
            "reference_solution": question.reference_solution,
            "rubric_kind": exemplar.kind.value,
            "exemplar_body": exemplar.body,
            "max_points": render_decimal(question.max_points),
        },
        template_dir,
    )
    bundle = PromptBundle(
        system_message="",
        user_message=user,
        contract=ResponseContract.FREE_TEXT,
        temperature=0.0,
    )
    body = backend.complete(bundle).strip()
    if exemplar.kind is RubricKind.FIXED:
        total = fixed_breakdown_tenths(body)
        if total != question.max_points.tenths:
            raise MalformedDraft(
                f"fixed draft for {question.question_id} itemizes "
                f"{total} tenths, max is {question.max_points.tenths}"
            )
    return RubricSpec(
        rubric_id=f"{question.question_id}-{exemplar.kind.value}-draft",
        question_id=question.question_id,
        kind=exemplar.kind,
        body=body,
        max_points_tenths=question.max_points.tenths,
        guidance_blocks=exemplar.guidance_blocks,
        review_required=True,
    )
