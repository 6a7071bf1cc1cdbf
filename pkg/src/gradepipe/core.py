"""Fixed-point score arithmetic and the shared vocabulary types.

Scores live on a half-point grid by default and are stored as integer
tenths of a point. All comparisons, gaps, and aggregations happen in
integer space; floating point appears only when analytics reports out.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

__all__ = [
    "GRID_TENTHS_DEFAULT",
    "GradePipeError",
    "ParseError",
    "Score",
    "QuestionSpec",
    "RegionKind",
    "score_from_decimal",
    "score_from_tenths",
    "render_decimal",
    "score_gap",
    "normalize_test_code",
    "normalize_answer",
]

# One grid step = 0.5 pt = 5 tenths. Quizzes may override per-question.
GRID_TENTHS_DEFAULT = 5

_DECIMAL_RE = re.compile(r"^(\d+)(?:\.(\d))?$")
_TRAILING_PUNCT = ".,;:!?"


class GradePipeError(Exception):
    """Base class for every error this package raises on purpose."""


class ParseError(GradePipeError):
    """Raised when a decimal score string is not on the tenths domain."""


@dataclass(frozen=True)
class Score:
    """A non-negative point value in integer tenths.

    ``off_grid`` records that the value does not sit on the owning
    question's grid; the value itself is kept, never rounded.
    """

    tenths: int
    off_grid: bool = False

    @property
    def points(self) -> float:
        """Float value in points. Reporting only; never feed back in."""
        return self.tenths / 10.0

    def __str__(self) -> str:
        return render_decimal(self)


def score_from_tenths(tenths: int, grid_tenths: int = GRID_TENTHS_DEFAULT) -> Score:
    """Build a Score from integer tenths, marking off-grid values."""
    if tenths < 0:
        raise ParseError(f"score must be non-negative, got {tenths} tenths")
    if grid_tenths <= 0:
        raise ParseError(f"grid step must be positive, got {grid_tenths}")
    return Score(tenths=tenths, off_grid=tenths % grid_tenths != 0)


def score_from_decimal(text: str, grid_tenths: int = GRID_TENTHS_DEFAULT) -> Score:
    """Parse a decimal score string with at most one fractional digit.

    "2.5" -> 25 tenths (on grid), "2.3" -> 23 tenths marked off-grid,
    "3" -> 30 tenths. Anything else (two fractional digits, negatives,
    stray text) raises ParseError.
    """
    match = _DECIMAL_RE.match(text.strip())
    if match is None:
        raise ParseError(f"not a score with at most one fractional digit: {text!r}")
    whole, frac = match.group(1), match.group(2)
    tenths = int(whole) * 10 + (int(frac) if frac is not None else 0)
    return score_from_tenths(tenths, grid_tenths)


def render_decimal(score: Score) -> str:
    """Exact decimal rendering; round-trips through score_from_decimal."""
    whole, frac = divmod(score.tenths, 10)
    return str(whole) if frac == 0 else f"{whole}.{frac}"


def score_gap(ai: Score, ta: Score) -> int:
    """Signed AI-minus-TA gap in tenths. Positive means AI scored higher."""
    return ai.tenths - ta.tenths


class RegionKind(str, Enum):
    """What a cropped answer-box image is expected to contain."""

    SOLUTION = "solution"
    FINAL_ANSWER = "final_answer"


@dataclass(frozen=True)
class QuestionSpec:
    """Authoritative per-question data carried by the quiz manifest."""

    question_id: str
    statement: str
    reference_solution: str
    reference_final_answer: str
    max_points: Score
    rubric_ids: tuple[str, ...] = field(default_factory=tuple)
    grid_tenths: int = GRID_TENTHS_DEFAULT


def normalize_test_code(code: str) -> str:
    """Join key for TA exports and rosters: trim and case-fold, nothing fuzzy."""
    return code.strip().casefold()


def normalize_answer(text: str) -> str:
    """Normalize a final answer for equality checks.

    Trim, case-fold, collapse internal whitespace, strip trailing
    punctuation. Purely textual; no symbolic math.
    """
    collapsed = re.sub(r"\s+", " ", text.strip()).casefold()
    return collapsed.rstrip(_TRAILING_PUNCT).rstrip()
