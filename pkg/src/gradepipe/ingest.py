"""Batch ingest: quiz manifest, TA score export, exclusion policies.

The manifest is the authority on questions, rubrics, and max points.
Joins against the TA export use trimmed, case-folded test codes and
nothing fuzzier. Exclusion policies are declarative and score-blind by
construction: only metadata fields pass the allowlist.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .core import (
    GradePipeError,
    ParseError,
    QuestionSpec,
    RegionKind,
    Score,
    GRID_TENTHS_DEFAULT,
    normalize_test_code,
    render_decimal,
    score_from_decimal,
)
from .prompting import RubricKind, RubricSpec

__all__ = [
    "ManifestParseError",
    "DuplicateRegion",
    "DanglingRubric",
    "TaExportError",
    "PolicyReferencesScores",
    "RegionStatus",
    "ExclusionReason",
    "RegionRecord",
    "Batch",
    "LinkedBatch",
    "load_manifest",
    "link_ta_scores",
    "apply_exclusions",
    "write_exclusion_ledger",
    "save_batch",
    "load_batch",
]

TA_EXPORT_HEADER = ["test_code", "quiz_id", "question_id", "score"]

# Metadata fields an exclusion rule may reference. Nothing score-shaped.
POLICY_FIELD_ALLOWLIST = ("test_code", "question_id", "quiz_id", "section_id", "kind")


class ManifestParseError(GradePipeError):
    """The manifest or a rubric file is structurally unusable."""


class DuplicateRegion(GradePipeError):
    """Two regions claim the same (test_code, question_id, kind)."""


class DanglingRubric(GradePipeError):
    """A question references a rubric with no rubric file."""


class TaExportError(GradePipeError):
    """The TA export is malformed or self-contradictory."""


class PolicyReferencesScores(GradePipeError):
    """An exclusion rule touched a field outside the metadata allowlist."""


class RegionStatus(str, Enum):
    PENDING = "pending"
    TRANSCRIBED = "transcribed"
    GRADED = "graded"
    EXCLUDED = "excluded"


# Forward-only lifecycle; excluded is terminal from any earlier state.
_STATUS_ORDER = {
    RegionStatus.PENDING: 0,
    RegionStatus.TRANSCRIBED: 1,
    RegionStatus.GRADED: 2,
    RegionStatus.EXCLUDED: 3,
}


class ExclusionReason(str, Enum):
    SEGMENTATION_FAILURE = "segmentation_failure"
    SCAN_QUALITY = "scan_quality"
    UNMATCHED_TEST_CODE = "unmatched_test_code"
    MISSING_TA_EXPORT = "missing_ta_export"
    FIRST_QUIZ_POLICY = "first_quiz_policy"
    SECTION_ARTIFACT = "section_artifact"
    REVIEWER_UNAVAILABLE = "reviewer_unavailable"


@dataclass
class RegionRecord:
    """One cropped answer-box image and its pipeline lifecycle."""

    test_code: str
    question_id: str
    kind: RegionKind
    image_ref: str
    status: RegionStatus = RegionStatus.PENDING
    exclusion_reason: ExclusionReason | None = None
    transcription: str | None = None

    def advance(self, new_status: RegionStatus, reason: ExclusionReason | None = None) -> None:
        if _STATUS_ORDER[new_status] < _STATUS_ORDER[self.status]:
            raise GradePipeError(
                f"status cannot move backwards: {self.status.value} -> {new_status.value}"
            )
        self.status = new_status
        if new_status is RegionStatus.EXCLUDED:
            self.exclusion_reason = reason


@dataclass
class Batch:
    """One quiz's worth of regions plus its questions and rubrics."""

    quiz_id: str
    section_id: str
    questions: dict[str, QuestionSpec]
    rubrics: dict[str, RubricSpec]
    records: list[RegionRecord]

    def included(self) -> list[RegionRecord]:
        return [r for r in self.records if r.status is not RegionStatus.EXCLUDED]

    def excluded(self) -> list[RegionRecord]:
        return [r for r in self.records if r.status is RegionStatus.EXCLUDED]

    def exclude_pair(self, test_code: str, question_id: str, reason: ExclusionReason) -> None:
        """Exclusions operate per (test_code, question_id): both regions go."""
        for record in self.records:
            if (
                record.test_code == test_code
                and record.question_id == question_id
                and record.status is not RegionStatus.EXCLUDED
            ):
                record.advance(RegionStatus.EXCLUDED, reason)


@dataclass
class LinkedBatch:
    """Batch joined with TA scores, keyed by (normalized code, question_id)."""

    batch: Batch
    ta_scores: dict[tuple[str, str], Score]


# ── manifest ─────────────────────────────────────────────────────────────────


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ManifestParseError(f"{context}: missing required field {key!r}")
    return doc[key]


def _load_rubric_file(path: Path, question: QuestionSpec) -> RubricSpec:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestParseError(f"rubric file {path} unreadable: {exc}") from exc
    context = f"rubric {path.name}"
    try:
        kind = RubricKind(_require(doc, "kind", context))
    except ValueError as exc:
        raise ManifestParseError(f"{context}: unknown rubric kind {doc.get('kind')!r}") from exc
    rubric_question = _require(doc, "question_id", context)
    if rubric_question != question.question_id:
        raise ManifestParseError(
            f"{context}: belongs to question {rubric_question!r}, "
            f"referenced by {question.question_id!r}"
        )
    try:
        max_points = score_from_decimal(str(_require(doc, "max_points", context)))
    except ParseError as exc:
        raise ManifestParseError(f"{context}: bad max_points: {exc}") from exc
    if max_points.tenths != question.max_points.tenths:
        raise ManifestParseError(
            f"{context}: max_points {render_decimal(max_points)} disagrees with "
            f"the manifest's {render_decimal(question.max_points)}"
        )
    return RubricSpec(
        rubric_id=_require(doc, "rubric_id", context),
        question_id=rubric_question,
        kind=kind,
        body=str(_require(doc, "body", context)),
        max_points_tenths=max_points.tenths,
        guidance_blocks=tuple(doc.get("guidance_blocks", ())),
        review_required=bool(doc.get("review_required", False)),
    )


def load_manifest(path: Path | str) -> Batch:
    """Parse a quiz manifest plus the rubric files it references.

    Rubric files live in rubrics/<rubric_id>.json next to the manifest.
    Region image paths are resolved relative to the manifest directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestParseError(f"manifest {path} unreadable: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestParseError(f"manifest {path} is not a JSON object")

    quiz_id = str(_require(doc, "quiz_id", "manifest"))
    section_id = str(_require(doc, "section_id", "manifest"))
    grid_tenths = int(doc.get("grid_tenths", GRID_TENTHS_DEFAULT))
    if grid_tenths <= 0:
        raise ManifestParseError(f"grid_tenths must be positive, got {grid_tenths}")

    questions: dict[str, QuestionSpec] = {}
    for q_doc in _require(doc, "questions", "manifest"):
        context = f"question {q_doc.get('question_id', '?')}"
        try:
            max_points = score_from_decimal(str(_require(q_doc, "max_points", context)))
        except ParseError as exc:
            raise ManifestParseError(f"{context}: bad max_points: {exc}") from exc
        question = QuestionSpec(
            question_id=str(_require(q_doc, "question_id", context)),
            statement=str(_require(q_doc, "statement", context)),
            reference_solution=str(q_doc.get("reference_solution", "")),
            reference_final_answer=str(q_doc.get("reference_final_answer", "")),
            max_points=max_points,
            rubric_ids=tuple(q_doc.get("rubric_ids", ())),
            grid_tenths=grid_tenths,
        )
        if question.question_id in questions:
            raise ManifestParseError(f"duplicate question_id {question.question_id!r}")
        questions[question.question_id] = question

    rubric_dir = path.parent / "rubrics"
    rubrics: dict[str, RubricSpec] = {}
    for question in questions.values():
        for rubric_id in question.rubric_ids:
            rubric_path = rubric_dir / f"{rubric_id}.json"
            if not rubric_path.exists():
                raise DanglingRubric(
                    f"question {question.question_id} references rubric "
                    f"{rubric_id!r} but {rubric_path} does not exist"
                )
            rubrics[rubric_id] = _load_rubric_file(rubric_path, question)

    records: list[RegionRecord] = []
    seen: set[tuple[str, str, str]] = set()
    for r_doc in _require(doc, "regions", "manifest"):
        context = "region"
        test_code = str(_require(r_doc, "test_code", context))
        question_id = str(_require(r_doc, "question_id", context))
        try:
            kind = RegionKind(_require(r_doc, "kind", context))
        except ValueError as exc:
            raise ManifestParseError(f"region has unknown kind {r_doc.get('kind')!r}") from exc
        if question_id not in questions:
            raise ManifestParseError(
                f"region for {test_code!r} references unknown question {question_id!r}"
            )
        key = (test_code, question_id, kind.value)
        if key in seen:
            raise DuplicateRegion(f"duplicate region {key}")
        seen.add(key)
        image_ref = str(_require(r_doc, "image_ref", context))
        records.append(
            RegionRecord(
                test_code=test_code,
                question_id=question_id,
                kind=kind,
                image_ref=str((path.parent / image_ref).resolve()),
            )
        )

    return Batch(
        quiz_id=quiz_id,
        section_id=section_id,
        questions=questions,
        rubrics=rubrics,
        records=records,
    )


# ── TA export linking ────────────────────────────────────────────────────────


def _read_ta_export(path: Path | str) -> list[tuple[str, str, str, Score]]:
    rows: list[tuple[str, str, str, Score]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TA_EXPORT_HEADER:
            raise TaExportError(
                f"TA export header must be {','.join(TA_EXPORT_HEADER)}, got {header}"
            )
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise TaExportError(f"TA export line {line_no}: expected 4 columns, got {len(row)}")
            code, quiz_id, question_id, score_text = row
            try:
                score = score_from_decimal(score_text)
            except ParseError as exc:
                raise TaExportError(f"TA export line {line_no}: {exc}") from exc
            rows.append((code, quiz_id, question_id, score))
    return rows


def link_ta_scores(batch: Batch | LinkedBatch, ta_export: Path | str) -> LinkedBatch:
    """Join TA scores onto the batch by (case-folded test code, question).

    Regions with no matching export row are excluded: as
    missing_ta_export when the whole question is absent from the export,
    as unmatched_test_code otherwise. Idempotent for a fixed export.
    """
    if isinstance(batch, LinkedBatch):
        batch = batch.batch
    rows = _read_ta_export(ta_export)

    ta_scores: dict[tuple[str, str], Score] = {}
    exported_questions: set[str] = set()
    for code, quiz_id, question_id, score in rows:
        if quiz_id != batch.quiz_id:
            continue  # other quizzes' rows are not ours to validate
        if question_id not in batch.questions:
            continue
        question = batch.questions[question_id]
        if score.tenths > question.max_points.tenths:
            raise TaExportError(
                f"TA score {render_decimal(score)} exceeds max "
                f"{render_decimal(question.max_points)} for {question_id}"
            )
        key = (normalize_test_code(code), question_id)
        if key in ta_scores and ta_scores[key] != score:
            raise TaExportError(f"conflicting TA scores for {key}")
        ta_scores[key] = score
        exported_questions.add(question_id)

    for record in batch.records:
        if record.status is RegionStatus.EXCLUDED:
            continue
        key = (normalize_test_code(record.test_code), record.question_id)
        if key in ta_scores:
            continue
        if record.question_id not in exported_questions:
            reason = ExclusionReason.MISSING_TA_EXPORT
        else:
            reason = ExclusionReason.UNMATCHED_TEST_CODE
        batch.exclude_pair(record.test_code, record.question_id, reason)

    return LinkedBatch(batch=batch, ta_scores=ta_scores)


# ── exclusion policies ───────────────────────────────────────────────────────


def _validate_policy(policy: dict) -> list[dict]:
    if not isinstance(policy, dict) or "rules" not in policy:
        raise ManifestParseError("exclusion policy must be an object with a 'rules' list")
    rules = policy["rules"]
    if not isinstance(rules, list):
        raise ManifestParseError("policy 'rules' must be a list")
    for rule in rules:
        if not isinstance(rule, dict):
            raise ManifestParseError(f"policy rule is not an object: {rule!r}")
        field_name = rule.get("field")
        if field_name not in POLICY_FIELD_ALLOWLIST:
            raise PolicyReferencesScores(
                f"policy field {field_name!r} is outside the metadata allowlist "
                f"{POLICY_FIELD_ALLOWLIST}; scores and outcomes are off limits"
            )
        if ("equals" in rule) == ("in" in rule):
            raise ManifestParseError("policy rule needs exactly one of 'equals' or 'in'")
        try:
            ExclusionReason(rule.get("reason"))
        except ValueError as exc:
            raise ManifestParseError(f"policy rule has unknown reason {rule.get('reason')!r}") from exc
    return rules


def apply_exclusions(batch: Batch, policy: dict) -> Batch:
    """Apply a declarative, score-blind exclusion policy.

    A rule matching any region of a (test_code, question_id) pair
    excludes the whole pair. First matching rule wins. Included plus
    excluded always partitions the batch.
    """
    rules = _validate_policy(policy)
    for rule in rules:
        field_name = rule["field"]
        allowed = {str(rule["equals"])} if "equals" in rule else {str(v) for v in rule["in"]}
        reason = ExclusionReason(rule["reason"])
        batch_level = {"quiz_id": batch.quiz_id, "section_id": batch.section_id}
        if field_name in batch_level:
            if batch_level[field_name] in allowed:
                for record in list(batch.records):
                    batch.exclude_pair(record.test_code, record.question_id, reason)
            continue
        for record in list(batch.records):
            if record.status is RegionStatus.EXCLUDED:
                continue
            value = {
                "test_code": record.test_code,
                "question_id": record.question_id,
                "kind": record.kind.value,
            }[field_name]
            if value in allowed:
                batch.exclude_pair(record.test_code, record.question_id, reason)
    return batch


def write_exclusion_ledger(path: Path | str, batch: Batch) -> None:
    """TSV of excluded (test_code, question_id, reason), one row per pair."""
    pairs: dict[tuple[str, str], ExclusionReason] = {}
    for record in batch.excluded():
        key = (record.test_code, record.question_id)
        if key not in pairs and record.exclusion_reason is not None:
            pairs[key] = record.exclusion_reason
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("test_code\tquestion_id\treason\n")
        for (code, question_id), reason in sorted(pairs.items()):
            fh.write(f"{code}\t{question_id}\t{reason.value}\n")


# ── batch state persistence (used by the CLI between stages) ─────────────────


def save_batch(state_path: Path | str, linked: LinkedBatch) -> None:
    batch = linked.batch
    doc = {
        "quiz_id": batch.quiz_id,
        "section_id": batch.section_id,
        "questions": [
            {
                "question_id": q.question_id,
                "statement": q.statement,
                "reference_solution": q.reference_solution,
                "reference_final_answer": q.reference_final_answer,
                "max_points": render_decimal(q.max_points),
                "rubric_ids": list(q.rubric_ids),
                "grid_tenths": q.grid_tenths,
            }
            for q in batch.questions.values()
        ],
        "rubrics": [
            {
                "rubric_id": r.rubric_id,
                "question_id": r.question_id,
                "kind": r.kind.value,
                "body": r.body,
                "max_points": render_decimal(Score(r.max_points_tenths)),
                "guidance_blocks": list(r.guidance_blocks),
                "review_required": r.review_required,
            }
            for r in batch.rubrics.values()
        ],
        "records": [
            {
                "test_code": r.test_code,
                "question_id": r.question_id,
                "kind": r.kind.value,
                "image_ref": r.image_ref,
                "status": r.status.value,
                "exclusion_reason": r.exclusion_reason.value if r.exclusion_reason else None,
                "transcription": r.transcription,
            }
            for r in batch.records
        ],
        "ta_scores": {
            f"{code}|{question_id}": render_decimal(score)
            for (code, question_id), score in sorted(linked.ta_scores.items())
        },
    }
    Path(state_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_batch(state_path: Path | str) -> LinkedBatch:
    doc = json.loads(Path(state_path).read_text(encoding="utf-8"))
    questions = {
        q["question_id"]: QuestionSpec(
            question_id=q["question_id"],
            statement=q["statement"],
            reference_solution=q["reference_solution"],
            reference_final_answer=q["reference_final_answer"],
            max_points=score_from_decimal(q["max_points"], q["grid_tenths"]),
            rubric_ids=tuple(q["rubric_ids"]),
            grid_tenths=q["grid_tenths"],
        )
        for q in doc["questions"]
    }
    rubrics = {
        r["rubric_id"]: RubricSpec(
            rubric_id=r["rubric_id"],
            question_id=r["question_id"],
            kind=RubricKind(r["kind"]),
            body=r["body"],
            max_points_tenths=score_from_decimal(r["max_points"]).tenths,
            guidance_blocks=tuple(r["guidance_blocks"]),
            review_required=r["review_required"],
        )
        for r in doc["rubrics"]
    }
    records = [
        RegionRecord(
            test_code=r["test_code"],
            question_id=r["question_id"],
            kind=RegionKind(r["kind"]),
            image_ref=r["image_ref"],
            status=RegionStatus(r["status"]),
            exclusion_reason=ExclusionReason(r["exclusion_reason"]) if r["exclusion_reason"] else None,
            transcription=r.get("transcription"),
        )
        for r in doc["records"]
    ]
    batch = Batch(
        quiz_id=doc["quiz_id"],
        section_id=doc["section_id"],
        questions=questions,
        rubrics=rubrics,
        records=records,
    )
    ta_scores: dict[tuple[str, str], Score] = {}
    for key, text in doc["ta_scores"].items():
        code, _, question_id = key.partition("|")
        grid = questions[question_id].grid_tenths if question_id in questions else GRID_TENTHS_DEFAULT
        ta_scores[(code, question_id)] = score_from_decimal(text, grid)
    return LinkedBatch(batch=batch, ta_scores=ta_scores)
