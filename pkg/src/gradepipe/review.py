"""Human-review queue over flagged grading results.

State is event-sourced: the queue itself is re-derivable from the results
file plus an append-only verdicts.jsonl log, so restarting the service
reconstructs identical state. First verdict wins; later verdicts get a
conflict, never an overwrite.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles

from .analytics import GradingVerdict, OcrVerdict, VerdictRecord, verdict_distribution
from .core import (
    GradePipeError,
    ParseError,
    Score,
    normalize_test_code,
    render_decimal,
    score_from_decimal,
)
from .ingest import LinkedBatch


class ItemNotFound(GradePipeError):
    """No queued item under that id."""


class AlreadyResolved(GradePipeError):
    """A verdict already landed; the new one is rejected, not merged."""


class VerdictValidationError(GradePipeError):
    """Verdict body out of range or malformed."""


class ReviewState(str, Enum):
    OPEN = "open"
    RESOLVED = "resolved"


def item_digest(test_code: str, question_id: str) -> str:
    """Stable item id for one (submission, question) pair."""
    raw = f"{normalize_test_code(test_code)}|{question_id}".encode("utf-8")
    return hashlib.sha256(raw).hexdigest()[:16]


@dataclass(frozen=True)
class ReviewVerdict:
    reviewer_id: str
    ocr_verdict: OcrVerdict
    grading_verdict: GradingVerdict
    reviewer_score: Score
    note: str = ""
    timestamp: float = 0.0


@dataclass
class ReviewItem:
    item_id: str
    test_code: str
    question_id: str
    quiz_id: str
    flags: list[str]
    outcome: dict  # the full results-file record
    transcriptions: dict[str, str]
    image_refs: list[str]
    rubric_bodies: dict[str, str]
    max_points_tenths: int
    state: ReviewState = ReviewState.OPEN
    verdict: ReviewVerdict | None = None

    def summary(self) -> dict:
        return {
            "item_id": self.item_id,
            "test_code": self.test_code,
            "question_id": self.question_id,
            "quiz_id": self.quiz_id,
            "flags": list(self.flags),
            "selected_score": self.outcome.get("selected_score"),
            "max_points": render_decimal(Score(self.max_points_tenths)),
            "state": self.state.value,
        }

    def detail(self) -> dict:
        doc = self.summary()
        doc.update(
            {
                "outcome": self.outcome,
                "transcriptions": dict(self.transcriptions),
                "image_refs": list(self.image_refs),
                "rubric_bodies": dict(self.rubric_bodies),
                "verdict": _verdict_doc(self.verdict) if self.verdict else None,
            }
        )
        return doc


def _verdict_doc(verdict: ReviewVerdict) -> dict:
    return {
        "reviewer_id": verdict.reviewer_id,
        "ocr_verdict": verdict.ocr_verdict.value,
        "grading_verdict": verdict.grading_verdict.value,
        "reviewer_score": render_decimal(verdict.reviewer_score),
        "note": verdict.note,
        "timestamp": verdict.timestamp,
    }


class ReviewStore:
    """In-memory queue with a single-writer append-only verdict log."""

    def __init__(self, state_dir: Path | str):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.state_dir / "verdicts.jsonl"
        self.items: dict[str, ReviewItem] = {}
        self._lock = threading.Lock()
        self._log_records: list[dict] = []

    # ── queue construction ───────────────────────────────────────────────

    def enqueue_flagged(
        self,
        records: list[dict],
        linked: LinkedBatch,
        flag_kinds: set[str] | None = None,
    ) -> int:
        """Add one Open item per flagged result; existing ids are no-ops.

        flag_kinds narrows which flags qualify; None means any flag.
        """
        batch = linked.batch
        regions: dict[tuple[str, str], list] = {}
        for region in batch.records:
            key = (normalize_test_code(region.test_code), region.question_id)
            regions.setdefault(key, []).append(region)
        added = 0
        for record in records:
            kinds = [flag["kind"] for flag in record.get("flags", [])]
            if flag_kinds is not None:
                kinds = [k for k in kinds if k in flag_kinds]
            if not kinds:
                continue
            code = normalize_test_code(record["test_code"])
            question_id = record["question_id"]
            item_id = item_digest(code, question_id)
            if item_id in self.items:
                continue
            question = batch.questions.get(question_id)
            pair_regions = sorted(
                regions.get((code, question_id), []), key=lambda r: r.kind.value
            )
            rubric_ids = question.rubric_ids if question else ()
            self.items[item_id] = ReviewItem(
                item_id=item_id,
                test_code=code,
                question_id=question_id,
                quiz_id=batch.quiz_id,
                flags=[flag["kind"] for flag in record.get("flags", [])],
                outcome=record,
                transcriptions={
                    r.kind.value: r.transcription or "" for r in pair_regions
                },
                image_refs=[r.image_ref for r in pair_regions],
                rubric_bodies={
                    rid: batch.rubrics[rid].body for rid in rubric_ids if rid in batch.rubrics
                },
                max_points_tenths=question.max_points.tenths if question else 0,
            )
            added += 1
        return added

    def replay_log(self) -> int:
        """Re-apply persisted verdicts to the freshly enqueued items."""
        if not self.log_path.exists():
            return 0
        applied = 0
        with open(self.log_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                doc = json.loads(line)
                self._log_records.append(doc)
                item = self.items.get(doc["item_id"])
                if item is None:
                    continue  # log may cover items outside this results slice
                item.state = ReviewState.RESOLVED
                item.verdict = ReviewVerdict(
                    reviewer_id=doc["reviewer_id"],
                    ocr_verdict=OcrVerdict(doc["ocr_verdict"]),
                    grading_verdict=GradingVerdict(doc["grading_verdict"]),
                    reviewer_score=score_from_decimal(doc["reviewer_score"]),
                    note=doc.get("note", ""),
                    timestamp=doc.get("timestamp", 0.0),
                )
                applied += 1
        return applied

    # ── reads ────────────────────────────────────────────────────────────

    def queue(self, state: str = "open") -> list[ReviewItem]:
        if state == "all":
            return list(self.items.values())
        wanted = ReviewState(state)
        return [item for item in self.items.values() if item.state is wanted]

    def get(self, item_id: str) -> ReviewItem:
        item = self.items.get(item_id)
        if item is None:
            raise ItemNotFound(f"no review item {item_id!r}")
        return item

    def stats(self) -> dict:
        """Same numbers analytics computes from the exported verdict log."""
        with self._lock:
            exported = self.export_verdicts()
        if not exported:
            zero = {"ocr": {v.value: 0.0 for v in OcrVerdict},
                    "grading": {v.value: 0.0 for v in GradingVerdict}}
            return {"n": 0, **zero}
        return {"n": len(exported), **verdict_distribution(exported)}

    def export_verdicts(self) -> list[VerdictRecord]:
        """The verdict log as analytics records, in append order."""
        return [
            VerdictRecord(
                test_code=doc["test_code"],
                question_id=doc["question_id"],
                ocr_verdict=OcrVerdict(doc["ocr_verdict"]),
                grading_verdict=GradingVerdict(doc["grading_verdict"]),
            )
            for doc in self._log_records
        ]

    # ── the single mutation ──────────────────────────────────────────────

    def submit(self, item_id: str, verdict: ReviewVerdict) -> ReviewItem:
        """Resolve an Open item; exactly one submitter can win."""
        with self._lock:
            item = self.items.get(item_id)
            if item is None:
                raise ItemNotFound(f"no review item {item_id!r}")
            if item.state is ReviewState.RESOLVED:
                raise AlreadyResolved(f"item {item_id} already has a verdict")
            if verdict.reviewer_score.tenths > item.max_points_tenths:
                raise VerdictValidationError(
                    f"reviewer_score {render_decimal(verdict.reviewer_score)} exceeds "
                    f"max {render_decimal(Score(item.max_points_tenths))}"
                )
            doc = {
                "item_id": item_id,
                "test_code": item.test_code,
                "question_id": item.question_id,
                **_verdict_doc(verdict),
            }
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, sort_keys=True) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._log_records.append(doc)
            item.state = ReviewState.RESOLVED
            item.verdict = verdict
            return item


def parse_verdict_body(body: dict, *, now: float | None = None) -> ReviewVerdict:
    """Wire JSON -> ReviewVerdict; anything malformed raises validation."""
    try:
        reviewer_id = str(body["reviewer_id"]).strip()
        if not reviewer_id:
            raise VerdictValidationError("reviewer_id is required")
        return ReviewVerdict(
            reviewer_id=reviewer_id,
            ocr_verdict=OcrVerdict(body["ocr_verdict"]),
            grading_verdict=GradingVerdict(body["grading_verdict"]),
            reviewer_score=score_from_decimal(str(body["reviewer_score"])),
            note=str(body.get("note", "")),
            timestamp=time.time() if now is None else now,
        )
    except (KeyError, ValueError, ParseError) as exc:
        raise VerdictValidationError(f"bad verdict body: {exc}") from exc


# ── HTTP layer ───────────────────────────────────────────────────────────────

ENV_REVIEW_TOKEN = "GRADEPIPE_REVIEW_TOKEN"


def build_app(
    store: ReviewStore,
    images_root: Path | str | None = None,
    ui_dir: Path | str | None = None,
    token: str | None = None,
):
    """FastAPI app over a store. Token absent means open access."""
    if token is None:
        token = os.environ.get(ENV_REVIEW_TOKEN) or None

    def require_token(request: Request) -> None:
        if token is None:
            return
        supplied = request.headers.get("authorization", "")
        if supplied != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    app = FastAPI(title="gradepipe review", dependencies=[Depends(require_token)])

    @app.get("/")
    def root() -> dict:
        return {
            "service": "gradepipe-review",
            "open": len(store.queue("open")),
            "resolved": len(store.queue("resolved")),
            "ui": ui_mounted,
        }

    @app.get("/queue")
    def get_queue(state: str = "open") -> dict:
        try:
            items = store.queue(state)
        except ValueError:
            raise HTTPException(status_code=422, detail=f"unknown state {state!r}")
        return {"items": [item.summary() for item in items]}

    @app.get("/items/{item_id}")
    def get_item(item_id: str) -> dict:
        try:
            return store.get(item_id).detail()
        except ItemNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/items/{item_id}/verdict")
    async def post_verdict(item_id: str, request: Request) -> dict:
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(status_code=422, detail="body must be JSON")
        if not isinstance(body, dict):
            raise HTTPException(status_code=422, detail="body must be a JSON object")
        try:
            verdict = parse_verdict_body(body)
            item = store.submit(item_id, verdict)
        except VerdictValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except ItemNotFound as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except AlreadyResolved as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return item.detail()

    @app.get("/stats")
    def get_stats() -> dict:
        return store.stats()

    if images_root is not None:
        resolved_root = Path(images_root).resolve()

        @app.get("/images/{item_id}/{index}")
        def get_image(item_id: str, index: int):
            # Only images attached to queued items are reachable, and only
            # when they sit under the declared root.
            try:
                item = store.get(item_id)
            except ItemNotFound as exc:
                raise HTTPException(status_code=404, detail=str(exc))
            if not 0 <= index < len(item.image_refs):
                raise HTTPException(status_code=404, detail="no such image index")
            candidate = Path(item.image_refs[index]).resolve()
            if not str(candidate).startswith(str(resolved_root) + os.sep):
                raise HTTPException(status_code=404, detail="outside image root")
            if not candidate.is_file():
                raise HTTPException(status_code=404, detail="no such image")
            return FileResponse(candidate)

    ui_mounted = False
    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")
        ui_mounted = True

    return app


def serve(
    store: ReviewStore,
    port: int = 8787,
    host: str = "127.0.0.1",
    images_root: Path | str | None = None,
    ui_dir: Path | str | None = None,
    token: str | None = None,
) -> None:
    """Run the review service until interrupted."""
    import uvicorn

    app = build_app(store, images_root=images_root, ui_dir=ui_dir, token=token)
    uvicorn.run(app, host=host, port=port, log_level="warning")
