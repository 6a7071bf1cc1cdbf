"""Command-line entry point wiring the pipeline stages together.

Exit codes: 0 ok, 2 validation problem, 3 backend failure, 4 I/O failure.
Failures print one machine-readable JSON record to stderr. Commands are
re-runnable; transcribe and grade resume from per-region status.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import analytics, backend as backend_mod, review as review_mod
from .config import ConfigError, PipelineConfig, config_hash, load_config
from .core import (
    GradePipeError,
    ParseError,
    RegionKind,
    normalize_test_code,
    score_from_decimal,
)
from .grade import (
    Flag,
    FlagKind,
    GradeOutcome,
    SelectionRule,
    grade_question,
    outcome_record,
    read_results,
    write_results,
)
from .ingest import (
    RegionStatus,
    apply_exclusions,
    link_ta_scores,
    load_batch,
    load_manifest,
    save_batch,
    write_exclusion_ledger,
)
from .messaging import MessagePolicy, load_roster, write_messages
from .prompting import build_ocr_prompt, template_version

EXIT_VALIDATION = 2
EXIT_BACKEND = 3
EXIT_IO = 4

_BACKEND_ERRORS = (
    backend_mod.TransportError,
    backend_mod.MalformedOutput,
    backend_mod.ScoreOutOfRange,
    backend_mod.ExhaustedRetries,
)


def _fail(exc: BaseException, code: int) -> None:
    record = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(code)


def pipeline_command(fn):
    """Uniform error-to-exit-code mapping for every subcommand."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _BACKEND_ERRORS as exc:
            _fail(exc, EXIT_BACKEND)
        except (GradePipeError, ConfigError) as exc:
            _fail(exc, EXIT_VALIDATION)
        except json.JSONDecodeError as exc:
            _fail(exc, EXIT_VALIDATION)
        except OSError as exc:
            _fail(exc, EXIT_IO)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _effective_config(ctx: click.Context, **overrides) -> PipelineConfig:
    return load_config(ctx.obj.get("config_path"), overrides)


def _make_backend(kind: str, config: PipelineConfig, replay_root: str | None):
    if kind == "replay":
        if not replay_root:
            raise ConfigError("--replay-root is required with the replay backend")
        explicit = config.model_id if config.model_id != "replay" else None
        return backend_mod.ReplayBackend(replay_root, model_id=explicit)
    return backend_mod.HttpBackend(model_id=config.model_id)


@click.group()
@click.option(
    "--config",
    "config_path",
    type=click.Path(exists=True, dir_okay=False),
    default=None,
    help="JSON config file; flags override its keys.",
)
@click.version_option(package_name="gradepipe")
@click.pass_context
def main(ctx: click.Context, config_path: str | None) -> None:
    """Rubric-guided grading pipeline for scanned handwritten quizzes."""
    ctx.obj = {"config_path": config_path}


# ── ingest ───────────────────────────────────────────────────────────────────


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ta", "ta_csv", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--exclusions", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="batch_state")
@pipeline_command
def ingest(manifest: str, ta_csv: str, exclusions: str | None, out_dir: str) -> None:
    """Load a scan manifest, apply exclusions, and join TA scores."""
    batch = load_manifest(manifest)
    if exclusions is not None:
        policy = json.loads(Path(exclusions).read_text(encoding="utf-8"))
        apply_exclusions(batch, policy)
    linked = link_ta_scores(batch, ta_csv)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_exclusion_ledger(out / "exclusions.tsv", batch)
    save_batch(out / "batch.json", linked)
    click.echo(
        json.dumps(
            {
                "batch": str(out / "batch.json"),
                "regions": len(batch.records),
                "included": len(batch.included()),
                "excluded": len(batch.excluded()),
                "ta_scores": len(linked.ta_scores),
            },
            sort_keys=True,
        )
    )


# ── transcribe ───────────────────────────────────────────────────────────────


@main.command()
@click.option("--batch", "batch_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default="replay")
@click.option("--replay-root", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--model", "model_id", default=None, help="Override the configured model id.")
@click.option("--parallelism", type=int, default=None)
@click.pass_context
@pipeline_command
def transcribe(
    ctx: click.Context,
    batch_dir: str,
    backend_kind: str,
    replay_root: str | None,
    model_id: str | None,
    parallelism: int | None,
) -> None:
    """Turn pending region images into markup transcriptions."""
    config = _effective_config(ctx, model_id=model_id, parallelism=parallelism)
    state_path = Path(batch_dir) / "batch.json"
    linked = load_batch(state_path)
    batch = linked.batch
    backend = _make_backend(backend_kind, config, replay_root)
    call_log = backend_mod.CallLog()
    pending = [r for r in batch.records if r.status is RegionStatus.PENDING]

    def work(region) -> None:
        question = batch.questions[region.question_id]
        bundle = build_ocr_prompt(question, region.kind)
        region.transcription = backend_mod.transcribe_with_retry(
            backend, region.image_ref, bundle, config.max_retries, call_log
        )
        region.advance(RegionStatus.TRANSCRIBED)

    try:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            for _ in pool.map(work, pending):
                pass
    finally:
        save_batch(state_path, linked)  # keep partial progress for resume
    click.echo(
        json.dumps(
            {
                "transcribed": sum(r.status is RegionStatus.TRANSCRIBED for r in batch.records),
                "pending": sum(r.status is RegionStatus.PENDING for r in batch.records),
                "calls": len(call_log.entries),
            },
            sort_keys=True,
        )
    )


# ── grade ────────────────────────────────────────────────────────────────────


@main.command()
@click.option("--batch", "batch_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--backend", "backend_kind", type=click.Choice(["live", "replay"]), default="replay")
@click.option("--replay-root", type=click.Path(exists=True, file_okay=False), default=None)
@click.option("--model", "model_id", default=None)
@click.option("--mode", type=click.Choice(["dual", "stabilized", "dual+stabilized"]), default=None)
@click.option("--runs", type=int, default=None)
@click.option("--parallelism", type=int, default=None)
@click.pass_context
@pipeline_command
def grade(
    ctx: click.Context,
    batch_dir: str,
    out_path: str | None,
    backend_kind: str,
    replay_root: str | None,
    model_id: str | None,
    mode: str | None,
    runs: int | None,
    parallelism: int | None,
) -> None:
    """Grade transcribed questions and write one record per (code, question)."""
    config = _effective_config(
        ctx, model_id=model_id, mode=mode, runs=runs, parallelism=parallelism
    )
    state_path = Path(batch_dir) / "batch.json"
    out = Path(out_path) if out_path else Path(batch_dir) / "results.jsonl"
    linked = load_batch(state_path)
    batch = linked.batch
    backend = _make_backend(backend_kind, config, replay_root)
    cfg_hash = config_hash(config)

    existing = read_results(out) if out.exists() else []
    records = {(r["test_code"], r["question_id"]): r for r in existing}

    # One gradeable unit per (code, question): the solution region drives
    # it, the final-answer region feeds the leniency check when present.
    pairs: dict[tuple[str, str], dict] = {}
    for region in batch.records:
        key = (normalize_test_code(region.test_code), region.question_id)
        pairs.setdefault(key, {})[region.kind] = region

    todo = []
    for key, by_kind in sorted(pairs.items()):
        solution = by_kind.get(RegionKind.SOLUTION)
        if solution is None or solution.status is not RegionStatus.TRANSCRIBED:
            continue  # excluded, still pending, or already graded
        todo.append((key, by_kind))

    def work(entry):
        (code, question_id), by_kind = entry
        question = batch.questions[question_id]
        rubrics = [batch.rubrics[rid] for rid in question.rubric_ids]
        final_region = by_kind.get(RegionKind.FINAL_ANSWER)
        final_text = ""
        if final_region is not None and final_region.transcription:
            final_text = final_region.transcription
        outcome = grade_question(
            by_kind[RegionKind.SOLUTION].transcription or "",
            question,
            rubrics,
            backend,
            mode=config.mode,
            runs_per_rubric=config.runs,
            final_answer_text=final_text,
            high_variance_threshold_tenths=config.high_variance_threshold_tenths,
            temperature=config.temperature,
            max_retries=config.max_retries,
        )
        return (code, question_id), by_kind, outcome

    try:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            for key, by_kind, outcome in pool.map(work, todo):
                records[key] = outcome_record(key[0], key[1], outcome, cfg_hash)
                for region in by_kind.values():
                    if region.status is RegionStatus.TRANSCRIBED:
                        region.advance(RegionStatus.GRADED)
    finally:
        save_batch(state_path, linked)
        write_results(out, list(records.values()))
    click.echo(
        json.dumps(
            {"results": str(out), "graded": len(todo), "total_records": len(records)},
            sort_keys=True,
        )
    )


# ── analyze ──────────────────────────────────────────────────────────────────


def _read_verdicts_csv(path: str) -> list[analytics.VerdictRecord]:
    wanted = ["test_code", "question_id", "ocr_verdict", "grading_verdict"]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != wanted:
            raise ParseError(f"verdicts header must be {','.join(wanted)}")
        out = []
        for row in reader:
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise ParseError(f"bad verdicts row: {row!r}")
            try:
                out.append(
                    analytics.VerdictRecord(
                        test_code=normalize_test_code(row[0]),
                        question_id=row[1].strip(),
                        ocr_verdict=analytics.OcrVerdict(row[2].strip()),
                        grading_verdict=analytics.GradingVerdict(row[3].strip()),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"bad verdict value in {row!r}: {exc}") from exc
        return out


@main.command()
@click.option("--results", "results_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ta", "ta_csv", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--verdicts", "verdicts_csv", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="report")
@click.option("--bin-width-tenths", type=int, default=None)
@click.pass_context
@pipeline_command
def analyze(
    ctx: click.Context,
    results_path: str,
    ta_csv: str,
    verdicts_csv: str | None,
    out_dir: str,
    bin_width_tenths: int | None,
) -> None:
    """Compare AI scores against TA scores and write the report tables."""
    config = _effective_config(ctx, histogram_bin_width_tenths=bin_width_tenths)
    records = read_results(results_path)

    ta_rows: dict[tuple[str, str], tuple[str, object]] = {}
    with open(ta_csv, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["test_code", "quiz_id", "question_id", "score"]:
            raise ParseError("TA export header must be test_code,quiz_id,question_id,score")
        for row in reader:
            if not any(cell.strip() for cell in row):
                continue
            code = normalize_test_code(row[0])
            if len(row) != 4:
                raise ParseError(f"bad TA export row: {row!r}")
            ta_rows[(code, row[2].strip())] = (
                row[1].strip(),
                score_from_decimal(row[3].strip()),
            )

    gaps: list[analytics.GapRecord] = []
    unmatched = 0
    for record in records:
        key = (normalize_test_code(record["test_code"]), record["question_id"])
        if key not in ta_rows:
            unmatched += 1
            continue
        quiz_id, ta_score = ta_rows[key]
        gaps.append(
            analytics.GapRecord(
                test_code=key[0],
                quiz_id=quiz_id,
                question_id=key[1],
                ai=score_from_decimal(record["selected_score"]),
                ta=ta_score,
            )
        )

    verdicts = _read_verdicts_csv(verdicts_csv) if verdicts_csv else None
    analytics.write_report(
        out_dir,
        gaps,
        verdicts=verdicts,
        bin_width_tenths=config.histogram_bin_width_tenths,
        template_version=template_version(),
        config_hash=config_hash(config),
    )
    click.echo(
        json.dumps(
            {"report": out_dir, "gap_records": len(gaps), "unmatched_results": unmatched},
            sort_keys=True,
        )
    )


# ── message ──────────────────────────────────────────────────────────────────


def _outcome_from_record(record: dict) -> GradeOutcome:
    return GradeOutcome(
        selected_score=score_from_decimal(record["selected_score"]),
        selected_feedback=record["feedback"],
        selection_rule=SelectionRule(record["selection_rule"]),
        selected_rubric_id=record["selected_rubric_id"],
        runs=(),
        flags=tuple(
            Flag(FlagKind(flag["kind"]), flag.get("sigma_tenths"))
            for flag in record.get("flags", [])
        ),
    )


@main.command()
@click.option("--results", "results_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--roster", "roster_csv", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default="out")
@click.option("--withhold-flagged/--show-flagged", "withhold", default=None)
@click.pass_context
@pipeline_command
def message(
    ctx: click.Context,
    results_path: str,
    roster_csv: str | None,
    out_dir: str,
    withhold: bool | None,
) -> None:
    """Render per-student result messages plus the index manifest."""
    config = _effective_config(ctx, withhold_flagged=withhold)
    records = read_results(results_path)
    per_student: dict[str, list] = {}
    for record in sorted(records, key=lambda r: (r["test_code"], r["question_id"])):
        per_student.setdefault(record["test_code"], []).append(
            (record["question_id"], _outcome_from_record(record))
        )
    roster = load_roster(roster_csv) if roster_csv else None
    rendered = write_messages(
        out_dir,
        per_student,
        roster=roster,
        policy=MessagePolicy(withhold_flagged=config.withhold_flagged),
    )
    click.echo(
        json.dumps(
            {
                "messages": len(rendered),
                "provisional": sum(m.provisional for m in rendered),
                "index": str(Path(out_dir) / "messages" / "index.csv"),
            },
            sort_keys=True,
        )
    )


# ── serve ────────────────────────────────────────────────────────────────────


@main.command()
@click.option("--results", "results_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--batch", "batch_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--state", "state_dir", type=click.Path(file_okay=False), default=None)
@click.option("--port", type=int, default=8787)
@click.option("--host", default="127.0.0.1")
@click.option("--ui", "ui_dir", type=click.Path(exists=True, file_okay=False), default=None)
@pipeline_command
def serve(
    results_path: str,
    batch_dir: str,
    state_dir: str | None,
    port: int,
    host: str,
    ui_dir: str | None,
) -> None:
    """Serve the flagged-item review queue (and the console UI if built)."""
    linked = load_batch(Path(batch_dir) / "batch.json")
    records = read_results(results_path)
    store = review_mod.ReviewStore(state_dir or Path(batch_dir) / "review_state")
    store.enqueue_flagged(records, linked)
    store.replay_log()
    ref_dirs = {os.path.dirname(ref) for item in store.items.values() for ref in item.image_refs}
    images_root = os.path.commonpath(sorted(ref_dirs)) if ref_dirs else None
    click.echo(
        json.dumps(
            {"open": len(store.queue("open")), "resolved": len(store.queue("resolved")),
             "port": port},
            sort_keys=True,
        )
    )
    review_mod.serve(store, port=port, host=host, images_root=images_root, ui_dir=ui_dir)


if __name__ == "__main__":
    main()
