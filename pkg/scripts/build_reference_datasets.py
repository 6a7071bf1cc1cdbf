#!/usr/bin/env python3
"""Emit the constructed evaluation datasets and the statistics they hit.

Each dataset is built by gradepipe.synthetic to land on specific
aggregate figures exactly (the arithmetic is documented next to each
builder). This script writes them to disk in plain formats and prints
the statistics the analytics module computes from them, so the numbers
are reproducible from a single command:

    python3 scripts/build_reference_datasets.py out/

Outputs:
    gaps.csv                one row per (test_code, quiz_id, question_id, ai, ta)
    stability_runs_a.json   question_id -> [three scores]
    stability_runs_b.json   question_id -> [three scores]
    cross_model_runs.json   {"a": {...}, "b": {...}} run sets for two models
    verdicts.csv            test_code,question_id,ocr_verdict,grading_verdict
    expected_stats.json     the statistics computed from the datasets
"""

from __future__ import annotations

import argparse
import csv
import json
from pathlib import Path

from gradepipe.analytics import (
    cross_model,
    stability,
    summarize_gaps,
    verdict_distribution,
)
from gradepipe.core import render_decimal
from gradepipe.synthetic import (
    reference_cross_model_runs,
    reference_gap_dataset,
    reference_stability_runs,
    reference_verdict_records,
)


def _runs_doc(runs: dict) -> dict:
    return {key: [render_decimal(score) for score in scores] for key, scores in runs.items()}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path, help="directory to write the datasets into")
    args = parser.parse_args(argv)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)

    gaps = reference_gap_dataset()
    with (out / "gaps.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["test_code", "quiz_id", "question_id", "ai", "ta"])
        for record in gaps:
            writer.writerow(
                [
                    record.test_code,
                    record.quiz_id,
                    record.question_id,
                    render_decimal(record.ai),
                    render_decimal(record.ta),
                ]
            )

    runs_a, runs_b = reference_stability_runs()
    (out / "stability_runs_a.json").write_text(
        json.dumps(_runs_doc(runs_a), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (out / "stability_runs_b.json").write_text(
        json.dumps(_runs_doc(runs_b), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    cm_a, cm_b = reference_cross_model_runs()
    (out / "cross_model_runs.json").write_text(
        json.dumps({"a": _runs_doc(cm_a), "b": _runs_doc(cm_b)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )

    verdicts = reference_verdict_records()
    with (out / "verdicts.csv").open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["test_code", "question_id", "ocr_verdict", "grading_verdict"])
        for record in verdicts:
            writer.writerow(
                [
                    record.test_code,
                    record.question_id,
                    record.ocr_verdict.value,
                    record.grading_verdict.value,
                ]
            )

    summary = summarize_gaps(gaps)
    stab_a, stab_b = stability(runs_a), stability(runs_b)
    delta = cross_model(cm_a, cm_b)
    stats = {
        "gaps": {
            "n": summary.n,
            "mean_gap": summary.mean_gap,
            "std_gap": summary.std_gap,
            "mae": summary.mae,
            "within_one_pct": summary.within_one_pct,
        },
        "stability_a": {
            "n_questions": stab_a.n_questions,
            "mean_sigma": stab_a.mean_sigma,
            "prob_sigma_zero": stab_a.prob_sigma_zero,
        },
        "stability_b": {
            "n_questions": stab_b.n_questions,
            "mean_sigma": stab_b.mean_sigma,
            "prob_sigma_zero": stab_b.prob_sigma_zero,
        },
        "cross_model": {
            "n_questions": delta.n_questions,
            "mean_delta": delta.mean_delta,
            "mean_abs_delta": delta.mean_abs_delta,
            "prob_delta_zero": delta.prob_delta_zero,
        },
        "verdicts": verdict_distribution(verdicts),
    }
    (out / "expected_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(json.dumps(stats, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
