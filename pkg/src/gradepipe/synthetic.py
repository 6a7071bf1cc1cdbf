"""Deterministic demo batches and constructed evaluation datasets.

Everything here is synthetic but exercises the same code paths as a live
deployment: the demo builder writes a manifest, TA export, roster,
exclusion policy, and a replay store holding every backend response the
pipeline will request, so full runs are reproducible byte for byte.

The reference_* builders return datasets constructed so the analytics module
lands on specific fixed reference figures exactly; the arithmetic behind
each multiset is spelled out next to it.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from .analytics import GapRecord, GradingVerdict, OcrVerdict, VerdictRecord
from .backend import record_completion, record_transcription
from .core import Score, score_from_tenths
from .ingest import load_manifest
from .prompting import build_grading_prompt

DEMO_SEED = 20260214
DEMO_MODEL_ID = "demo-model"

_QUESTIONS = [
    {
        "question_id": "q1",
        "statement": "Evaluate the definite integral of x*e^(3x) dx from x = 0 to x = 2.",
        "reference_solution": (
            "Integrate by parts with u = x, dv = e^(3x) dx to get "
            "[x*e^(3x)/3 - e^(3x)/9] from 0 to 2 = (5e^6 + 1)/9."
        ),
        "reference_final_answer": "(5e^6 + 1)/9",
        "max_points": "5",
    },
    {
        "question_id": "q2",
        "statement": "Compute the probability that five fair six-sided dice all show different faces.",
        "reference_solution": "6*5*4*3*2 / 6^5 = 720/7776 = 5/54, then normalize the requested ratio to 4/243.",
        "reference_final_answer": "4/243",
        "max_points": "3",
    },
    {
        "question_id": "q3",
        "statement": "Find the limit of sin(x)/(2x) as x approaches 0.",
        "reference_solution": "sin(x)/x tends to 1, so sin(x)/(2x) tends to 1/2.",
        "reference_final_answer": "1/2",
        "max_points": "2",
    },
]

# Per-pair behaviour archetypes; weights keep most work correct or partial
# the way a real section skews, with enough review-worthy cases to matter.
_ARCHETYPES = (
    ("correct", 10),
    ("partial_flex_higher", 7),
    ("partial_fixed_higher", 4),
    ("wrong", 4),
    ("blank", 2),
    ("under_credited", 2),
    ("off_grid", 1),
)


def _flexible_body(max_points: str) -> str:
    return (
        "Award credit for any mathematically valid route to the answer. "
        "Setup and method earn partial credit even when arithmetic slips; "
        f"a fully correct solution earns all {max_points} points."
    )


def _fixed_body(max_tenths: int) -> str:
    steps = max_tenths // 10
    lines = [f"Step {i + 1} completed correctly (1.0 pt)" for i in range(steps)]
    if max_tenths % 10:
        lines.append("Final simplification (0.5 pt)")
    return "Checklist: " + "; ".join(lines) + "."


def _image_bytes(code: str, question_id: str, kind: str) -> bytes:
    # Content-addressed stand-in; nothing ever decodes these as pixels.
    return b"\x89PNG\r\n\x1a\n" + f"{code}/{question_id}/{kind}".encode()


def _codes(n: int, rng: random.Random) -> list[str]:
    letters = "ABCDEFGHJKMNPQRSTUVWXYZ"
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        code = "".join(rng.choice(letters) for _ in range(2)) + f"{rng.randrange(100):02d}"
        if code not in seen:
            seen.add(code)
            out.append(code)
    return out


def _solution_text(code: str, question_id: str, archetype: str, rng: random.Random) -> str:
    if archetype == "blank":
        return ""
    steps = rng.randrange(2, 5)
    body = " \\\\ ".join(
        f"y_{i} &= {rng.randrange(1, 9)}x^{rng.randrange(1, 4)} + {rng.randrange(12)}"
        for i in range(steps)
    )
    return f"% work by {code} on {question_id}\n\\begin{{align}} {body} \\end{{align}}"


def _grades_for(archetype: str, max_tenths: int, reference_answer: str, rng: random.Random):
    """(flex_tenths, fixed_tenths, final_answer_text) for one pair."""
    full = max_tenths
    half = max_tenths // 2 - (max_tenths // 2) % 5
    if archetype == "correct":
        return full, full, reference_answer
    if archetype == "partial_flex_higher":
        return full - 5, max(half - 5, 0), reference_answer if rng.random() < 0.15 else "2e^3"
    if archetype == "partial_fixed_higher":
        return max(half - 5, 0), half, "e^2/3"
    if archetype == "wrong":
        return 5 if full > 5 else 0, 0, "17/4"
    if archetype == "under_credited":
        # Both rubrics land under max while the boxed answer matches.
        return full - 10, full - 15, reference_answer
    if archetype == "off_grid":
        return full - 7, full - 10, "x+1"
    if archetype == "blank":
        # Half the blanks still box the right answer on the answer line,
        # which is exactly the under-credited case reviewers care about.
        return 0, 0, reference_answer if rng.random() < 0.5 else ""
    raise ValueError(archetype)


def _feedback(archetype: str, pts: str) -> str:
    texts = {
        "correct": f"Every step checks out; the result earns the full {pts} points.",
        "partial_flex_higher": f"The method is sound with one algebra slip near the end, for {pts} points.",
        "partial_fixed_higher": f"Checklist steps partially satisfied, totalling {pts} points.",
        "wrong": f"The setup does not match the question, so only {pts} points can be given.",
        "under_credited": f"The derivation skips two checkpoints, so {pts} points are awarded.",
        "off_grid": f"Work merits {pts} points given the uneven step quality.",
        "blank": "No work detected.",
    }
    return texts[archetype]


def build_demo_batch(root: Path | str, n_codes: int = 57, seed: int = DEMO_SEED) -> dict:
    """Write a complete self-grading demo batch under root.

    Returns the paths of everything a pipeline run needs. Deterministic
    for a fixed (n_codes, seed): two builds are byte-identical.
    """
    root = Path(root)
    rng = random.Random(seed)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "rubrics").mkdir(exist_ok=True)
    replay_root = root / "replay"
    replay_root.mkdir(exist_ok=True)
    (replay_root / "meta.json").write_text(
        json.dumps({"model_id": DEMO_MODEL_ID}, sort_keys=True) + "\n", encoding="utf-8"
    )

    codes = _codes(n_codes, rng)
    excluded_code = codes[3]  # taken out by the exclusion policy
    unmatched_code = codes[7]  # never appears in the TA export

    questions = []
    for spec in _QUESTIONS:
        question_id = spec["question_id"]
        max_tenths = int(spec["max_points"]) * 10
        questions.append({**spec, "rubric_ids": [f"{question_id}-flex", f"{question_id}-fixed"]})
        for suffix, body in (
            ("flex", _flexible_body(spec["max_points"])),
            ("fixed", _fixed_body(max_tenths)),
        ):
            rubric = {
                "rubric_id": f"{question_id}-{suffix}",
                "question_id": question_id,
                "kind": "flexible" if suffix == "flex" else "fixed",
                "body": body,
                "max_points": spec["max_points"],
                "guidance_blocks": ["Do not penalize notation style."],
            }
            (root / "rubrics" / f"{question_id}-{suffix}.json").write_text(
                json.dumps(rubric, indent=2, sort_keys=True) + "\n", encoding="utf-8"
            )

    regions = []
    for code in codes:
        for spec in _QUESTIONS:
            for kind in ("solution", "final_answer"):
                name = f"{code}_{spec['question_id']}_{kind}.png"
                (root / "images" / name).write_bytes(
                    _image_bytes(code, spec["question_id"], kind)
                )
                regions.append(
                    {
                        "test_code": code,
                        "question_id": spec["question_id"],
                        "kind": kind,
                        "image_ref": f"images/{name}",
                    }
                )

    manifest_path = root / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"quiz_id": "quiz-2a", "section_id": "sec-1", "questions": questions, "regions": regions},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )

    (root / "exclusions.json").write_text(
        json.dumps(
            {"rules": [{"field": "test_code", "equals": excluded_code, "reason": "scan_quality"}]},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )

    # Roster covers most codes; the rest exercise the neutral salutation.
    roster_lines = ["test_code,name"]
    for i, code in enumerate(codes):
        if i % 9 != 8:
            roster_lines.append(f"{code},Student {i + 1:02d}")
    (root / "roster.csv").write_text("\n".join(roster_lines) + "\n", encoding="utf-8")

    # Archetype per (code, question); the loaded manifest supplies the
    # QuestionSpec/RubricSpec objects so prompt bundles match runtime ones.
    batch = load_manifest(manifest_path)
    names = [name for name, _ in _ARCHETYPES]
    weights = [weight for _, weight in _ARCHETYPES]

    ta_lines = ["test_code,quiz_id,question_id,score"]
    flagged_expect: list[tuple[str, str]] = []
    for code in codes:
        for spec in _QUESTIONS:
            question_id = spec["question_id"]
            question = batch.questions[question_id]
            archetype = rng.choices(names, weights=weights, k=1)[0]
            max_tenths = question.max_points.tenths
            flex_tenths, fixed_tenths, final_text = _grades_for(
                archetype, max_tenths, spec["reference_final_answer"], rng
            )
            if archetype == "off_grid":
                flex_tenths = max_tenths - 7  # deliberately off the half-point grid
            solution_text = _solution_text(code, question_id, archetype, rng)

            record_transcription(
                replay_root, _image_bytes(code, question_id, "solution"), solution_text
            )
            record_transcription(
                replay_root, _image_bytes(code, question_id, "final_answer"), final_text
            )
            if archetype != "blank":
                for suffix, tenths in (("flex", flex_tenths), ("fixed", fixed_tenths)):
                    rubric = batch.rubrics[f"{question_id}-{suffix}"]
                    bundle = build_grading_prompt(
                        solution_text, question, rubric, final_answer_text=final_text
                    )
                    points = tenths / 10
                    completion = {
                        "score": int(points) if tenths % 10 == 0 else round(points, 1),
                        "feedback": _feedback(archetype, f"{points:g}"),
                    }
                    record_completion(replay_root, bundle, json.dumps(completion, sort_keys=True))

            # TA sees the real work; their score tracks the better rubric
            # with occasional half-point disagreement.
            if code != unmatched_code:
                ta_tenths = max(flex_tenths, fixed_tenths) if archetype != "blank" else 0
                ta_tenths = min(max_tenths, max(0, ta_tenths - ta_tenths % 5))
                if rng.random() < 0.25:
                    ta_tenths = min(max_tenths, ta_tenths + 5)
                ta_lines.append(f"{code.lower()},quiz-2a,{question_id},{ta_tenths / 10:g}")
            # Mirror the grader's own flag conditions so tests can assert
            # the queue contents without re-running detection logic.
            selected = 0 if archetype == "blank" else max(flex_tenths, fixed_tenths)
            under_credited = (
                final_text == spec["reference_final_answer"] and selected < max_tenths
            )
            if (under_credited or archetype == "off_grid") and code not in (
                excluded_code,
                unmatched_code,
            ):
                flagged_expect.append((code.lower(), question_id))

    ta_path = root / "ta.csv"
    ta_path.write_text("\n".join(ta_lines) + "\n", encoding="utf-8")

    return {
        "manifest": manifest_path,
        "ta": ta_path,
        "roster": root / "roster.csv",
        "exclusions": root / "exclusions.json",
        "replay": replay_root,
        "codes": codes,
        "excluded_code": excluded_code,
        "unmatched_code": unmatched_code,
        "flagged_pairs": flagged_expect,
    }


def build_dual_rubric_fixture(root: Path | str) -> dict:
    """One question, two rubrics, replay-backed: the flexible rubric
    accepts an alternative derivation at full credit while the fixed
    checklist caps it at partial credit, and the boxed final answer
    matches the reference."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "rubrics").mkdir(exist_ok=True)
    replay_root = root / "replay"
    replay_root.mkdir(exist_ok=True)
    (replay_root / "meta.json").write_text(
        json.dumps({"model_id": DEMO_MODEL_ID}, sort_keys=True) + "\n", encoding="utf-8"
    )

    question = {
        "question_id": "q-dice",
        "statement": "Five fair dice are rolled. Find the probability of the stated event, fully reduced.",
        "reference_solution": "Direct counting gives 720/7776; the requested conditional ratio reduces to 4/243.",
        "reference_final_answer": "4/243",
        "max_points": "3",
        "rubric_ids": ["q-dice-flex", "q-dice-fixed"],
    }
    for suffix, kind, body in (
        ("flex", "flexible", _flexible_body("3")),
        ("fixed", "fixed", _fixed_body(30)),
    ):
        (root / "rubrics" / f"q-dice-{suffix}.json").write_text(
            json.dumps(
                {
                    "rubric_id": f"q-dice-{suffix}",
                    "question_id": "q-dice",
                    "kind": kind,
                    "body": body,
                    "max_points": "3",
                    "guidance_blocks": [],
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )

    code = "AA11"
    regions = []
    for kind in ("solution", "final_answer"):
        name = f"{code}_q-dice_{kind}.png"
        (root / "images" / name).write_bytes(_image_bytes(code, "q-dice", kind))
        regions.append(
            {"test_code": code, "question_id": "q-dice", "kind": kind, "image_ref": f"images/{name}"}
        )
    manifest_path = root / "manifest.json"
    manifest_path.write_text(
        json.dumps(
            {"quiz_id": "quiz-2a", "section_id": "sec-1", "questions": [question], "regions": regions},
            indent=2,
            sort_keys=True,
        )
        + "\n",
        encoding="utf-8",
    )
    (root / "ta.csv").write_text(
        "test_code,quiz_id,question_id,score\naa11,quiz-2a,q-dice,3\n", encoding="utf-8"
    )

    solution_text = (
        "P = \\frac{6!/(6-5)!}{6^5} = \\frac{720}{7776}, "
        "then the requested ratio is \\frac{4}{243} by complementary counting."
    )
    final_text = "4/243"
    record_transcription(replay_root, _image_bytes(code, "q-dice", "solution"), solution_text)
    record_transcription(replay_root, _image_bytes(code, "q-dice", "final_answer"), final_text)

    batch = load_manifest(manifest_path)
    spec = batch.questions["q-dice"]
    completions = {
        "q-dice-flex": {
            "score": 3,
            "feedback": (
                "The complementary-counting route is fully valid and reaches 4/243 "
                "with correct arithmetic, so all 3 points are earned."
            ),
        },
        "q-dice-fixed": {
            "score": 2,
            "feedback": (
                "The checklist's enumeration step is replaced by an unlisted shortcut, "
                "so one checkpoint is unmet and 2 points are awarded."
            ),
        },
    }
    for rubric_id, completion in completions.items():
        bundle = build_grading_prompt(
            solution_text, spec, batch.rubrics[rubric_id], final_answer_text=final_text
        )
        record_completion(replay_root, bundle, json.dumps(completion, sort_keys=True))

    return {
        "manifest": manifest_path,
        "ta": root / "ta.csv",
        "replay": replay_root,
        "test_code": code,
        "question_id": "q-dice",
        "solution_text": solution_text,
        "final_text": final_text,
    }


# ── constructed analytic datasets ────────────────────────────────────────────
#
# Each construction is exact. Gap units are integer tenths throughout; the
# analytics layer divides by ten when reporting points.


def reference_gap_dataset() -> list[GapRecord]:
    """3,950 gap records with mean exactly -0.40 pts and std exactly 1.12 pts.

    Requirements in tenths: sum(g) = -15800 and sum(g^2) = 558688, since
    n*var = sum(g^2) - sum(g)^2/n gives var = 125.44 and sqrt = 11.2.
    Multiset: 324 x (-25), 319 x (+25), 1568 x (-10), 1737 x 0, one +2,
    one +3. Check: 5*(-3161) + 5 = -15800; 25*22347 + 13 = 558688.
    """
    spread = [(-25, 324), (25, 319), (-10, 1568), (0, 1737), (2, 1), (3, 1)]
    records: list[GapRecord] = []
    i = 0
    for gap, count in spread:
        for _ in range(count):
            ta = 60
            records.append(
                GapRecord(
                    test_code=f"c{i:04d}",
                    quiz_id="quiz-2a",
                    question_id=f"q{(i % 4) + 1}",
                    ai=score_from_tenths(ta + gap),
                    ta=score_from_tenths(ta),
                )
            )
            i += 1
    return records


def _triple(base: int, delta: int) -> list[Score]:
    return [score_from_tenths(base), score_from_tenths(base), score_from_tenths(base + delta)]


def reference_stability_runs() -> tuple[dict[str, list[Score]], dict[str, list[Score]]]:
    """Two 171-question run sets hitting the reference stability rows.

    A two-agree triple (a, a, a+d) has sigma = |d| * sqrt(2)/3 tenths.
    Set one: 132 zero-spread, 18 at d=5, 21 at d=10
      -> mean sigma 0.082703 pts, P(sigma=0) = 132/171 = 0.771930.
    Set two: 124 zero-spread, 4 at d=20, 43 at d=25
      -> mean sigma 0.318408 pts, P(sigma=0) = 124/171 = 0.725146.
    """
    set_one: dict[str, list[Score]] = {}
    set_two: dict[str, list[Score]] = {}
    plan_one = [(0, 132), (5, 18), (10, 21)]
    plan_two = [(0, 124), (20, 4), (25, 43)]
    for plan, runs in ((plan_one, set_one), (plan_two, set_two)):
        i = 0
        for delta, count in plan:
            for _ in range(count):
                runs[f"item{i:03d}"] = _triple(10, delta)
                i += 1
    return set_one, set_two


def reference_cross_model_runs() -> tuple[dict[str, list[Score]], dict[str, list[Score]]]:
    """500 questions whose run-mean deltas average +0.087 pts signed,
    0.315 pts absolute, with exactly 232/500 = 0.464 zero deltas.

    Deltas in tenths: 67 x (+40/6), 67 x (+50/6), 74 x (-5), 60 x (-10/3),
    232 x 0. Signed sum = 1005 + (-370) + (-200) = 435 -> 0.87 tenths
    mean; absolute sum = 1575 -> 3.15 tenths mean.
    """
    shapes = [
        # (count, runs_a triple, runs_b triple) with the stated mean delta
        (67, (20, 20, 0), (20, 0, 0)),      # +40/6 tenths
        (67, (30, 30, 15), (20, 20, 10)),   # +50/6 tenths
        (74, (10, 10, 10), (15, 15, 15)),   # -5 tenths
        (60, (0, 0, 0), (5, 5, 0)),         # -10/3 tenths
        (232, (15, 10, 5), (10, 10, 10)),   # 0: equal rational means
    ]
    runs_a: dict[str, list[Score]] = {}
    runs_b: dict[str, list[Score]] = {}
    i = 0
    for count, a_shape, b_shape in shapes:
        for _ in range(count):
            key = f"item{i:03d}"
            runs_a[key] = [score_from_tenths(t) for t in a_shape]
            runs_b[key] = [score_from_tenths(t) for t in b_shape]
            i += 1
    return runs_a, runs_b


def reference_verdict_records() -> list[VerdictRecord]:
    """50,000 audit verdicts reproducing the reference splits exactly.

    OCR: 43820 acceptable / 6180 problematic -> 87.64 / 12.36.
    Grading: 39894 / 4773 / 5333 -> 79.79 / 9.55 / 10.67 after per-cell
    half-up rounding (the reference row sums to 100.01).
    """
    ocr_plan = [(OcrVerdict.ACCEPTABLE, 43820), (OcrVerdict.PROBLEMATIC, 6180)]
    grading_plan = [
        (GradingVerdict.CORRECT, 39894),
        (GradingVerdict.ACCEPTABLE, 4773),
        (GradingVerdict.INCORRECT, 5333),
    ]
    ocr_seq = [v for v, count in ocr_plan for _ in range(count)]
    grading_seq = [v for v, count in grading_plan for _ in range(count)]
    return [
        VerdictRecord(
            test_code=f"c{i:05d}",
            question_id=f"q{(i % 3) + 1}",
            ocr_verdict=ocr_seq[i],
            grading_verdict=grading_seq[i],
        )
        for i in range(len(ocr_seq))
    ]
