#!/usr/bin/env python3
"""Build the deterministic demo batch used by the end-to-end tests.

Writes a manifest, images, rubrics, TA export, roster, exclusion policy,
and a replay store with every backend response the pipeline will ask
for, so `gradepipe ingest/transcribe/grade/analyze/message` runs offline
and reproducibly against it.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from gradepipe.synthetic import DEMO_SEED, build_demo_batch


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out", type=Path, help="directory to create the batch in")
    parser.add_argument("--codes", type=int, default=57, help="number of test codes")
    parser.add_argument("--seed", type=int, default=DEMO_SEED)
    args = parser.parse_args(argv)

    info = build_demo_batch(args.out, n_codes=args.codes, seed=args.seed)
    print(
        json.dumps(
            {
                "manifest": str(info["manifest"]),
                "ta": str(info["ta"]),
                "roster": str(info["roster"]),
                "exclusions": str(info["exclusions"]),
                "replay": str(info["replay"]),
                "codes": len(info["codes"]),
                "flagged_pairs": len(info["flagged_pairs"]),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
