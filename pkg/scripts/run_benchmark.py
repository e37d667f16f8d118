#!/usr/bin/env python3
"""Run the default benchmark end to end and print the summary.

Equivalent to: spoofbench run-all --config configs/default.json --out <dir>
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from spoofbench import bench  # noqa: E402


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(
        Path(__file__).resolve().parents[1] / "configs" / "default.json"))
    parser.add_argument("--out", default="bench-out")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    cfg = bench.load_config(args.config)
    from dataclasses import replace
    cfg = replace(cfg, output_dir=args.out)
    summary = bench.run_all(cfg, jobs=args.jobs)
    print(json.dumps(summary, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
