"""Recompute the implied-constant ceilings from the reference scenarios.

Usage: python demos/calibrate_ceilings.py [--write]

Without --write the table is printed only.  The committed table in
src/flowgrad/data/ceilings.json is the frozen calibration the audits use.
"""

import argparse
import json
from pathlib import Path

from flowgrad.harness.audit import calibrate_ceilings

TARGET = Path(__file__).resolve().parents[1] / "src" / "flowgrad" / "data" / "ceilings.json"


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--write", action="store_true", help="overwrite the committed table")
    args = parser.parse_args()
    table = calibrate_ceilings()
    text = json.dumps(table, indent=2, sort_keys=True) + "\n"
    print(text)
    if args.write:
        TARGET.write_text(text)
        print(f"wrote {TARGET}")


if __name__ == "__main__":
    main()
