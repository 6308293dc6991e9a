#!/usr/bin/env python3
"""Full ablation driver: scanning orderings and module toggles over seeds.

Equivalent to `sortscan ablate-scan --config scripts/ablation.cfg`, kept as
a script so the grids can be tweaked inline. Writes ablation.json and a
text table under --out.
"""

import argparse
import json
import os

from sortscan import ablate
from sortscan.config import load_config


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=os.path.join(os.path.dirname(__file__), "ablation.cfg"))
    ap.add_argument("--out", default="work/ablation")
    ap.add_argument("--grid", choices=("orderings", "modules", "both"), default="both")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()

    cfg = load_config(args.config, args.set)
    os.makedirs(args.out, exist_ok=True)
    payload = {}
    if args.grid in ("orderings", "both"):
        result = ablate.run_ordering_grid(cfg, os.path.join(args.out, "runs"))
        payload["orderings"] = result
        print(ablate.format_ordering_table(result))
    if args.grid in ("modules", "both"):
        result = ablate.run_toggle_grid(cfg, os.path.join(args.out, "runs"))
        payload["modules"] = result
        print(ablate.format_toggle_table(result))
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out}/ablation.json")


if __name__ == "__main__":
    main()
