"""MoETTA accuracy over experts x balancing weight; thin wrapper over ``moetta sweep``.

    python scripts/expert_sweep.py --checkpoint runs/cm/checkpoint.json --out runs/sweep
"""
import argparse
import json
import sys
from pathlib import Path

from moetta.cli import main as cli


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/classical_mixed.json")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--experts", default="1,3,5,9")
    ap.add_argument("--lambdas", default="0,0.05,0.2")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = {"experts": [int(x) for x in args.experts.split(",")], "lambda": [float(x) for x in args.lambdas.split(",")]}
    (out / "grid.json").write_text(json.dumps(grid))
    return cli(["sweep", "--config", args.config, "--checkpoint", args.checkpoint, "--grid", str(out / "grid.json"), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(main())
