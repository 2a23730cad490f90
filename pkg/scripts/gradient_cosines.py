"""Cosine heatmap of accumulated Tent gradients across single-domain streams.

    python scripts/gradient_cosines.py --checkpoint runs/cm/checkpoint.json --out runs/cos.csv
"""
import argparse
from pathlib import Path

from moetta.bench import CLASSICAL_OPERATORS, DomainSpec
from moetta.config import parse_config
from moetta.pipeline import load_source, load_task
from moetta.theory import accumulated_gradient_cosines


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", default="runs/gradient_cosines.csv")
    ap.add_argument("--batches", type=int, default=20)
    ap.add_argument("--severity", type=int, default=5)
    args = ap.parse_args()

    cfg = parse_config(args.config)
    source = load_source(cfg, args.checkpoint)
    _, test = load_task(cfg)
    domains = [DomainSpec(op, op, args.severity, i) for i, op in enumerate(CLASSICAL_OPERATORS)]
    res = accumulated_gradient_cosines(domains, source, test, cfg.adapt, seed=cfg.seeds[0], num_batches=args.batches)
    names = res.tags
    lines = ["domain," + ",".join(names)]
    lines += [n + "," + ",".join(f"{v:.6f}" for v in row) for n, row in zip(names, res.matrix)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"lower-triangle mean {res.lower_mean:.4f}")


if __name__ == "__main__":
    main()
