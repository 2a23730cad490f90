"""``moetta`` command line: pretrain, adapt, sweep, verify-theory, analyze."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, theory
from . import autodiff as ad
from . import bench
from .config import ConfigError, RunConfig, parse_config
from .pipeline import build_stream, load_source, load_task, run_strategy, stream_domains, train_source
from .tta import STRATEGIES, DegenerateStreamError, Metrics
from .vit import checkpoint_hash, save_checkpoint

log = logging.getLogger("moetta")


class CommandError(RuntimeError):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------- pretrain


def cmd_pretrain(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    train, test = load_task(cfg)
    model, report = train_source(cfg, train=train, test=test)
    save_checkpoint(model, out / "checkpoint.json")
    rows = [(i, _f(l), _f(a)) for i, (l, a) in enumerate(zip(report.epoch_loss, report.train_accuracy))]
    _write(out / "pretrain.csv", _rows_csv(["epoch", "loss", "train_accuracy"], rows))
    _write(
        out / "summary.json",
        _json({"seed": cfg.pretrain.source_seed(cfg.seeds), "test_accuracy": report.test_accuracy, "checkpoint_sha256": checkpoint_hash(model)}),
    )
    print(f"clean test accuracy {report.test_accuracy:.4f}; checkpoint {out / 'checkpoint.json'}")
    return 0


# ---------------------------------------------------------------- adapt


def _predictions_csv(m: Metrics, stream) -> str:
    ids = np.concatenate([b.sample_ids for b in stream.batches])
    rows = [(int(i), d, int(y), int(p)) for i, d, y, p in zip(ids, m.domains, m.labels, m.predictions)]
    return _rows_csv(["sample_id", "domain_tag", "label", "prediction"], rows)


def _domain_csv(m: Metrics) -> str:
    return _rows_csv(["domain_tag", "accuracy"], [(t, _f(a)) for t, a in sorted(m.domain_accuracy.items())])


def write_run(out: Path, m: Metrics, stream, embeddings: bool) -> None:
    _write(out / "metrics.csv", m.to_csv())
    _write(out / "predictions.csv", _predictions_csv(m, stream))
    _write(out / "domain_accuracy.csv", _domain_csv(m))
    if m.strategy == "moetta":
        _write(out / "routing.csv", analysis.routing_csv(analysis.routing_trace(m)))
        _write(out / "expert_similarity.csv", analysis.expert_similarity_csv(m.expert_snapshots))
    if embeddings:
        ids = np.concatenate([b.sample_ids for b in stream.batches])
        _write(out / "embeddings.csv", analysis.embeddings_csv(m, ids))


def _load_stream_arg(path: str):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"stream manifest not found: {p}")
    try:
        return bench.load_stream(p)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{p}: malformed stream manifest ({exc})") from exc


def cmd_adapt(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    strategy = args.strategy or cfg.adapt.strategy
    source = load_source(cfg, args.checkpoint)
    fixed = _load_stream_arg(args.stream) if args.stream else None
    test = None if fixed is not None else load_task(cfg)[1]
    summary = []
    for seed in cfg.seeds:
        stream = fixed if fixed is not None else build_stream(cfg, test, seed)
        run_dir = out / f"seed_{seed}"
        _write(run_dir / "stream_manifest.json", _json(stream.manifest))
        m = run_strategy(cfg, source, stream, seed, strategy, track_experts=strategy == "moetta", keep_embeddings=args.embeddings)
        write_run(run_dir, m, stream, args.embeddings)
        summary.append((seed, strategy, _f(m.accuracy), len(m.batches)))
        print(f"seed {seed}: {strategy} accuracy {m.accuracy:.4f}")
    _write(out / "summary.csv", _rows_csv(["seed", "strategy", "accuracy", "batches"], summary))
    return 0


# ---------------------------------------------------------------- sweep


def _parse_grid(path: str) -> list[tuple[int, float]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"grid file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: malformed JSON ({exc})") from exc
    if "cells" in doc:
        cells = [(int(e), float(lam)) for e, lam in doc["cells"]]
    elif {"experts", "lambda"} <= set(doc):
        cells = [(int(e), float(lam)) for e in doc["experts"] for lam in doc["lambda"]]
    else:
        raise ConfigError(f"{p}: grid needs 'cells' or both 'experts' and 'lambda'")
    if not cells or any(e < 1 or lam < 0 for e, lam in cells):
        raise ConfigError(f"{p}: grid cells need experts >= 1 and lambda >= 0")
    return cells


def cmd_sweep(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    cells = _parse_grid(args.grid)
    source = load_source(cfg, args.checkpoint)
    _, test = load_task(cfg)
    rows = analysis.sweep(cells, lambda s: build_stream(cfg, test, s), source, cfg.adapt, cfg.seeds)
    _write(out / "sweep.csv", analysis.sweep_csv(rows))
    _write(out / "sweep_summary.csv", analysis.sweep_summary_csv(rows))
    print(f"{len(cells)} cells x {len(cfg.seeds)} seeds -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------- verify-theory


def cmd_verify(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    rows, checks = theory.verify(trials_per_cell=args.trials, cosine_trials=args.cosine_trials, seed=cfg.seeds[0])
    if args.checkpoint or cfg.checkpoint:
        source = load_source(cfg, args.checkpoint)
        _, test = load_task(cfg)
        doms = [d for d in stream_domains(cfg) if d.operator != "identity"]
        res = theory.accumulated_gradient_cosines(doms, source, test, cfg.adapt, cfg.seeds[0], cfg.adapt.batch_size, args.fig1_batches)
        mat = [[t] + [analysis._fmt(v) for v in row] for t, row in zip(res.tags, res.matrix)]
        _write(out / "gradient_cosines.csv", _rows_csv(["domain"] + res.tags, mat))
        rows.append(("fig1", "lower_triangle_mean", res.lower_mean))
        sym = float(np.nanmax(np.abs(res.matrix - res.matrix.T)))
        ok = sym <= 1e-12 and np.allclose(np.diag(res.matrix), 1.0) and res.lower_mean < 0.999 and not res.degenerate
        checks.append(theory.Check("fig1", "symmetric, unit diagonal, lower mean < 0.999", res.lower_mean, "0.999", bool(ok)))
    _write(out / "report.csv", theory.report_csv(rows))
    _write(out / "summary.csv", theory.summary_csv(checks))
    failed = [c for c in checks if not c.passed]
    for c in checks:
        print(f"{'pass' if c.passed else 'FAIL'}  {c.experiment}: {c.criterion} (value {c.value:.6g})")
    if failed and args.strict:
        raise CommandError(f"{len(failed)} of {len(checks)} checks failed; see {out / 'summary.csv'}")
    return 0


# ---------------------------------------------------------------- analyze


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigError(f"missing run artifact: {path}")
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _num(x: str) -> float:
    return float("nan") if x == analysis.UNDEFINED else float(x)


def analyze_run(run: Path, out: Path) -> None:
    metrics = _read_csv(run / "metrics.csv")
    ent = [float(r["mean_entropy"]) for r in metrics]
    acc = [float(r["batch_accuracy"]) for r in metrics]
    q = max(1, len(ent) // 4)
    stats = [
        ("batches", str(len(metrics))),
        ("mean_batch_accuracy", _f(np.mean(acc))),
        ("entropy_first_quartile", _f(np.mean(ent[:q]))),
        ("entropy_last_quartile", _f(np.mean(ent[-q:]))),
    ]
    if (run / "routing.csv").exists():
        routing = _read_csv(run / "routing.csv")
        cells: dict[tuple[int, int], list[tuple[float, float]]] = {}
        for r in routing:
            cells.setdefault((int(r["layer"]), int(r["expert"])), []).append((float(r["F"]), float(r["P"])))
        rows = [(lay, e, _f(np.mean([f for f, _ in v])), _f(np.mean([p for _, p in v]))) for (lay, e), v in sorted(cells.items())]
        _write(out / "routing_summary.csv", _rows_csv(["layer", "expert", "mean_F", "mean_P"], rows))
        per_layer: dict[int, list[float]] = {}
        for (lay, _), v in cells.items():
            per_layer.setdefault(lay, []).append(np.mean([f for f, _ in v]))
        dev = np.mean([np.max(np.abs(np.array(f) - 1 / len(f))) for f in per_layer.values()])
        stats.append(("mean_load_deviation", _f(dev)))
    if (run / "expert_similarity.csv").exists():
        sim = _read_csv(run / "expert_similarity.csv")
        series: dict[tuple[int, int], tuple[list[float], list[float]]] = {}
        for r in sim:
            w, b = series.setdefault((int(r["batch"]), int(r["layer"])), ([], []))
            w.append(_num(r["cos_weight"]))
            b.append(_num(r["cos_bias"]))
        rows = []
        for (t, lay), (w, b) in sorted(series.items()):
            wf, bf = [x for x in w if np.isfinite(x)], [x for x in b if np.isfinite(x)]
            rows.append((t, lay, analysis._fmt(np.mean(wf)) if wf else analysis.UNDEFINED, analysis._fmt(np.mean(bf)) if bf else analysis.UNDEFINED))
        _write(out / "layer_similarity.csv", _rows_csv(["batch", "layer", "mean_cos_weight", "mean_cos_bias"], rows))
    _write(out / "summary.csv", _rows_csv(["statistic", "value"], stats))


def cmd_analyze(args, cfg: RunConfig) -> int:
    run, out = Path(args.run), Path(args.out)
    if not run.is_dir():
        raise ConfigError(f"run directory not found: {run}")
    seed_dirs = sorted(p for p in run.iterdir() if p.is_dir() and p.name.startswith("seed_"))
    targets = [(d, out / d.name) for d in seed_dirs] or [(run, out)]
    for src, dst in targets:
        analyze_run(src, dst)
    print(f"analyzed {len(targets)} run(s) -> {out}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moetta", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("pretrain", help="train the source ViT on the clean synthetic task")
    common(p)
    p = sub.add_parser("adapt", help="run one strategy over a shift stream")
    common(p)
    p.add_argument("--stream", help="stream manifest (default: compose from the config per seed)")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--checkpoint")
    p.add_argument("--embeddings", action="store_true", help="also export final class-token embeddings")
    p = sub.add_parser("sweep", help="MoETTA accuracy over an (experts, lambda) grid")
    common(p)
    p.add_argument("--grid", required=True)
    p.add_argument("--checkpoint")
    p = sub.add_parser("verify-theory", help="Monte Carlo checks of the two propositions")
    common(p)
    p.add_argument("--trials", type=int, default=625, help="random routing matrices per (E, B) cell")
    p.add_argument("--cosine-trials", type=int, default=2000)
    p.add_argument("--checkpoint", help="also run the accumulated-gradient cosine analysis")
    p.add_argument("--fig1-batches", type=int, default=20)
    p.add_argument("--strict", action="store_true", help="exit nonzero when any check fails")
    p = sub.add_parser("analyze", help="summarize a finished adapt run")
    common(p)
    p.add_argument("--run", required=True)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "sweep": cmd_sweep,
    "verify-theory": cmd_verify,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides, out_dir=args.out)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CommandError, ad.DimensionError, ad.NumericError, DegenerateStreamError, OSError) as exc:
        print(f"moetta {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
