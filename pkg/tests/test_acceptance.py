"""Acceptance criteria 1-10, one pass/fail line each.

Lines are collected in ``RESULTS`` and printed in the terminal summary by
``conftest.pytest_terminal_summary``; a failing criterion also fails its test.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from moetta import autodiff as ad
from moetta.autodiff import Tape, grad_check
from moetta.bench import DomainSpec, compose_stream, default_domains
from moetta.cli import main
from moetta.config import parse_config
from moetta.moe_ln import load_balancing_value
from moetta.pipeline import build_stream, run_strategy
from moetta.theory import accumulated_gradient_cosines, lb_bound_check, mc_cosine_expectation
from moetta.tta import AdaptationConfig, AdaptationState, adapt_batch, adapt_stream, configure, entropy
from moetta.vit import ReplacementPlan, ViTConfig, forward, init_params, replace_norms

from .conftest import SEEDS

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def desk_config(name: str):
    return parse_config(ROOT / "configs" / name)


# ---------------------------------------------------------------- 1


def test_c01_balancing_bound():
    t0 = time.perf_counter()
    worst, dev, total = np.inf, 0.0, 0
    for e in (2, 4, 8, 16):
        for b in (1, 8, 64, 256):
            r = lb_bound_check(e, b, 625, seed=42)
            worst = min(worst, r.min_loss)
            total += r.trials
            dev = max(dev, abs(load_balancing_value(np.full((b, e), 1.0 / e)) - 1.0))
    secs = time.perf_counter() - t0
    ok = total >= 10_000 and worst >= 1 - 1e-9 and dev <= 1e-12 and secs < 30
    record(1, ok, f"min loss {worst:.4f} over {total} matrices (need >= 1 - 1e-9); uniform dev {dev:.1e}; {secs:.1f}s")


# ---------------------------------------------------------------- 2


def test_c02_cosine_limit():
    t0 = time.perf_counter()
    a, b = (mc_cosine_expectation(1000, s, 2000, seed=42 + k) for k, s in enumerate((1.0, 10.0)))
    secs = time.perf_counter() - t0
    gap, se = abs(a.mean_cosine - b.mean_cosine), np.hypot(a.std_error, b.std_error)
    ok = (
        all(0.48 <= x.mean_cosine <= 0.52 for x in (a, b))
        and gap <= 2 * se
        and all(abs(x.var_ratio - 2) <= 0.1 and abs(x.cov_ratio - 1) <= 0.05 for x in (a, b))
        and secs < 60
    )
    record(
        2,
        ok,
        f"means {a.mean_cosine:.4f}/{b.mean_cosine:.4f}, gap {gap:.4f} vs 2SE {2 * se:.4f}, "
        f"var {a.var_ratio:.3f}/{b.var_ratio:.3f}, cov {a.cov_ratio:.3f}/{b.cov_ratio:.3f}; {secs:.1f}s",
    )


# ---------------------------------------------------------------- 3


def test_c03_full_model_gradient():
    t0 = time.perf_counter()
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, depth=2, heads=2, num_classes=5)
    model = replace_norms(init_params(cfg, 0), ReplacementPlan.all_but_first(cfg.num_norms), 3, seed=0)
    rng = np.random.default_rng(0)
    for _, slot in model.moe_slots:
        slot.expert_weight.values[:] = rng.normal(scale=0.2, size=slot.expert_weight.shape)
        slot.expert_bias.values[:] = rng.normal(scale=0.2, size=slot.expert_bias.shape)
    x = rng.uniform(size=(4, 8, 8, 3))
    params = list(model.trainable().values())

    def loss():
        out = forward(x, model)
        total = ad.mean(entropy(out.posteriors))
        for r in out.routing:
            total = total + r.loss * 0.1
        return total

    err = grad_check(loss, params)
    secs = time.perf_counter() - t0
    n = sum(p.values.size for p in params)
    record(3, err <= 1e-4 and secs < 60, f"max relative error {err:.2e} over {n} router/expert coordinates; {secs:.1f}s")


# ---------------------------------------------------------------- 4


def test_c04_zero_expert_identity(source_run):
    _, source, _, _ = source_run
    moe = replace_norms(source, ReplacementPlan.all_but_first(source.config.num_norms), 9, seed=42)
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(size=(8, 16, 16, 3))
        worst = max(worst, np.abs(forward(x, moe).posteriors.values - forward(x, source).posteriors.values).max())
    record(4, worst <= 1e-12, f"max |diff| {worst:.1e} over 100 random batches")


# ---------------------------------------------------------------- 5


def _router_grads(model, x):
    for _, slot in model.moe_slots:
        slot.router_weight.grad = slot.router_bias.grad = None
    with Tape() as tape:
        out = forward(x, model)
        tape.backward(ad.mean(entropy(out.posteriors)))
    norms = []
    for _, slot in model.moe_slots:
        g = [t.grad for t in (slot.router_weight, slot.router_bias) if t.grad is not None]
        norms.append(float(np.sqrt(sum((gi**2).sum() for gi in g))))
    return out, norms


def test_c05_gradient_preserving_trick(source_run):
    _, source, _, test = source_run
    cfg = AdaptationConfig(replacement="all-but-first")
    model = configure(source, cfg, seed=42)
    stream = compose_stream("classical-mixed", test, default_domains("classical-mixed"), 64, 2, 5)
    adapt_batch(stream.batches[0].images, model, AdaptationState(), cfg)  # warm-up makes deltas nonzero
    x = stream.batches[1].images
    on, with_trick = _router_grads(model, x)
    for _, slot in model.moe_slots:
        slot.grad_to_router = False
    off, literal = _router_grads(model, x)
    diff = np.abs(on.logits.values - off.logits.values).max()
    ok = diff <= 1e-15 and min(with_trick) > 0 and all(g == 0.0 for g in literal)
    record(5, ok, f"forward diff {diff:.1e}; router grad norms {min(with_trick):.2e}..{max(with_trick):.2e} -> {max(literal):.1f}")


# ---------------------------------------------------------------- 6


def test_c06_telescoping(source_run):
    _, source, _, test = source_run
    stream = compose_stream("classical-mixed", test, default_domains("classical-mixed"), 16, 50, 6)
    cfg = AdaptationConfig()
    m = adapt_stream(stream, source, cfg, seed=42)
    trace = m.entropy_trace
    thr = max(abs(r.threshold - np.mean(trace[: t + 1])) for t, r in enumerate(m.batches))
    alp = max(abs(r.alpha - cfg.lb_lambda * r.threshold) for r in m.batches)
    record(6, thr <= 1e-9 and alp <= 1e-9, f"max threshold gap {thr:.1e}, max alpha gap {alp:.1e} over 50 batches")


# ---------------------------------------------------------------- 7, 8


def _compare(cfg, source, test, strategies):
    out = {s: [] for s in strategies}
    for seed in SEEDS:
        stream = build_stream(cfg, test, seed)
        for s in strategies:
            out[s].append(run_strategy(cfg, source, stream, seed, strategy=s))
    return out


def test_c07_classical_mixed_gain(source_run):
    _, source, report, test = source_run
    cfg = desk_config("classical_mixed.json")
    assert cfg.stream.protocol == "classical-mixed" and cfg.stream.num_batches >= 100 and cfg.adapt.batch_size == 64
    t0 = time.perf_counter()
    runs = _compare(cfg, source, test, ("noadapt", "tent", "moetta"))
    secs = time.perf_counter() - t0
    acc = {s: float(np.mean([m.accuracy for m in ms])) for s, ms in runs.items()}
    quartile = []
    for m in runs["moetta"]:
        tr = m.entropy_trace
        q = len(tr) // 4
        quartile.append(np.mean(tr[-q:]) < np.mean(tr[:q]))
    gain = 100 * (acc["moetta"] - acc["noadapt"])
    ok = report.test_accuracy >= 0.90 and gain >= 3.0 and all(quartile) and secs < 900
    record(
        7,
        ok,
        f"clean {report.test_accuracy:.3f}; noadapt {acc['noadapt']:.4f}, tent {acc['tent']:.4f}, "
        f"moetta {acc['moetta']:.4f} ({gain:+.2f} pts, need +3); entropy falls {sum(quartile)}/3; {secs:.0f}s",
    )


def test_c08_potpourri_plus_forgetting(source_run):
    _, source, _, test = source_run
    cfg = desk_config("potpourri_plus.json")
    assert cfg.stream.protocol == "potpourri-plus"
    runs = _compare(cfg, source, test, ("noadapt", "moetta"))
    ident = {s: float(np.mean([m.accuracy_on("identity") for m in ms])) for s, ms in runs.items()}
    overall = {s: float(np.mean([m.accuracy for m in ms])) for s, ms in runs.items()}
    drop = 100 * (ident["noadapt"] - ident["moetta"])
    record(
        8,
        drop <= 2.0,
        f"ID accuracy noadapt {ident['noadapt']:.4f}, moetta {ident['moetta']:.4f} (drop {drop:.2f} pts, max 2); "
        f"overall {overall['noadapt']:.4f} -> {overall['moetta']:.4f}",
    )


# ---------------------------------------------------------------- 9


def test_c09_direction_cosines(source_run):
    _, source, _, test = source_run
    ops = ("gaussian-noise", "box-blur", "fog", "brightness", "contrast", "pixelate")
    domains = [DomainSpec(op, op, 5, i) for i, op in enumerate(ops)]
    res = accumulated_gradient_cosines(domains, source, test, AdaptationConfig(tent_learning_rate=1e-3), seed=42)
    m = res.matrix
    sym = np.abs(m - m.T).max()
    ok = not res.degenerate and sym <= 1e-12 and (np.diag(m) == 1.0).all() and res.lower_mean < 0.999
    record(9, ok, f"{len(ops)} domains; symmetric to {sym:.1e}; unit diagonal; lower-triangle mean {res.lower_mean:.4f}")


# ---------------------------------------------------------------- 10


TINY = {
    "seeds": [3, 4],
    "model": {"image_size": 8, "patch_size": 4, "embed_dim": 16, "depth": 1, "heads": 2, "num_classes": 3},
    "task": {"num_classes": 3, "image_size": 8, "train_per_class": 8, "test_per_class": 8},
    "pretrain": {"epochs": 2, "batch_size": 8},
    "adapt": {"batch_size": 8, "experts": 3, "learning_rate": 0.01},
    "stream": {"num_batches": 4},
}


def _run_all(base: Path, cfg: Path) -> None:
    c = str(cfg)
    assert main(["pretrain", "--config", c, "--out", str(base / "pre")]) == 0
    ck = str(base / "pre" / "checkpoint.json")
    for strat in ("noadapt", "tent", "moetta"):
        assert main(["adapt", "--config", c, "--checkpoint", ck, "--strategy", strat, "--embeddings", "--out", str(base / strat)]) == 0
    grid = base.parent / "grid.json"
    assert main(["sweep", "--config", c, "--checkpoint", ck, "--grid", str(grid), "--out", str(base / "sweep")]) == 0
    assert main(["verify-theory", "--trials", "10", "--cosine-trials", "100", "--out", str(base / "theory")]) == 0
    assert main(["analyze", "--run", str(base / "moetta"), "--out", str(base / "analysis")]) == 0


def test_c10_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    (tmp_path / "grid.json").write_text(json.dumps({"experts": [2, 3], "lambda": [0.0, 0.5]}))
    _run_all(tmp_path / "a", cfg)
    _run_all(tmp_path / "b", cfg)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    missing = [str(p.relative_to(tmp_path / "b")) for p in (tmp_path / "b").rglob("*.csv") if p.relative_to(tmp_path / "b") not in files]
    record(10, len(files) > 10 and not differ and not missing, f"{len(files)} CSV files compared; {len(differ)} differ")
