"""Monte Carlo checks of the cosine-limit and load-balance-bound results, and
the accumulated-gradient cosine analysis on synthetic domains."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .moe_ln import load_balancing_value


@dataclass
class CosineExperiment:
    dim: int
    sigma: float
    trials: int
    seed: int
    mean_cosine: float = float("nan")
    std_error: float = float("nan")
    var_ratio: float = float("nan")  # Var(u_i) / sigma^2, expect 2
    cov_ratio: float = float("nan")  # Cov(u_i, v_i) / sigma^2, expect 1
    rho: float = float("nan")


def mc_cosine_expectation(dim: int, sigma: float, trials: int, seed: int) -> CosineExperiment:
    """Cosine between theta1 - theta and theta2 - theta for i.i.d. N(0, sigma^2 I) draws.

    Trial ``i`` draws from its own generator keyed by ``(seed, i)``.
    """
    if dim < 2 or sigma <= 0 or trials < 2:
        raise ValueError("need dim >= 2, sigma > 0, trials >= 2")
    cos = np.empty(trials)
    suu = svv = suv = 0.0
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        t1, t2, t0 = rng.normal(0.0, sigma, size=(3, dim))
        u, v = t1 - t0, t2 - t0
        cos[i] = u @ v / (np.linalg.norm(u) * np.linalg.norm(v))
        suu += u @ u
        svv += v @ v
        suv += u @ v
    n = trials * dim
    var_u, var_v, cov = suu / n, svv / n, suv / n  # the coordinates have known zero mean
    return CosineExperiment(
        dim=dim,
        sigma=sigma,
        trials=trials,
        seed=seed,
        mean_cosine=float(cos.mean()),
        std_error=float(cos.std(ddof=1) / np.sqrt(trials)),
        var_ratio=float(0.5 * (var_u + var_v) / sigma**2),
        cov_ratio=float(cov / sigma**2),
        rho=float(cov / np.sqrt(var_u * var_v)),
    )


@dataclass
class BoundCheck:
    experts: int
    batch: int
    trials: int
    min_loss: float
    uniform_loss: float
    min_selected: float  # min over trials of E * mean_x max_i p_i(x)


def lb_bound_check(experts: int, batch: int, trials: int, seed: int) -> BoundCheck:
    """Minimum top-1 balancing loss over Dirichlet(1) routing matrices."""
    if experts < 2 or batch < 1:
        raise ValueError("need experts >= 2 and batch >= 1")
    lo = sel = np.inf
    for i in range(trials):
        rng = np.random.default_rng([seed, experts, batch, i])
        probs = rng.dirichlet(np.ones(experts), size=batch)
        lo = min(lo, load_balancing_value(probs))
        sel = min(sel, experts * probs.max(axis=1).mean())
    uniform = load_balancing_value(np.full((batch, experts), 1.0 / experts))
    return BoundCheck(experts, batch, trials, float(lo), uniform, float(sel))


def two_expert_counterexample(batch: int = 4) -> tuple[np.ndarray, float]:
    """Routing matrix whose top-1 balancing loss is below 1.

    Three quarters of the batch sit just above the tie toward expert 0, the
    rest are certain about expert 1; the loss tends to 7/8 as the margin
    vanishes.  Cross-sample products F_i * P_i are what make this possible:
    the per-sample quantity E * mean max_i p_i(x) stays >= 1.
    """
    if batch % 4:
        raise ValueError("batch must be a multiple of 4")
    k = 3 * batch // 4
    probs = np.zeros((batch, 2))
    probs[:k] = [0.5 + 1e-9, 0.5 - 1e-9]
    probs[k:] = [0.0, 1.0]
    return probs, load_balancing_value(probs)


# ---------------------------------------------------------------- Fig. 1 analogue


@dataclass
class DirectionCosines:
    tags: list[str]
    matrix: np.ndarray
    degenerate: list[str] = field(default_factory=list)

    @property
    def lower_mean(self) -> float:
        il = np.tril_indices(len(self.tags), k=-1)
        vals = self.matrix[il]
        vals = vals[np.isfinite(vals)]
        return float(vals.mean()) if vals.size else float("nan")


def accumulated_gradient_cosines(domains, params, test, config, seed: int, batch_size: int = 64, num_batches: int = 20) -> DirectionCosines:
    """Tent-adapt a copy of ``params`` on each single-domain stream and compare displacements."""
    from .analysis import cosine_matrix
    from .bench import compose_stream
    from .tta import adapt_stream

    cfg = replace(config, strategy="tent")
    start = {k: t.values.copy() for k, t in params.named_tensors().items()}
    vecs, tags, degenerate = [], [], []
    for d in domains:
        stream = compose_stream("single", test, [d], batch_size, num_batches, seed)
        m = adapt_stream(stream, params, cfg, seed=seed)
        moved = m.model.trainable()
        vec = np.concatenate([moved[k].values.reshape(-1) - start[k].reshape(-1) for k in sorted(moved)])
        if not np.any(vec):
            degenerate.append(d.tag)
        vecs.append(vec)
        tags.append(d.tag)
    return DirectionCosines(tags, cosine_matrix(np.stack(vecs)), degenerate)


# ---------------------------------------------------------------- report


@dataclass
class Check:
    experiment: str
    criterion: str
    value: float
    tolerance: str
    passed: bool


def verify(trials_per_cell: int = 625, cosine_trials: int = 2000, seed: int = 42) -> tuple[list[tuple[str, str, float]], list[Check]]:
    """Run both proposition checks; returns (report rows, pass/fail checks)."""
    rows: list[tuple[str, str, float]] = []
    checks: list[Check] = []
    lows = []
    for e in (2, 4, 8, 16):
        for b in (1, 8, 64, 256):
            r = lb_bound_check(e, b, trials_per_cell, seed)
            rows.append(("lb_bound", f"E={e},B={b},min_loss", r.min_loss))
            rows.append(("lb_bound", f"E={e},B={b},uniform_loss", r.uniform_loss))
            lows.append(r)
            rows.append(("lb_bound", f"E={e},B={b},min_selected", r.min_selected))
    worst = min(r.min_loss for r in lows)
    checks.append(Check("lb_bound", "min loss >= 1 - 1e-9", worst, "1e-9", worst >= 1 - 1e-9))
    single = min(r.min_loss for r in lows if r.batch == 1)
    checks.append(Check("lb_bound", "B=1 min loss >= 1 - 1e-9", single, "1e-9", single >= 1 - 1e-9))
    sel = min(r.min_selected for r in lows)
    checks.append(Check("lb_bound", "E * mean top-1 prob >= 1 - 1e-9", sel, "1e-9", sel >= 1 - 1e-9))
    dev = max(abs(r.uniform_loss - 1.0) for r in lows)
    checks.append(Check("lb_bound", "uniform rows give 1", dev, "1e-12", dev <= 1e-12))
    _, cx = two_expert_counterexample()
    rows.append(("lb_bound", "counterexample,E=2,B=4,loss", cx))

    # each sigma gets its own stream so the independence check compares distinct draws
    exps = [mc_cosine_expectation(1000, s, cosine_trials, seed + k) for k, s in enumerate((1.0, 10.0))]
    for x in exps:
        for name in ("mean_cosine", "std_error", "var_ratio", "cov_ratio", "rho"):
            rows.append(("cosine", f"d={x.dim},sigma={x.sigma:g},{name}", getattr(x, name)))
        checks.append(Check("cosine", f"sigma={x.sigma:g} mean in [0.48, 0.52]", x.mean_cosine, "[0.48,0.52]", 0.48 <= x.mean_cosine <= 0.52))
        checks.append(Check("cosine", f"sigma={x.sigma:g} Var/sigma^2 ~ 2", x.var_ratio, "5%", abs(x.var_ratio - 2) <= 0.1))
        checks.append(Check("cosine", f"sigma={x.sigma:g} Cov/sigma^2 ~ 1", x.cov_ratio, "5%", abs(x.cov_ratio - 1) <= 0.05))
    a, b = exps
    gap = abs(a.mean_cosine - b.mean_cosine)
    se = np.hypot(a.std_error, b.std_error)
    checks.append(Check("cosine", "sigma independence", gap, "2 combined SE", gap <= 2 * se))
    small = mc_cosine_expectation(10, 1.0, cosine_trials, seed + 2)
    rows.append(("cosine", "d=10,sigma=1,mean_cosine", small.mean_cosine))
    excess = abs(a.mean_cosine - 0.5) - abs(small.mean_cosine - 0.5)
    se = np.hypot(a.std_error, small.std_error)
    checks.append(Check("cosine", "|mean - 1/2| at d=1000 <= at d=10", excess, "2 combined SE", excess <= 2 * se))
    return rows, checks


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "parameter", "value"])
    for exp, param, val in rows:
        w.writerow([exp, param, repr(float(val))])
    return buf.getvalue()


def summary_csv(checks: list[Check]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "criterion", "value", "tolerance", "passed"])
    for c in checks:
        w.writerow([c.experiment, c.criterion, repr(float(c.value)), c.tolerance, "pass" if c.passed else "fail"])
    return buf.getvalue()
