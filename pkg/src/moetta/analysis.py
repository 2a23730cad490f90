"""Expert-diversity snapshots, routing traces, sweeps and embedding export."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, replace

import numpy as np

from .vit import ViTParams

UNDEFINED = "undefined"


@dataclass
class ExpertSimilaritySnapshot:
    batch_index: int
    layer: int
    weight_cos: np.ndarray  # (E, E), nan where a vector is zero
    bias_cos: np.ndarray

    @property
    def mean_weight(self) -> float:
        return _offdiag_mean(self.weight_cos)

    @property
    def mean_bias(self) -> float:
        return _offdiag_mean(self.bias_cos)


def _offdiag_mean(m: np.ndarray) -> float:
    vals = m[~np.eye(len(m), dtype=bool)]
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if vals.size else float("nan")


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosines of rows; rows with zero norm give nan (undefined) entries."""
    v = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(v, axis=1)
    ok = norms > 0
    out = np.full((len(v), len(v)), np.nan)
    unit = v[ok] / norms[ok, None]
    sub = np.clip(unit @ unit.T, -1.0, 1.0)
    sub = 0.5 * (sub + sub.T)
    np.fill_diagonal(sub, 1.0)
    out[np.ix_(ok, ok)] = sub
    return out


def expert_cosine_snapshot(model: ViTParams, t: int) -> list[ExpertSimilaritySnapshot]:
    return [
        ExpertSimilaritySnapshot(t, j, cosine_matrix(s.expert_weight.values), cosine_matrix(s.expert_bias.values))
        for j, s in model.moe_slots
    ]


def _fmt(x: float) -> str:
    return UNDEFINED if not np.isfinite(x) else repr(float(x))


def expert_similarity_csv(snapshots) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "layer", "pair_i", "pair_j", "cos_weight", "cos_bias"])
    for snap in itertools.chain.from_iterable(snapshots):
        e = len(snap.weight_cos)
        for i in range(e):
            for j in range(i + 1, e):
                w.writerow([snap.batch_index, snap.layer, i, j, _fmt(snap.weight_cos[i, j]), _fmt(snap.bias_cos[i, j])])
    return buf.getvalue()


def layer_similarity_series(snapshots) -> dict[int, list[tuple[float, float]]]:
    """Per layer: list over batches of (mean weight cosine, mean bias cosine)."""
    series: dict[int, list[tuple[float, float]]] = {}
    for snap in itertools.chain.from_iterable(snapshots):
        series.setdefault(snap.layer, []).append((snap.mean_weight, snap.mean_bias))
    return series


def routing_trace(metrics, layers: list[int] | None = None) -> list[tuple[int, int, int, float, float]]:
    """Rows (batch, layer, expert, F, P) from a completed MoETTA run."""
    if layers is None:
        layers = [j for j, _ in metrics.model.moe_slots] if metrics.model is not None else None
    rows = []
    for b, per_layer in enumerate(metrics.routing):
        for li, (frac, prob) in enumerate(per_layer):
            layer = layers[li] if layers else li
            for e in range(len(frac)):
                rows.append((b, layer, e, float(frac[e]), float(prob[e])))
    return rows


def routing_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["batch", "layer", "expert", "F", "P"])
    for b, layer, e, f, p in rows:
        w.writerow([b, layer, e, repr(f), repr(p)])
    return buf.getvalue()


def mean_load_deviation(metrics) -> float:
    """Max |F_i - 1/E| of the time-averaged assignment fractions, averaged over layers."""
    fr = np.array([[f for f, _ in per_layer] for per_layer in metrics.routing])  # (T, layers, E)
    avg = fr.mean(axis=0)
    return float(np.abs(avg - 1.0 / avg.shape[-1]).max(axis=-1).mean())


def embeddings_csv(metrics, sample_ids=None) -> str:
    emb = metrics.embeddings
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "domain_tag"] + [f"dim_{i}" for i in range(emb.shape[1])])
    ids = np.arange(len(emb)) if sample_ids is None else sample_ids
    for i, tag, row in zip(ids, metrics.domains, emb):
        w.writerow([int(i), tag] + [repr(float(v)) for v in row])
    return buf.getvalue()


@dataclass
class SweepRow:
    experts: int
    lb_lambda: float
    seed: int
    accuracy: float


def sweep(grid: list[tuple[int, float]], stream_for_seed, params: ViTParams, config, seeds) -> list[SweepRow]:
    """Run MoETTA for each (experts, lambda) cell and seed.

    ``stream_for_seed(seed)`` returns the stream to adapt on.
    """
    from .tta import adapt_stream

    rows = []
    streams = {s: stream_for_seed(s) for s in seeds}
    for experts, lam in grid:
        cell = replace(config, experts=int(experts), lb_lambda=float(lam), strategy="moetta")
        for s in seeds:
            m = adapt_stream(streams[s], params, cell, seed=s)
            rows.append(SweepRow(int(experts), float(lam), int(s), m.accuracy))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experts", "lambda", "seed", "accuracy"])
    for r in rows:
        w.writerow([r.experts, repr(r.lb_lambda), r.seed, repr(r.accuracy)])
    return buf.getvalue()


def sweep_summary_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experts", "lambda", "mean_accuracy", "sd_accuracy", "n"])
    cells: dict[tuple[int, float], list[float]] = {}
    for r in rows:
        cells.setdefault((r.experts, r.lb_lambda), []).append(r.accuracy)
    for (e, lam), accs in cells.items():
        sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        w.writerow([e, repr(lam), repr(float(np.mean(accs))), repr(sd), len(accs)])
    return buf.getvalue()
