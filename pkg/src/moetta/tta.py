"""Test-time adaptation loop: MoETTA, Tent and the Noadapt control."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe_ln import LayerNormSlot, MoELayerNorm
from .vit import ForwardOutput, ReplacementPlan, ViTParams, forward, replace_norms

if TYPE_CHECKING:
    from .bench import ShiftStream

log = logging.getLogger(__name__)

STRATEGIES = ("moetta", "tent", "noadapt")


class DegenerateStreamError(ArithmeticError):
    pass


@dataclass
class AdaptationConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    lb_lambda: float = 0.2
    e0: float | None = None  # None -> 0.4 * ln K
    batch_size: int = 64
    experts: int = 9
    top_k: int = 1
    replacement: str | list = "all-but-first"
    strategy: str = "moetta"
    tent_learning_rate: float = 5e-4
    grad_to_router: bool = True

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.lb_lambda < 0:
            raise ValueError("lb_lambda must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.experts < 1:
            raise ValueError("experts must be >= 1")
        if not 1 <= self.top_k <= self.experts:
            raise ValueError("top_k must be in [1, experts]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")

    def entropy_constant(self, num_classes: int) -> float:
        return 0.4 * math.log(num_classes) if self.e0 is None else self.e0


@dataclass
class AdaptationState:
    t: int = 0
    batch_means: list[float] = field(default_factory=list)
    threshold: float = math.nan
    alpha: float = math.nan
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def running_mean(self) -> float:
        return float(np.mean(self.batch_means)) if self.batch_means else math.nan


@dataclass
class BatchResult:
    predictions: np.ndarray
    entropies: np.ndarray
    reliable: np.ndarray
    entropy_term: float
    lb_term: float
    updated: bool
    threshold: float = math.nan
    alpha: float = math.nan
    routing: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    cls_embedding: np.ndarray | None = None


# ---------------------------------------------------------------- loss pieces


def entropy(posteriors: Tensor) -> Tensor:
    """Per-row Shannon entropy in nats, with 0 ln 0 := 0."""
    if np.any(posteriors.values < 0):
        raise ValueError("entropy of negative probabilities")
    return ad.sum(ad.xlogx(posteriors), axis=-1) * -1.0


def _advance(state: AdaptationState, batch_mean: float) -> float:
    """Append a batch mean; returns the ratio new_avg / old_avg (nan at t=0)."""
    if batch_mean < 0:
        raise ValueError("batch mean entropy must be >= 0")
    if not state.batch_means:
        state.batch_means.append(batch_mean)
        return math.nan
    old = state.running_mean
    if old == 0:
        raise DegenerateStreamError(f"running mean entropy is zero before batch {len(state.batch_means)}")
    state.batch_means.append(batch_mean)
    return state.running_mean / old


def update_threshold(state: AdaptationState, ratio: float, batch_mean: float) -> float:
    state.threshold = batch_mean if math.isnan(ratio) else state.threshold * ratio
    return state.threshold


def update_alpha(state: AdaptationState, ratio: float, batch_mean: float, lb_lambda: float) -> float:
    state.alpha = lb_lambda * batch_mean if math.isnan(ratio) else state.alpha * ratio
    return state.alpha


def update_statistics(state: AdaptationState, batch_mean: float, lb_lambda: float) -> tuple[float, float]:
    ratio = _advance(state, batch_mean)
    return update_threshold(state, ratio, batch_mean), update_alpha(state, ratio, batch_mean, lb_lambda)


def total_loss(
    ent: Tensor,
    reliable: np.ndarray,
    lb_losses: list[Tensor],
    alpha: float,
    e0: float,
) -> tuple[Tensor, Tensor]:
    """Re-weighted entropy over reliable samples plus ``alpha`` times the balancing losses.

    Returns ``(total, entropy_term)``.
    """
    mask = ad.frozen(np.asarray(reliable, dtype=float))
    n = mask.sum()
    if n > 0:
        weight = ad.exp(ad.sub(e0, ad.detach(ent)))
        ent_term = ad.sum(weight * ent * mask) * (1.0 / n)
    else:
        ent_term = Tensor(0.0)
    lb = Tensor(0.0)
    for term in lb_losses:
        lb = lb + term
    return ent_term + lb * alpha, ent_term


def sgd_momentum_step(
    params: dict[str, Tensor],
    state: AdaptationState,
    learning_rate: float,
    momentum: float,
) -> None:
    """Heavy-ball SGD: ``v = mu*v + g``, ``theta -= lr*v``. Tensors without a grad are skipped."""
    for name, p in params.items():
        if p.grad is None:
            continue
        v = state.velocity.get(name)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        state.velocity[name] = v
        p.values -= learning_rate * v
        p.grad = None


# ---------------------------------------------------------------- model setup


def configure(params: ViTParams, config: AdaptationConfig, seed: int) -> ViTParams:
    """Fresh copy of a pretrained model set up for the given strategy."""
    if config.strategy == "moetta":
        plan = ReplacementPlan.from_spec(config.replacement, params.config.num_norms)
        model = replace_norms(params, plan, config.experts, seed, top_k=config.top_k)
        for _, slot in model.moe_slots:
            slot.grad_to_router = config.grad_to_router
        return model
    model = params.copy().freeze()
    if config.strategy == "tent":
        for slot in model.norms:
            if isinstance(slot, LayerNormSlot):
                slot.weight.requires_grad = True
                slot.bias.requires_grad = True
    return model


def _routing_stats(out: ForwardOutput) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(r.fraction.copy(), r.mean_prob.values.copy()) for r in out.routing]


def adapt_batch(
    images: np.ndarray,
    model: ViTParams,
    state: AdaptationState,
    config: AdaptationConfig,
) -> BatchResult:
    if config.strategy == "tent":
        return tent_step(images, model, state, config)
    if config.strategy == "noadapt":
        out = forward(images, model)
        ent = entropy(out.posteriors).values
        threshold, alpha = update_statistics(state, float(ent.mean()), config.lb_lambda)
        state.t += 1
        return BatchResult(
            predictions=out.posteriors.values.argmax(axis=1),
            entropies=ent,
            reliable=ent < threshold,
            entropy_term=0.0,
            lb_term=0.0,
            updated=False,
            threshold=threshold,
            alpha=alpha,
            cls_embedding=out.cls_embedding,
        )

    trainable = model.trainable()
    e0 = config.entropy_constant(model.config.num_classes)
    with ad.Tape() as tape:
        out = forward(images, model)
        preds = out.posteriors.values.argmax(axis=1)
        ent = entropy(out.posteriors)
        threshold, alpha = update_statistics(state, float(ent.values.mean()), config.lb_lambda)
        reliable = ent.values < threshold
        lb_losses = [r.loss for r in out.routing]
        loss, ent_term = total_loss(ent, reliable, lb_losses, alpha, e0)
        if not np.isfinite(loss.item()):
            raise ad.NumericError(f"non-finite loss at batch {state.t}")
        tape.backward(loss)
    sgd_momentum_step(trainable, state, config.learning_rate, config.momentum)
    lb_value = float(sum(t.item() for t in lb_losses))
    state.t += 1
    return BatchResult(
        predictions=preds,
        entropies=ent.values.copy(),
        reliable=reliable,
        entropy_term=ent_term.item(),
        lb_term=lb_value,
        updated=True,
        threshold=threshold,
        alpha=alpha,
        routing=_routing_stats(out),
        cls_embedding=out.cls_embedding,
    )


def tent_step(
    images: np.ndarray,
    model: ViTParams,
    state: AdaptationState,
    config: AdaptationConfig,
) -> BatchResult:
    """One SGD step on mean batch entropy over normalization affine parameters."""
    trainable = model.trainable()
    with ad.Tape() as tape:
        out = forward(images, model)
        preds = out.posteriors.values.argmax(axis=1)
        ent = entropy(out.posteriors)
        loss = ad.mean(ent)
        tape.backward(loss)
    threshold, alpha = update_statistics(state, float(ent.values.mean()), config.lb_lambda)
    sgd_momentum_step(trainable, state, config.tent_learning_rate, config.momentum)
    state.t += 1
    return BatchResult(
        predictions=preds,
        entropies=ent.values.copy(),
        reliable=np.ones(len(preds), dtype=bool),
        entropy_term=loss.item(),
        lb_term=0.0,
        updated=True,
        threshold=threshold,
        alpha=alpha,
        cls_embedding=out.cls_embedding,
    )


# ---------------------------------------------------------------- streams


@dataclass
class BatchRecord:
    batch_index: int
    domain_tag: str
    batch_accuracy: float
    mean_entropy: float
    threshold: float
    alpha: float
    lb_loss: float
    entropy_term: float


METRIC_COLUMNS = (
    "batch_index",
    "domain_tag",
    "batch_accuracy",
    "mean_entropy",
    "threshold",
    "alpha",
    "lb_loss",
    "entropy_term",
)


@dataclass
class Metrics:
    strategy: str
    seed: int
    accuracy: float
    domain_accuracy: dict[str, float]
    batches: list[BatchRecord]
    routing: list[list[tuple[np.ndarray, np.ndarray]]]
    predictions: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    expert_snapshots: list = field(default_factory=list)
    embeddings: np.ndarray | None = None
    model: ViTParams | None = None

    @property
    def entropy_trace(self) -> list[float]:
        return [b.mean_entropy for b in self.batches]

    def accuracy_on(self, tag: str) -> float:
        sel = self.domains == tag
        return float(np.mean(self.predictions[sel] == self.labels[sel])) if sel.any() else math.nan

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for b in self.batches:
            w.writerow([getattr(b, c) if isinstance(getattr(b, c), (int, str)) else repr(float(getattr(b, c))) for c in METRIC_COLUMNS])
        return buf.getvalue()


def batch_tag(tags) -> str:
    uniq = sorted(set(tags))
    return uniq[0] if len(uniq) == 1 else "mixed"


def adapt_stream(
    stream: "ShiftStream",
    params: ViTParams,
    config: AdaptationConfig,
    seed: int = 42,
    track_experts: bool = False,
    keep_embeddings: bool = False,
) -> Metrics:
    """Run one strategy over every batch of ``stream`` starting from ``params``."""
    from .analysis import expert_cosine_snapshot

    if len(stream.batches) == 0:
        raise ValueError("empty stream")
    model = configure(params, config, seed)
    state = AdaptationState()
    records, routing, preds, labels, domains, snaps, embs = [], [], [], [], [], [], []
    for i, batch in enumerate(stream.batches):
        try:
            res = adapt_batch(batch.images, model, state, config)
        except ArithmeticError as exc:
            raise ad.NumericError(f"batch {i}: {exc}") from exc
        correct = res.predictions == batch.labels
        records.append(
            BatchRecord(
                batch_index=i,
                domain_tag=batch_tag(batch.domains),
                batch_accuracy=float(correct.mean()),
                mean_entropy=float(res.entropies.mean()),
                threshold=res.threshold,
                alpha=res.alpha if config.strategy == "moetta" else 0.0,
                lb_loss=res.lb_term,
                entropy_term=res.entropy_term,
            )
        )
        routing.append(res.routing)
        preds.append(res.predictions)
        labels.append(batch.labels)
        domains.append(np.asarray(batch.domains))
        if keep_embeddings:
            embs.append(res.cls_embedding)
        if track_experts and model.moe_slots:
            snaps.append(expert_cosine_snapshot(model, i))
    preds_a, labels_a, domains_a = np.concatenate(preds), np.concatenate(labels), np.concatenate(domains)
    per_domain = {
        tag: float(np.mean(preds_a[domains_a == tag] == labels_a[domains_a == tag]))
        for tag in sorted(set(domains_a.tolist()))
    }
    return Metrics(
        strategy=config.strategy,
        seed=seed,
        accuracy=float(np.mean(preds_a == labels_a)),
        domain_accuracy=per_domain,
        batches=records,
        routing=routing,
        predictions=preds_a,
        labels=labels_a,
        domains=domains_a,
        expert_snapshots=snaps,
        embeddings=np.concatenate(embs) if embs else None,
        model=model,
    )
