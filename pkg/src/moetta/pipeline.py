"""Glue between a resolved RunConfig and the library: source model, streams, runs."""
from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .bench import (
    Dataset,
    DomainSpec,
    ShiftStream,
    compose_stream,
    default_domains,
    generate_task,
    pretrain,
    stream_manifest,
)
from .config import ConfigError, RunConfig
from .tta import Metrics, adapt_stream
from .vit import ViTParams, init_params, load_checkpoint


def load_task(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return generate_task(cfg.task, cfg.pretrain.task_seed)


def train_source(cfg: RunConfig, seed: int | None = None, train: Dataset | None = None, test: Dataset | None = None):
    if cfg.model.num_classes != cfg.task.num_classes:
        raise ConfigError("model.num_classes must equal task.num_classes")
    if train is None or test is None:
        train, test = load_task(cfg)
    p = cfg.pretrain
    seed = p.source_seed(cfg.seeds) if seed is None else seed
    return pretrain(
        init_params(cfg.model, seed),
        train,
        p.epochs,
        p.learning_rate,
        seed,
        batch_size=p.batch_size,
        momentum=p.momentum,
        test=test,
        augment=p.augment,
        label_smoothing=p.label_smoothing,
    )


def load_source(cfg: RunConfig, override: str | Path | None = None) -> ViTParams:
    path = override or cfg.checkpoint
    if not path:
        raise ConfigError("checkpoint: no source checkpoint given (set checkpoint=PATH or pass --checkpoint)")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint: file not found: {path}")
    model = load_checkpoint(path)
    if model.config.num_classes != cfg.task.num_classes:
        raise ConfigError(
            f"checkpoint has {model.config.num_classes} classes but task.num_classes is {cfg.task.num_classes}"
        )
    return model


def stream_domains(cfg: RunConfig) -> list[DomainSpec]:
    s = cfg.stream
    if s.protocol == "single":
        return [DomainSpec(s.operator, s.operator, s.severity, s.domain_seed * 1000)]
    return default_domains(s.protocol, s.severity, s.domain_seed)


def build_stream(cfg: RunConfig, test: Dataset, seed: int) -> ShiftStream:
    """Stream for one run seed; the manifest regenerates it exactly."""
    domains = stream_domains(cfg)
    b, n = cfg.adapt.batch_size, cfg.stream.num_batches
    stream = compose_stream(cfg.stream.protocol, test, domains, b, n, seed)
    stream.manifest = stream_manifest(cfg.stream.protocol, cfg.task, cfg.pretrain.task_seed, domains, b, n, seed)
    return stream


def run_strategy(
    cfg: RunConfig,
    source: ViTParams,
    stream: ShiftStream,
    seed: int,
    strategy: str | None = None,
    track_experts: bool = False,
    keep_embeddings: bool = False,
) -> Metrics:
    adapt = cfg.adapt if strategy is None else replace(cfg.adapt, strategy=strategy)
    return adapt_stream(stream, source, adapt, seed=seed, track_experts=track_experts, keep_embeddings=keep_embeddings)
