"""Run configuration: JSON file plus ``key=value`` overrides, strictly validated."""
from __future__ import annotations

import difflib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .bench import ConfigError, TaskSpec
from .tta import AdaptationConfig
from .vit import ViTConfig

log = logging.getLogger(__name__)

DEFAULT_SEED = 42


@dataclass
class PretrainConfig:
    epochs: int = 20
    learning_rate: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    augment: float = 0.0
    label_smoothing: float = 0.0
    task_seed: int = 0
    # source weights and batch order, fixed apart from the run seeds so every
    # run seed adapts the same source; None falls back to seeds[0]
    init_seed: int | None = 1

    def source_seed(self, seeds: list[int]) -> int:
        return seeds[0] if self.init_seed is None else self.init_seed


@dataclass
class StreamConfig:
    protocol: str = "classical-mixed"
    operator: str = "gaussian-noise"  # only read by the single protocol
    severity: int = 5
    num_batches: int = 100
    domain_seed: int = 0


@dataclass
class RunConfig:
    seeds: list[int] = field(default_factory=lambda: [DEFAULT_SEED])
    checkpoint: str | None = None
    model: ViTConfig = field(default_factory=ViTConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptationConfig = field(default_factory=AdaptationConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {
    "model": ViTConfig,
    "task": TaskSpec,
    "pretrain": PretrainConfig,
    "adapt": AdaptationConfig,
    "stream": StreamConfig,
}
TOP_LEVEL = ("seeds", "checkpoint")
# bare override keys that differ from field names
ALIASES = {"lambda": "adapt.lb_lambda", "experts": "adapt.experts", "strategy": "adapt.strategy"}


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def _all_keys() -> list[str]:
    keys = list(TOP_LEVEL)
    for sec, cls in SECTIONS.items():
        keys += [f"{sec}.{n}" for n in _field_names(cls)]
    return keys


def _unknown(key: str, candidates: list[str]) -> ConfigError:
    bare = sorted({c.rsplit(".", 1)[-1] for c in candidates} | set(candidates))
    hint = difflib.get_close_matches(key.rsplit(".", 1)[-1], bare, n=1)
    msg = f"unknown config key {key!r}"
    if hint:
        msg += f"; did you mean {hint[0]!r}?"
    return ConfigError(msg)


def _resolve_key(key: str) -> str:
    if key in ALIASES:
        return ALIASES[key]
    if key in TOP_LEVEL or key in _all_keys():
        return key
    matches = [k for k in _all_keys() if k.rsplit(".", 1)[-1] == key]
    if len(matches) == 1:
        return matches[0]
    if len(matches) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of {', '.join(matches)}")
    raise _unknown(key, _all_keys())


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _build(doc: dict) -> RunConfig:
    for key in doc:
        if key not in TOP_LEVEL and key not in SECTIONS:
            raise _unknown(key, list(TOP_LEVEL) + list(SECTIONS))
    kwargs: dict[str, Any] = {k: doc[k] for k in TOP_LEVEL if k in doc}
    for sec, cls in SECTIONS.items():
        body = doc.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: expected an object")
        names = _field_names(cls)
        for k in body:
            if k not in names:
                raise _unknown(f"{sec}.{k}", [f"{sec}.{n}" for n in names])
        try:
            kwargs[sec] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{sec}: {exc}") from exc
    seeds = kwargs.get("seeds", [DEFAULT_SEED])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of integers")
    kwargs["seeds"] = list(seeds)
    return RunConfig(**kwargs)


def parse_config(path: str | Path | None, overrides: list[str] | None = None, out_dir: str | Path | None = None) -> RunConfig:
    """Load, override, validate and (optionally) echo to ``out_dir/run_config.json``."""
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: malformed JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: top level must be an object")
    explicit_seed = "seeds" in doc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        full = _resolve_key(key.strip())
        value = _coerce(text)
        if "." in full:
            sec, name = full.split(".", 1)
            doc.setdefault(sec, {})[name] = value
        else:
            doc[full] = value
            explicit_seed = explicit_seed or full == "seeds"
    cfg = _build(doc)
    if not explicit_seed:
        log.info("no seed given; using seed %d", DEFAULT_SEED)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return cfg


def config_from_dict(doc: dict) -> RunConfig:
    return _build(doc)
