"""Synthetic source task, corruption operators and mixed-shift stream composers.

Binary sample container (all little-endian)::

    magic      8 bytes   b"MTTASTRM"
    version    uint32    1
    count      uint32    number of records
    height     uint32
    width      uint32
    channels   uint32
    num_tags   uint32
    tags       num_tags x (uint16 byte length, utf-8 bytes)
    records    count x (uint32 sample_id, int32 label, uint16 tag index,
                        float32[height*width*channels] image, row-major HWC)
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tta import AdaptationState, sgd_momentum_step
from .vit import ViTParams, forward, init_params, predict

log = logging.getLogger(__name__)

PROTOCOLS = ("single", "classical-mixed", "potpourri", "potpourri-plus")
CLASSICAL_OPERATORS = (
    "gaussian-noise",
    "shot-noise",
    "box-blur",
    "motion-blur",
    "fog",
    "brightness",
    "contrast",
    "pixelate",
)
POTPOURRI_EXTRA = ("invert-sketch", "occlusion", "color-shift")
CONTAINER_MAGIC = b"MTTASTRM"


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=1)
def severity_grids() -> dict:
    text = resources.files("moetta").joinpath("severity_grids.json").read_text()
    return json.loads(text)


OPERATORS = tuple(severity_grids()["grids"])


@dataclass(frozen=True)
class TaskSpec:
    num_classes: int = 10
    image_size: int = 16
    channels: int = 3
    train_per_class: int = 200
    test_per_class: int = 100
    prototype_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


@dataclass(frozen=True)
class DomainSpec:
    tag: str
    operator: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown operator {self.operator!r}; known: {', '.join(OPERATORS)}")
        if not 1 <= self.severity <= 5:
            raise ConfigError(f"severity {self.severity} outside 1..5")

    @property
    def magnitude(self) -> float:
        return severity_grids()["grids"][self.operator][self.severity - 1]


@dataclass
class Dataset:
    images: np.ndarray  # (n, S, S, C)
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class StreamBatch:
    images: np.ndarray
    labels: np.ndarray
    domains: list[str]
    sample_ids: np.ndarray


@dataclass
class ShiftStream:
    protocol: str
    batches: list[StreamBatch]
    manifest: dict = field(default_factory=dict)

    @property
    def num_samples(self) -> int:
        return sum(len(b.labels) for b in self.batches)

    def domain_tags(self) -> list[str]:
        return [t for b in self.batches for t in b.domains]


# ---------------------------------------------------------------- source task


def _prototypes(spec: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.prototype_seed, 7])
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    protos = np.zeros((spec.num_classes, s, s, spec.channels))
    for k in range(spec.num_classes):
        for c in range(spec.channels):
            for _ in range(3):
                fx, fy = rng.uniform(0.3, 2.0, size=2) * rng.choice([-1, 1], size=2)
                phase = rng.uniform(0, 2 * np.pi)
                protos[k, :, :, c] += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * (fx * xx + fy * yy) / s + phase)
        protos[k] /= np.abs(protos[k]).max()
    return protos


def _render(proto: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    amp = rng.uniform(0.7, 1.3)
    shift = rng.integers(-1, 2, size=2)
    img = np.roll(proto, tuple(shift), axis=(0, 1))
    img = 0.5 + 0.3 * amp * img + rng.normal(0.0, 0.04, size=proto.shape)
    return np.clip(img, 0.0, 1.0)


def generate_task(spec: TaskSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Train and test splits; each sample has its own RNG stream keyed by split and index."""
    protos = _prototypes(spec)

    def split(tag: int, per_class: int) -> Dataset:
        n = per_class * spec.num_classes
        labels = np.repeat(np.arange(spec.num_classes), per_class)
        order = np.random.default_rng([seed, tag, 99]).permutation(n)
        labels = labels[order]
        images = np.stack([_render(protos[y], np.random.default_rng([seed, tag, i])) for i, y in enumerate(labels)])
        return Dataset(images.astype(np.float32).astype(float), labels)

    return split(0, spec.train_per_class), split(1, spec.test_per_class)


# ---------------------------------------------------------------- corruptions


def _box(img: np.ndarray, wy: int, wx: int) -> np.ndarray:
    out = img
    for axis, w in ((0, wy), (1, wx)):
        if w <= 1:
            continue
        lo = (w - 1) // 2
        pad = [(0, 0)] * img.ndim
        pad[axis] = (lo, w - 1 - lo)
        padded = np.pad(out, pad, mode="edge")
        c = np.cumsum(padded, axis=axis)
        c = np.concatenate([np.zeros_like(np.take(c, [0], axis=axis)), c], axis=axis)
        n = out.shape[axis]
        out = (np.take(c, np.arange(w, w + n), axis=axis) - np.take(c, np.arange(n), axis=axis)) / w
    return out


def _smooth_field(shape, rng: np.random.Generator) -> np.ndarray:
    s = shape[0]
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    f = np.zeros((s, s))
    for _ in range(2):
        fx, fy = rng.uniform(0.2, 1.0, size=2)
        f += np.sin(2 * np.pi * (fx * xx + fy * yy) / s + rng.uniform(0, 2 * np.pi))
    f = (f - f.min()) / (np.ptp(f) + 1e-12)
    return np.repeat(f[:, :, None], shape[2], axis=2)


def apply_domain(image: np.ndarray, domain: DomainSpec, index: int = 0) -> np.ndarray:
    """Corrupt one (S, S, C) image in [0, 1]; deterministic in (domain.seed, index)."""
    x = np.asarray(image, dtype=float)
    m = domain.magnitude
    rng = np.random.default_rng([domain.seed, index])
    op = domain.operator
    if op == "identity":
        out = x.copy()
    elif op == "gaussian-noise":
        out = x + rng.normal(0.0, m, size=x.shape)
    elif op == "shot-noise":
        out = rng.poisson(x * m) / m
    elif op == "box-blur":
        out = _box(x, int(m), int(m))
    elif op == "motion-blur":
        out = _box(x, 1, int(m))
    elif op == "fog":
        out = (1 - m) * x + m * _smooth_field(x.shape, rng)
    elif op == "brightness":
        out = x + m
    elif op == "contrast":
        mu = x.mean()
        out = (x - mu) * m + mu
    elif op == "pixelate":
        b = int(m)
        idx = (np.arange(x.shape[0]) // b) * b
        out = x[idx][:, idx]
    elif op == "invert-sketch":
        gray = x.mean(axis=2)
        gy, gx = np.gradient(gray)
        edges = np.sqrt(gx**2 + gy**2)
        sketch = 1.0 - edges / (edges.max() + 1e-12)
        out = (1 - m) * x + m * sketch[:, :, None]
    elif op == "occlusion":
        out = x.copy()
        s = x.shape[0]
        for _ in range(int(m)):
            r, c = rng.integers(0, s - 4, size=2)
            out[r : r + 5, c : c + 5] = 0.5
    elif op == "color-shift":
        out = (1 - m) * x + m * np.roll(x, 1, axis=2)
    else:  # pragma: no cover - DomainSpec validates
        raise ConfigError(f"unknown operator {op!r}")
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- streams


def default_domains(protocol: str, severity: int = 5, seed: int = 0) -> list[DomainSpec]:
    if protocol == "classical-mixed":
        ops = CLASSICAL_OPERATORS
    elif protocol == "potpourri":
        ops = CLASSICAL_OPERATORS + POTPOURRI_EXTRA
    elif protocol == "potpourri-plus":
        ops = CLASSICAL_OPERATORS + POTPOURRI_EXTRA + ("identity",)
    else:
        raise ConfigError(f"no default pool for protocol {protocol!r}")
    return [DomainSpec(op, op, severity, seed * 1000 + i) for i, op in enumerate(ops)]


def _check_pool(protocol: str, domains: list[DomainSpec]) -> None:
    if not domains:
        raise ConfigError("empty domain pool")
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}")
    ops = {d.operator for d in domains}
    if protocol == "classical-mixed" and not ops <= set(CLASSICAL_OPERATORS):
        raise ConfigError("classical-mixed takes corruption operators only")
    if protocol == "potpourri" and ("identity" in ops or not ops & set(POTPOURRI_EXTRA)):
        raise ConfigError("potpourri needs rendition/hard domains and no identity domain")
    if protocol == "potpourri-plus" and "identity" not in ops:
        raise ConfigError("potpourri-plus needs an identity domain")
    if len({d.tag for d in domains}) != len(domains):
        raise ConfigError("duplicate domain tags")


def compose_stream(
    protocol: str,
    test: Dataset,
    domains: list[DomainSpec],
    batch_size: int,
    num_batches: int,
    seed: int,
) -> ShiftStream:
    """Each sample independently draws a test image and a domain from the pool."""
    _check_pool(protocol, domains)
    if protocol == "single" and len(domains) != 1:
        raise ConfigError("single protocol takes exactly one domain")
    rng = np.random.default_rng([seed, 31])
    n = batch_size * num_batches
    order = np.concatenate([rng.permutation(len(test)) for _ in range(-(-n // len(test)))])[:n]
    which = rng.integers(0, len(domains), size=n)
    batches = []
    for b in range(num_batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        ids = np.arange(sl.start, sl.stop)
        imgs = np.stack([apply_domain(test.images[order[i]], domains[which[i]], int(i)) for i in ids])
        batches.append(
            StreamBatch(
                images=imgs.astype(np.float32).astype(float),
                labels=test.labels[order[sl]].copy(),
                domains=[domains[j].tag for j in which[sl]],
                sample_ids=ids,
            )
        )
    return ShiftStream(protocol, batches)


def stream_manifest(
    protocol: str,
    task: TaskSpec,
    task_seed: int,
    domains: list[DomainSpec],
    batch_size: int,
    num_batches: int,
    seed: int,
) -> dict:
    return {
        "format": "moetta-stream",
        "version": 1,
        "protocol": protocol,
        "seed": seed,
        "task": asdict(task),
        "task_seed": task_seed,
        "batch_size": batch_size,
        "num_batches": num_batches,
        "domains": [asdict(d) for d in domains],
        "severity_grids": severity_grids(),
    }


def stream_from_manifest(manifest: dict) -> ShiftStream:
    if manifest.get("format") != "moetta-stream":
        raise ConfigError("not a moetta stream manifest")
    task = TaskSpec(**manifest["task"])
    _, test = generate_task(task, manifest["task_seed"])
    domains = [DomainSpec(**d) for d in manifest["domains"]]
    stream = compose_stream(
        manifest["protocol"], test, domains, manifest["batch_size"], manifest["num_batches"], manifest["seed"]
    )
    stream.manifest = manifest
    return stream


def write_container(stream: ShiftStream, path: str | Path) -> None:
    first = stream.batches[0].images
    _, h, w, c = first.shape
    tags = sorted(set(stream.domain_tags()))
    tag_index = {t: i for i, t in enumerate(tags)}
    rec = np.dtype([("id", "<u4"), ("label", "<i4"), ("tag", "<u2"), ("image", "<f4", (h * w * c,))])
    records = np.zeros(stream.num_samples, dtype=rec)
    k = 0
    for b in stream.batches:
        n = len(b.labels)
        records["id"][k : k + n] = b.sample_ids
        records["label"][k : k + n] = b.labels
        records["tag"][k : k + n] = [tag_index[t] for t in b.domains]
        records["image"][k : k + n] = b.images.reshape(n, -1)
        k += n
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<6I", 1, len(records), h, w, c, len(tags)))
        for t in tags:
            raw = t.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(records.tobytes())


def read_container(path: str | Path, batch_size: int, protocol: str = "single") -> ShiftStream:
    data = Path(path).read_bytes()
    if data[:8] != CONTAINER_MAGIC:
        raise ConfigError(f"{path}: bad container magic")
    version, count, h, w, c, ntags = struct.unpack_from("<6I", data, 8)
    if version != 1:
        raise ConfigError(f"{path}: unsupported container version {version}")
    off = 8 + 24
    tags = []
    for _ in range(ntags):
        (n,) = struct.unpack_from("<H", data, off)
        tags.append(data[off + 2 : off + 2 + n].decode())
        off += 2 + n
    rec = np.dtype([("id", "<u4"), ("label", "<i4"), ("tag", "<u2"), ("image", "<f4", (h * w * c,))])
    records = np.frombuffer(data, dtype=rec, count=count, offset=off)
    batches = []
    for start in range(0, count, batch_size):
        r = records[start : start + batch_size]
        batches.append(
            StreamBatch(
                images=r["image"].astype(float).reshape(len(r), h, w, c),
                labels=r["label"].astype(int),
                domains=[tags[i] for i in r["tag"]],
                sample_ids=r["id"].astype(int),
            )
        )
    return ShiftStream(protocol, batches)


def save_stream(stream: ShiftStream, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(stream.manifest, container="samples.bin")
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    write_container(stream, d / "samples.bin")
    return d / "manifest.json"


def load_stream(manifest_path: str | Path) -> ShiftStream:
    """Load from the container next to the manifest, or recompose from seeds."""
    path = Path(manifest_path)
    manifest = json.loads(path.read_text())
    container = manifest.get("container")
    if container and (path.parent / container).exists():
        stream = read_container(path.parent / container, manifest["batch_size"], manifest["protocol"])
        stream.manifest = manifest
        return stream
    return stream_from_manifest(manifest)


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainReport:
    epoch_loss: list[float]
    train_accuracy: list[float]
    test_accuracy: float


def photometric_jitter(images: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    n = len(images)
    mu = images.mean(axis=(1, 2, 3), keepdims=True)
    contrast = rng.uniform(1 - 0.5 * strength, 1 + 0.5 * strength, size=(n, 1, 1, 1))
    offset = rng.uniform(-0.2 * strength, 0.2 * strength, size=(n, 1, 1, 1))
    sigma = rng.uniform(0, 0.1 * strength, size=(n, 1, 1, 1))
    out = (images - mu) * contrast + mu + offset + sigma * rng.normal(size=images.shape)
    return np.clip(out, 0.0, 1.0)


def cross_entropy(logits: ad.Tensor, labels: np.ndarray, smoothing: float = 0.0) -> ad.Tensor:
    lp = ad.log_softmax(logits, axis=-1)
    k = logits.shape[-1]
    target = np.full(logits.shape, smoothing / k)
    target[np.arange(len(labels)), labels] += 1.0 - smoothing
    return ad.sum(lp * target) * (-1.0 / len(labels))


def pretrain(
    params: ViTParams,
    train: Dataset,
    epochs: int,
    learning_rate: float,
    seed: int,
    batch_size: int = 64,
    momentum: float = 0.9,
    test: Dataset | None = None,
    augment: float = 0.0,
    label_smoothing: float = 0.0,
) -> tuple[ViTParams, PretrainReport]:
    """Cross-entropy SGD with momentum, one warmup epoch and cosine decay.

    ``augment`` > 0 enables photometric jitter (contrast, brightness, noise)
    whose strength scales with the value.
    """
    model = params.copy()
    named = model.named_tensors()
    for t in named.values():
        t.requires_grad = True
    state = AdaptationState()
    rng = np.random.default_rng([seed, 5])
    steps_per_epoch = -(-len(train) // batch_size)
    total = max(1, epochs * steps_per_epoch)
    warmup = steps_per_epoch if epochs > 1 else 0
    step = 0
    losses, accs = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        ep_loss, ep_correct = 0.0, 0
        for start in range(0, len(train), batch_size):
            idx = order[start : start + batch_size]
            warm = min(1.0, (step + 1) / warmup) if warmup else 1.0
            lr = warm * learning_rate * 0.5 * (1 + np.cos(np.pi * step / total))
            images = train.images[idx]
            if augment > 0:
                images = photometric_jitter(images, augment, rng)
            with ad.Tape() as tape:
                out = forward(images, model)
                loss = cross_entropy(out.logits, train.labels[idx], label_smoothing)
                if not np.isfinite(loss.item()):
                    raise ad.NumericError(f"pretraining diverged at epoch {epoch}, step {step}: loss={loss.item()}")
                tape.backward(loss)
            sgd_momentum_step(named, state, lr, momentum)
            ep_loss += loss.item() * len(idx)
            ep_correct += int((out.logits.values.argmax(1) == train.labels[idx]).sum())
            step += 1
        losses.append(ep_loss / len(train))
        accs.append(ep_correct / len(train))
        log.info("epoch %d loss %.4f train acc %.4f", epoch, losses[-1], accs[-1])
    model.freeze()
    test_acc = float(np.mean(predict(model, test.images) == test.labels)) if test is not None else float("nan")
    return model, PretrainReport(losses, accs, test_acc)


def build_source_model(config, task: TaskSpec, task_seed: int, epochs: int, learning_rate: float, seed: int):
    train, test = generate_task(task, task_seed)
    return pretrain(init_params(config, seed), train, epochs, learning_rate, seed, test=test)
