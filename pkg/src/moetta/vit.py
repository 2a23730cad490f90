"""Toy Vision Transformer with per-slot normalization (plain or MoE).

Parameter layout. Every weight is stored input-major so a layer is
``x @ W + b``. Checkpoint keys:

    vit/patch_embed/weight       (P*P*C, D)
    vit/cls_token                (D,)
    vit/pos_embed                (N+1, D)
    vit/block{i}/msa/wq|wk|wv|wo (D, D)   with .../bq|bk|bv|bo (D,)
    vit/block{i}/mlp/w1 (D, rD), b1, w2 (rD, D), b2
    vit/head/w1 (D, K), b1            [head_layers=1]
    vit/head/w1 (D, D), b1, w2 (D, K), b2   [head_layers=2]
    vit/norm{j}/weight|bias      plain slot j
    vit/norm{j}/moe/{weight,bias,expert_weight,expert_bias,router_weight,router_bias}

Norm slots are numbered 0..2L: slot 2i precedes MSA in block i, slot 2i+1
precedes the MLP, slot 2L is the final norm before the head.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moe_ln import (
    LayerNormSlot,
    MoELayerNorm,
    RoutingResult,
    init_moe_layer,
    layernorm_forward,
    moe_layernorm_forward,
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    channels: int = 3
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10
    head_layers: int = 1
    ln_eps: float = 1e-5
    # pixels enter as (x - mean) / std; centering trains faster but leaves a
    # model that never saw the offset direction, and entropy TTA stops helping
    pixel_mean: float = 0.0
    pixel_std: float = 1.0

    def __post_init__(self) -> None:
        for name in ("image_size", "channels", "patch_size", "embed_dim", "depth", "heads", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.head_layers not in (1, 2):
            raise ValueError("head_layers must be 1 or 2")
        if self.pixel_std <= 0:
            raise ValueError("pixel_std must be > 0")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def num_norms(self) -> int:
        return 2 * self.depth + 1


@dataclass
class ViTParams:
    config: ViTConfig
    tensors: dict[str, Tensor]
    norms: list[LayerNormSlot | MoELayerNorm]

    def named_tensors(self) -> dict[str, Tensor]:
        out = dict(self.tensors)
        for j, slot in enumerate(self.norms):
            prefix = f"vit/norm{j}/moe/" if isinstance(slot, MoELayerNorm) else f"vit/norm{j}/"
            for k, t in slot.tensors().items():
                out[prefix + k] = t
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.named_tensors().items() if t.requires_grad}

    @property
    def moe_slots(self) -> list[tuple[int, MoELayerNorm]]:
        return [(j, s) for j, s in enumerate(self.norms) if isinstance(s, MoELayerNorm)]

    def copy(self) -> "ViTParams":
        return copy.deepcopy(self)

    def freeze(self) -> "ViTParams":
        for t in self.named_tensors().values():
            t.requires_grad = False
            t.grad = None
        return self


@dataclass
class ReplacementPlan:
    replace: tuple[bool, ...]

    @property
    def count(self) -> int:
        return int(sum(self.replace))

    @classmethod
    def all_but_first(cls, num_norms: int) -> "ReplacementPlan":
        return cls(tuple(j > 0 for j in range(num_norms)))

    @classmethod
    def freeze_first(cls, num_norms: int, k: int) -> "ReplacementPlan":
        """Keep slots 0..k-1 plain, replace the rest."""
        return cls(tuple(j >= k for j in range(num_norms)))

    @classmethod
    def from_spec(cls, spec: str | list, num_norms: int) -> "ReplacementPlan":
        if isinstance(spec, list):
            if len(spec) != num_norms:
                raise ValueError(f"replacement list has {len(spec)} entries, need {num_norms}")
            return cls(tuple(bool(v) for v in spec))
        if spec == "all-but-first":
            return cls.all_but_first(num_norms)
        if spec == "all":
            return cls(tuple(True for _ in range(num_norms)))
        if spec.startswith("freeze-first-"):
            return cls.freeze_first(num_norms, int(spec.rsplit("-", 1)[1]))
        raise ValueError(f"unknown replacement plan {spec!r}")


def init_params(config: ViTConfig, seed: int) -> ViTParams:
    rng = np.random.default_rng(seed)
    d, c, p = config.embed_dim, config.channels, config.patch_size
    hidden = config.mlp_ratio * d

    def dense(n_in, n_out):
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

    t: dict[str, np.ndarray] = {
        "vit/patch_embed/weight": dense(p * p * c, d),
        "vit/cls_token": rng.normal(0.0, 0.02, size=d),
        "vit/pos_embed": rng.normal(0.0, 0.02, size=(config.seq_len, d)),
    }
    for i in range(config.depth):
        for name in ("wq", "wk", "wv", "wo"):
            t[f"vit/block{i}/msa/{name}"] = dense(d, d)
            t[f"vit/block{i}/msa/b{name[1]}"] = np.zeros(d)
        t[f"vit/block{i}/mlp/w1"] = dense(d, hidden)
        t[f"vit/block{i}/mlp/b1"] = np.zeros(hidden)
        t[f"vit/block{i}/mlp/w2"] = dense(hidden, d)
        t[f"vit/block{i}/mlp/b2"] = np.zeros(d)
    if config.head_layers == 1:
        t["vit/head/w1"] = dense(d, config.num_classes)
        t["vit/head/b1"] = np.zeros(config.num_classes)
    else:
        t["vit/head/w1"] = dense(d, d)
        t["vit/head/b1"] = np.zeros(d)
        t["vit/head/w2"] = dense(d, config.num_classes)
        t["vit/head/b2"] = np.zeros(config.num_classes)
    norms = [
        LayerNormSlot(Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=config.ln_eps)
        for _ in range(config.num_norms)
    ]
    return ViTParams(config, {k: Tensor(v) for k, v in t.items()}, norms)


def replace_norms(
    params: ViTParams,
    plan: ReplacementPlan,
    num_experts: int,
    seed: int,
    top_k: int = 1,
) -> ViTParams:
    """Copy of ``params`` with planned slots swapped for MoE-LayerNorms."""
    if len(plan.replace) != params.config.num_norms:
        raise ValueError("replacement plan length does not match norm slot count")
    out = params.copy().freeze()
    d = params.config.embed_dim
    for j, flag in enumerate(plan.replace):
        slot = out.norms[j]
        if not flag:
            continue
        if isinstance(slot, MoELayerNorm):
            raise ValueError(f"slot {j} is already an MoE-LayerNorm")
        out.norms[j] = init_moe_layer(
            d,
            num_experts,
            (slot.weight.values, slot.bias.values),
            seed=seed * 1000 + j,
            top_k=top_k,
            eps=slot.eps,
        )
    return out


# ---------------------------------------------------------------- forward


@dataclass
class ForwardOutput:
    logits: Tensor
    posteriors: Tensor
    routing: list[RoutingResult] = field(default_factory=list)
    cls_embedding: np.ndarray | None = None


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.values)):
        raise ad.NumericError(f"non-finite activations at {where}")
    return t


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, S, S, C) -> (B, N, P*P*C), patches in row-major order."""
    b, s, _, c = images.shape
    g = s // patch
    x = images.reshape(b, g, patch, g, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, patch * patch * c)


def patch_embed(images, params: ViTParams) -> Tensor:
    cfg = params.config
    images = np.asarray(images.values if isinstance(images, Tensor) else images, dtype=float)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if images.shape[1:] != expected:
        raise ad.DimensionError(f"image shape {images.shape[1:]} does not match config {expected}")
    b = images.shape[0]
    images = (images - cfg.pixel_mean) / cfg.pixel_std
    tokens = ad.matmul(Tensor(patchify(images, cfg.patch_size)), params.tensors["vit/patch_embed/weight"])
    cls = ad.broadcast_to(ad.reshape(params.tensors["vit/cls_token"], (1, 1, cfg.embed_dim)), (b, 1, cfg.embed_dim))
    z = ad.concat([cls, tokens], axis=1)
    return z + params.tensors["vit/pos_embed"]


def apply_norm(z: Tensor, slot, routing: list[RoutingResult] | None) -> Tensor:
    if isinstance(slot, MoELayerNorm):
        out, r = moe_layernorm_forward(z, slot)
        if routing is not None:
            routing.append(r)
        return out
    return layernorm_forward(z, slot)


def _linear(x: Tensor, params: ViTParams, w: str, b: str) -> Tensor:
    return ad.matmul(x, params.tensors[w]) + params.tensors[b]


def attention(x: Tensor, params: ViTParams, block: int) -> Tensor:
    cfg = params.config
    bsz, n, d = x.shape
    h = cfg.heads
    dh = d // h
    pre = f"vit/block{block}/msa/"

    def heads(name):
        y = _linear(x, params, pre + "w" + name, pre + "b" + name)
        return ad.transpose(ad.reshape(y, (bsz, n, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(attn, v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bsz, n, d))
    return _linear(ctx, params, pre + "wo", pre + "bo")


def mlp(x: Tensor, params: ViTParams, block: int) -> Tensor:
    pre = f"vit/block{block}/mlp/"
    hidden = ad.gelu(_linear(x, params, pre + "w1", pre + "b1"))
    return _linear(hidden, params, pre + "w2", pre + "b2")


def encoder_block(z: Tensor, params: ViTParams, block: int, routing: list[RoutingResult] | None = None) -> Tensor:
    z1 = attention(apply_norm(z, params.norms[2 * block], routing), params, block) + z
    return mlp(apply_norm(z1, params.norms[2 * block + 1], routing), params, block) + z1


def head(cls: Tensor, params: ViTParams) -> Tensor:
    out = _linear(cls, params, "vit/head/w1", "vit/head/b1")
    if params.config.head_layers == 2:
        out = _linear(ad.gelu(out), params, "vit/head/w2", "vit/head/b2")
    return out


def forward(batch, params: ViTParams) -> ForwardOutput:
    """Logits and posteriors for a (B, S, S, C) batch.

    The final norm runs over the whole sequence (routing sees the token mean)
    and the class token is read out afterwards.
    """
    images = np.asarray(batch.values if isinstance(batch, Tensor) else batch, dtype=float)
    if images.ndim != 4 or images.shape[0] < 1:
        raise ad.DimensionError(f"forward expects a non-empty (B, S, S, C) batch, got {images.shape}")
    routing: list[RoutingResult] = []
    z = _check_finite(patch_embed(images, params), "patch_embed")
    for i in range(params.config.depth):
        z = _check_finite(encoder_block(z, params, i, routing), f"block{i}")
    cls_embedding = z.values[:, 0, :].copy()
    zn = apply_norm(z, params.norms[-1], routing)
    logits = _check_finite(head(ad.getitem(zn, (slice(None), 0, slice(None))), params), "head")
    return ForwardOutput(logits, ad.softmax(logits, axis=-1), routing, cls_embedding)


def predict(params: ViTParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(images), batch_size):
        preds.append(forward(images[start : start + batch_size], params).logits.values.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


# ---------------------------------------------------------------- checkpoints


def params_to_dict(params: ViTParams) -> dict:
    return {
        "format": "moetta-vit-checkpoint",
        "version": 1,
        "config": asdict(params.config),
        "moe": {
            str(j): {"top_k": s.top_k, "grad_to_router": s.grad_to_router}
            for j, s in params.moe_slots
        },
        "tensors": {
            k: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
            for k, t in sorted(params.named_tensors().items())
        },
    }


def params_from_dict(doc: dict) -> ViTParams:
    if doc.get("format") != "moetta-vit-checkpoint":
        raise ValueError("not a moetta checkpoint")
    cfg = ViTConfig(**doc["config"])
    arrays = {k: np.asarray(v["values"], dtype=float).reshape(v["shape"]) for k, v in doc["tensors"].items()}
    norms: list[LayerNormSlot | MoELayerNorm] = []
    for j in range(cfg.num_norms):
        moe_key = f"vit/norm{j}/moe/"
        if moe_key + "weight" in arrays:
            meta = doc.get("moe", {}).get(str(j), {})
            norms.append(
                MoELayerNorm(
                    weight=Tensor(arrays.pop(moe_key + "weight")),
                    bias=Tensor(arrays.pop(moe_key + "bias")),
                    expert_weight=Tensor(arrays.pop(moe_key + "expert_weight")),
                    expert_bias=Tensor(arrays.pop(moe_key + "expert_bias")),
                    router_weight=Tensor(arrays.pop(moe_key + "router_weight")),
                    router_bias=Tensor(arrays.pop(moe_key + "router_bias")),
                    top_k=meta.get("top_k", 1),
                    eps=cfg.ln_eps,
                    grad_to_router=meta.get("grad_to_router", True),
                )
            )
        else:
            norms.append(
                LayerNormSlot(
                    Tensor(arrays.pop(f"vit/norm{j}/weight")),
                    Tensor(arrays.pop(f"vit/norm{j}/bias")),
                    eps=cfg.ln_eps,
                )
            )
    return ViTParams(cfg, {k: Tensor(v) for k, v in arrays.items()}, norms)


def save_checkpoint(params: ViTParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params), sort_keys=True))


def load_checkpoint(path: str | Path) -> ViTParams:
    return params_from_dict(json.loads(Path(path).read_text()))


def checkpoint_hash(params: ViTParams) -> str:
    return hashlib.sha256(json.dumps(params_to_dict(params), sort_keys=True).encode()).hexdigest()
