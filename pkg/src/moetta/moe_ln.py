"""LayerNorm whose affine parameters are a frozen shared pair plus a routed expert delta."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LayerNormSlot:
    """Plain LayerNorm. Frozen unless Tent marks its affine pair trainable."""

    weight: Tensor
    bias: Tensor
    eps: float = 1e-5

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class MoELayerNorm:
    weight: Tensor  # shared expert, frozen
    bias: Tensor
    expert_weight: Tensor  # (E, D)
    expert_bias: Tensor  # (E, D)
    router_weight: Tensor  # (E, D)
    router_bias: Tensor  # (E,)
    top_k: int = 1
    eps: float = 1e-5
    grad_to_router: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} outside [1, {self.num_experts}]")

    @property
    def num_experts(self) -> int:
        return self.expert_weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {
            "weight": self.weight,
            "bias": self.bias,
            "expert_weight": self.expert_weight,
            "expert_bias": self.expert_bias,
            "router_weight": self.router_weight,
            "router_bias": self.router_bias,
        }

    def trainable(self) -> list[Tensor]:
        return [self.router_weight, self.router_bias, self.expert_weight, self.expert_bias]


@dataclass
class RoutingResult:
    probs: Tensor  # (B, E)
    indices: np.ndarray  # (B, k)
    selected: Tensor  # (B, k)
    fraction: np.ndarray  # F, (E,)
    mean_prob: Tensor  # P, (E,)
    loss: Tensor  # scalar

    @property
    def lb_value(self) -> float:
        return self.loss.item()


def init_moe_layer(
    dim: int,
    num_experts: int,
    shared: tuple[np.ndarray, np.ndarray],
    seed: int,
    top_k: int = 1,
    eps: float = 1e-5,
) -> MoELayerNorm:
    if dim < 1 or num_experts < 1:
        raise ValueError("dim and num_experts must be >= 1")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (dim + num_experts))
    w, b = shared
    return MoELayerNorm(
        weight=Tensor(np.array(w, copy=True)),
        bias=Tensor(np.array(b, copy=True)),
        expert_weight=Tensor(np.zeros((num_experts, dim)), requires_grad=True),
        expert_bias=Tensor(np.zeros((num_experts, dim)), requires_grad=True),
        router_weight=Tensor(rng.uniform(-bound, bound, size=(num_experts, dim)), requires_grad=True),
        router_bias=Tensor(np.zeros(num_experts), requires_grad=True),
        top_k=top_k,
        eps=eps,
    )


def top_k_indices(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p: exact ties go to the lowest index
    return np.argsort(-probs, axis=-1, kind="stable")[:, :k]


def assignment_fraction(indices: np.ndarray, num_experts: int) -> np.ndarray:
    counts = np.bincount(indices.reshape(-1), minlength=num_experts).astype(float)
    return counts / counts.sum()


def load_balancing_loss(result: RoutingResult, num_experts: int) -> Tensor:
    """``E * sum_i F_i * P_i``; F is a constant, P carries the gradient."""
    return ad.sum(ad.mul(result.mean_prob, result.fraction)) * float(num_experts)


def load_balancing_value(probs: np.ndarray, k: int = 1) -> float:
    """Plain numpy evaluation of the balancing loss for a probability matrix."""
    probs = np.asarray(probs, dtype=float)
    e = probs.shape[1]
    frac = assignment_fraction(top_k_indices(probs, k), e)
    return float(e * np.dot(frac, probs.mean(axis=0)))


def route(z: Tensor, layer: MoELayerNorm) -> RoutingResult:
    if z.ndim != 3 or z.shape[0] < 1:
        raise ad.DimensionError(f"route expects (B, T, D) input, got {z.shape}")
    summary = ad.mean(z, axis=1)
    logits = ad.matmul(summary, ad.transpose(layer.router_weight, (1, 0))) + layer.router_bias
    probs = ad.softmax(logits, axis=-1)
    idx = ad.frozen(top_k_indices(probs.values, layer.top_k))
    rows = np.arange(idx.shape[0])[:, None]
    selected = ad.getitem(probs, (rows, idx))
    frac = ad.frozen(assignment_fraction(idx, layer.num_experts))
    mean_prob = ad.mean(probs, axis=0)
    result = RoutingResult(probs, idx, selected, frac, mean_prob, loss=None)  # type: ignore[arg-type]
    result.loss = load_balancing_loss(result, layer.num_experts)
    return result


def moe_layernorm_forward(z: Tensor, layer: MoELayerNorm) -> tuple[Tensor, RoutingResult]:
    if z.shape[-1] != layer.dim:
        raise ad.DimensionError(f"input feature dim {z.shape[-1]} != layer dim {layer.dim}")
    r = route(z, layer)
    b, k = r.indices.shape
    if layer.grad_to_router:
        scale = ad.detach_scale(r.selected)
    else:
        scale = Tensor(np.ones((b, k)))
    scale = ad.reshape(scale, (b, k, 1))
    w_sel = ad.take_rows(layer.expert_weight, r.indices)  # (B, k, D)
    b_sel = ad.take_rows(layer.expert_bias, r.indices)
    w_fused = ad.sum(w_sel * scale, axis=1) + layer.weight  # (B, D)
    b_fused = ad.sum(b_sel * scale, axis=1) + layer.bias
    xn = ad.normalize(z, layer.eps)
    out = xn * ad.reshape(w_fused, (b, 1, layer.dim)) + ad.reshape(b_fused, (b, 1, layer.dim))
    return out, r


def layernorm_forward(z: Tensor, slot: LayerNormSlot) -> Tensor:
    return ad.normalize(z, slot.eps) * slot.weight + slot.bias
