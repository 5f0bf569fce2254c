"""Small post-norm transformer encoder whose per-layer attention and FFN
weights can come from static LORS containers.

Weight families per layer follow the DeiT layout: a fused qkv projection
[D, 3D], the attention output projection [D, D], and the FFN pair [D, F],
[F, D]. An :class:`AllocationPlan` gives per-layer group counts for the
attention families and the FFN families separately; a family without a plan
keeps independent dense weights.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    layer_norm,
    matmul,
    mean_axis,
    relu,
    reshape,
    scale,
    softmax,
    take,
    transpose,
    transpose2d,
)
from .decoder import ConfigError
from .dense import DenseStatic
from .params import MODES, StaticLorsParam, init_static, static_to_dense

ATTN_FAMILIES = ("qkv", "proj")
FFN_FAMILIES = ("fc1", "fc2")


@dataclass
class AllocationPlan:
    attn_groups: list[int] | None = None
    ffn_groups: list[int] | None = None
    rank: int = 32

    @classmethod
    def uniform(cls, depth: int, k: int = 1, rank: int = 32, attn: bool = True, ffn: bool = True) -> AllocationPlan:
        return cls([k] * depth if attn else None, [k] * depth if ffn else None, rank)

    @classmethod
    def tail_heavy_attention(cls, depth: int, rank: int) -> AllocationPlan:
        """Attention {1 x (depth-3), 2, 4, 6}; FFN {6, 4, 2, 1 x (depth-3)}."""
        if depth < 3:
            raise ConfigError("tail-heavy plan needs depth >= 3")
        return cls([1] * (depth - 3) + [2, 4, 6], [6, 4, 2] + [1] * (depth - 3), rank)

    def groups_for(self, family: str) -> list[int] | None:
        return self.attn_groups if family in ATTN_FAMILIES else self.ffn_groups


@dataclass
class EncoderConfig:
    depth: int = 6
    model_dim: int = 32
    heads: int = 4
    ffn_dim: int = 128
    patch_count: int = 8
    class_count: int = 10
    plan: AllocationPlan | None = None
    weight_mode: str = "dense"
    lors_mode: str = "full"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        for name in ("model_dim", "heads", "ffn_dim", "patch_count", "class_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ConfigError(f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        if self.weight_mode not in ("dense", "lors"):
            raise ConfigError(f"weight_mode must be dense or lors, got {self.weight_mode!r}")
        if self.lors_mode not in MODES:
            raise ConfigError(f"lors_mode must be one of {MODES}")
        if self.weight_mode == "lors":
            if self.plan is None:
                raise ConfigError("weight_mode=lors needs an allocation plan")
            for family in (*ATTN_FAMILIES, *FFN_FAMILIES):
                ks = self.plan.groups_for(family)
                if ks is None:
                    continue
                if len(ks) != self.depth or any(k < 0 for k in ks):
                    raise ConfigError(f"{family} plan {ks} does not fit depth {self.depth}")
                d, h = self.family_shape(family)
                if not 1 <= self.plan.rank <= min(d, h):
                    raise ConfigError(f"rank {self.plan.rank} outside [1, {min(d, h)}] for {family}")

    def family_shape(self, family: str) -> tuple[int, int]:
        D, F = self.model_dim, self.ffn_dim
        return {"qkv": (D, 3 * D), "proj": (D, D), "fc1": (D, F), "fc2": (F, D)}[family]

    def lors_families(self) -> list[str]:
        if self.weight_mode != "lors":
            return []
        return [f for f in (*ATTN_FAMILIES, *FFN_FAMILIES) if self.plan.groups_for(f) is not None]

    def replace(self, **changes) -> EncoderConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return EncoderConfig(**values)


class Encoder:
    def __init__(self, config: EncoderConfig, seed=None):
        c = self.config = config
        lors = set(c.lors_families())
        self.weights: dict[str, StaticLorsParam | DenseStatic] = {}
        for family in (*ATTN_FAMILIES, *FFN_FAMILIES):
            d, h = c.family_shape(family)
            if family in lors:
                self.weights[family] = StaticLorsParam(d, h, c.depth, c.plan.rank, c.plan.groups_for(family), c.lors_mode)
            else:
                self.weights[family] = DenseStatic(d, h, c.depth)
        D, F = c.model_dim, c.ffn_dim
        widths = {"qkv": 3 * D, "proj": D, "fc1": F, "fc2": D}
        self.biases = {f: [Tensor.zeros((w,), requires_grad=True) for _ in range(c.depth)] for f, w in widths.items()}
        self.norms = {
            name: [(Tensor(np.ones(D), requires_grad=True), Tensor.zeros((D,), requires_grad=True)) for _ in range(c.depth)]
            for name in ("ln1", "ln2")
        }
        self.cls_W = Tensor.zeros((D, c.class_count), requires_grad=True)
        self.cls_b = Tensor.zeros((c.class_count,), requires_grad=True)
        if seed is not None:
            self.init(seed)

    def init(self, seed) -> None:
        rng = np.random.default_rng(seed)
        for w in self.weights.values():
            init_static(w, rng) if isinstance(w, StaticLorsParam) else w.init(rng)
        bound = np.sqrt(6.0 / (self.config.model_dim + self.config.class_count))
        self.cls_W.data[...] = rng.uniform(-bound, bound, self.cls_W.shape)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for family, w in self.weights.items():
            yield from w.named_parameters(family)
        for family, bs in self.biases.items():
            for i, b in enumerate(bs):
                yield f"{family}/bias/L{i}", b
        for name, pairs in self.norms.items():
            for i, (g, b) in enumerate(pairs):
                yield f"{name}/norm/L{i}.gamma", g
                yield f"{name}/norm/L{i}.beta", b
        yield "cls/dense/W", self.cls_W
        yield "cls/bias/b", self.cls_b

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def stack_weight_count(self) -> int:
        """Scalars in the per-layer attention/FFN weights (shared counted once)."""
        return sum(t.size for name, t in self.named_parameters() if name.split("/")[0] in self.weights and "/bias/" not in name)

    def linear(self, family: str, x: Tensor, layer: int) -> Tensor:
        return add(matmul(x, self.weights[family].weight(layer)), self.biases[family][layer])

    def forward(self, patches: Tensor) -> Tensor:
        return encoder_forward(patches, self)

    __call__ = forward

    def to_dense(self) -> Encoder:
        dense = Encoder(self.config.replace(weight_mode="dense", plan=None))
        src = dict(self.named_parameters())
        for name, t in dense.named_parameters():
            if name in src:
                t.data[...] = src[name].data
        for family, w in self.weights.items():
            if isinstance(w, StaticLorsParam):
                for i in range(self.config.depth):
                    dense.weights[family].W[i].data[...] = static_to_dense(w, i)
        return dense


def attention_block(x: Tensor, layer: int, params: Encoder, return_weights: bool = False):
    """Post-norm multi-head self-attention: LN(x + MHA(x)). x is [batch, tokens, D]."""
    c = params.config
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != c.model_dim:
        raise DimensionError(f"attention_block: input {x.shape}, model_dim={c.model_dim}")
    n, t, D = x.shape
    H, dh = c.heads, D // c.heads
    qkv = reshape(params.linear("qkv", x, layer), (n, t, 3, H, dh))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))  # [3, n, H, t, dh]
    q, k, v = take(qkv, 0), take(qkv, 1), take(qkv, 2)
    weights = softmax(scale(matmul(q, transpose2d(k)), 1.0 / np.sqrt(dh)))
    heads = transpose(matmul(weights, v), (0, 2, 1, 3))  # [n, t, H, dh]
    attended = params.linear("proj", reshape(heads, (n, t, D)), layer)
    gamma, beta = params.norms["ln1"][layer]
    out = layer_norm(add(x, attended), gamma, beta, c.ln_eps)
    if single:
        out = reshape(out, (t, D))
    return (out, weights) if return_weights else out


def ffn_block(x: Tensor, layer: int, params: Encoder) -> Tensor:
    """LN(x + fc2(relu(fc1(x))))."""
    c = params.config
    if x.shape[-1] != c.model_dim:
        raise DimensionError(f"ffn_block: input {x.shape}, model_dim={c.model_dim}")
    hidden = relu(params.linear("fc1", x, layer))
    gamma, beta = params.norms["ln2"][layer]
    return layer_norm(add(x, params.linear("fc2", hidden, layer)), gamma, beta, c.ln_eps)


def encoder_forward(patches: Tensor, params: Encoder) -> Tensor:
    """[batch, patch_count, D] patches -> [batch, class_count] logits via mean pooling."""
    c = params.config
    if patches.ndim != 3 or patches.shape[1:] != (c.patch_count, c.model_dim):
        raise DimensionError(f"patches {patches.shape}, expected [batch, {c.patch_count}, {c.model_dim}]")
    x = patches
    for i in range(c.depth):
        x = ffn_block(attention_block(x, i, params), i, params)
    pooled = mean_axis(x, 1)
    return add(matmul(pooled, params.cls_W), params.cls_b)


def stack_weight_counts(plan: AllocationPlan | None, config: EncoderConfig) -> tuple[int, int]:
    """Closed-form (LORS, dense) scalar counts of the per-layer attention/FFN weights."""
    dense = lors = 0
    for family in (*ATTN_FAMILIES, *FFN_FAMILIES):
        d, h = config.family_shape(family)
        dense += config.depth * d * h
        ks = None if plan is None or config.weight_mode == "dense" else plan.groups_for(family)
        if ks is None:
            lors += config.depth * d * h
        else:
            lors += d * h + sum(ks) * plan.rank * (d + h)
    return lors, dense


def parameter_fraction(plan: AllocationPlan | None, config: EncoderConfig) -> float:
    lors, dense = stack_weight_counts(plan, config)
    return lors / dense
