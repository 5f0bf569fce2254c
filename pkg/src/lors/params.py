"""Shared + grouped low-rank private weights for stacked layers.

Static form, per layer i::

    W_i = W_shared + sum_k B_ik @ A_ik

Adaptive form, per layer i and query q::

    W_i(q) = reshape(q @ P_shared + b_shared) + sum_k B_ik @ E_ik(q) @ A_ik
    E_ik(q) = reshape(q @ P_Eik + b_Eik, (r, r))

The K factor pairs of one layer are stored stacked along a leading group
axis ([K, d, r] and [K, r, h]) so the private sum is one batched matmul and
one reduction. A layer with K = 0 has no private tensors.
"""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, add, matmul, reshape, sum_axis

MODES = ("full", "shared_only", "private_only")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), i.e. gain sqrt(2) for relu."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_common(d: int, h: int, n_layers: int, rank: int, groups: Sequence[int], mode: str):
    if d < 1 or h < 1:
        raise DimensionError(f"weight extents must be positive, got d={d} h={h}")
    if n_layers < 0:
        raise ContractError(f"layer count must be >= 0, got {n_layers}")
    if not 1 <= rank <= min(d, h):
        raise ContractError(f"rank {rank} outside [1, min(d, h)={min(d, h)}]")
    if len(groups) != n_layers:
        raise ContractError(f"{len(groups)} group counts for {n_layers} layers")
    if any(k < 0 for k in groups):
        raise ContractError(f"group counts must be non-negative: {list(groups)}")
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")


def _groups(groups: int | Sequence[int], n_layers: int) -> list[int]:
    return [int(groups)] * n_layers if isinstance(groups, (int, np.integer)) else [int(k) for k in groups]


class StaticLorsParam:
    def __init__(
        self,
        d: int,
        h: int,
        n_layers: int,
        rank: int,
        groups: int | Sequence[int] = 1,
        mode: str = "full",
    ):
        groups = _groups(groups, n_layers)
        _check_common(d, h, n_layers, rank, groups, mode)
        self.d, self.h, self.n_layers, self.rank = d, h, n_layers, rank
        self.groups = groups
        self.mode = mode
        self.shared = Tensor.zeros((d, h), requires_grad=True)
        self.B: list[Tensor | None] = []
        self.A: list[Tensor | None] = []
        for k in groups:
            self.B.append(Tensor.zeros((k, d, rank), requires_grad=True) if k else None)
            self.A.append(Tensor.zeros((k, rank, h), requires_grad=True) if k else None)

    def weight(self, layer: int) -> Tensor:
        return static_fused_weight(self, layer)

    def named_parameters(self, component: str = "static") -> Iterator[tuple[str, Tensor]]:
        yield f"{component}/shared/W", self.shared
        for i in range(self.n_layers):
            if self.groups[i]:
                yield f"{component}/private/L{i}.B", self.B[i]
                yield f"{component}/private/L{i}.A", self.A[i]

    def __repr__(self) -> str:
        return (
            f"StaticLorsParam(d={self.d}, h={self.h}, N={self.n_layers}, r={self.rank}, "
            f"K={self.groups}, mode={self.mode})"
        )


class AdaptiveLorsParam:
    def __init__(
        self,
        d_q: int,
        d: int,
        h: int,
        n_layers: int,
        rank: int,
        groups: int | Sequence[int] = 1,
        mode: str = "full",
        bias: bool = True,
    ):
        groups = _groups(groups, n_layers)
        _check_common(d, h, n_layers, rank, groups, mode)
        if d_q < 1:
            raise DimensionError(f"query dim must be positive, got {d_q}")
        self.d_q, self.d, self.h, self.n_layers, self.rank = d_q, d, h, n_layers, rank
        self.groups = groups
        self.mode = mode
        self.bias = bias
        self.shared_proj = Tensor.zeros((d_q, d * h), requires_grad=True)
        self.shared_bias = Tensor.zeros((d * h,), requires_grad=True) if bias else None
        self.B: list[Tensor | None] = []
        self.A: list[Tensor | None] = []
        self.E_proj: list[Tensor | None] = []
        self.E_bias: list[Tensor | None] = []
        r2 = rank * rank
        for k in groups:
            self.B.append(Tensor.zeros((k, d, rank), requires_grad=True) if k else None)
            self.A.append(Tensor.zeros((k, rank, h), requires_grad=True) if k else None)
            self.E_proj.append(Tensor.zeros((d_q, k * r2), requires_grad=True) if k else None)
            self.E_bias.append(Tensor.zeros((k * r2,), requires_grad=True) if k and bias else None)

    def weight(self, layer: int, q: Tensor) -> Tensor:
        return adaptive_fused_weight(self, layer, q)

    def named_parameters(self, component: str = "adaptive") -> Iterator[tuple[str, Tensor]]:
        yield f"{component}/shared/proj", self.shared_proj
        if self.shared_bias is not None:
            yield f"{component}/bias/proj", self.shared_bias
        for i in range(self.n_layers):
            if not self.groups[i]:
                continue
            yield f"{component}/private/L{i}.B", self.B[i]
            yield f"{component}/private/L{i}.A", self.A[i]
            yield f"{component}/private/L{i}.E_proj", self.E_proj[i]
            if self.E_bias[i] is not None:
                yield f"{component}/bias/L{i}.E_bias", self.E_bias[i]

    def __repr__(self) -> str:
        return (
            f"AdaptiveLorsParam(d_q={self.d_q}, d={self.d}, h={self.h}, N={self.n_layers}, "
            f"r={self.rank}, K={self.groups}, mode={self.mode})"
        )


def _check_layer(p, layer: int) -> None:
    if not 0 <= layer < p.n_layers:
        raise IndexError(f"layer {layer} out of range for {p.n_layers} layers")


def static_fused_weight(p: StaticLorsParam, layer: int) -> Tensor:
    """Fused [d, h] weight of one layer, honoring ``p.mode``."""
    _check_layer(p, layer)
    out = None if p.mode == "private_only" else p.shared
    if p.mode != "shared_only" and p.groups[layer]:
        private = sum_axis(matmul(p.B[layer], p.A[layer]), 0)
        out = private if out is None else add(out, private)
    return Tensor.zeros((p.d, p.h)) if out is None else out


def adaptive_fused_weight(p: AdaptiveLorsParam, layer: int, q: Tensor) -> Tensor:
    """Per-query fused weights, shape [batch, d, h] for q of shape [batch, d_q]."""
    _check_layer(p, layer)
    if q.ndim != 2 or q.shape[1] != p.d_q:
        raise DimensionError(f"query must be [batch, {p.d_q}], got {q.shape}")
    n, d, h, r = q.shape[0], p.d, p.h, p.rank
    out = None
    if p.mode != "private_only":
        flat = matmul(q, p.shared_proj)
        if p.shared_bias is not None:
            flat = add(flat, p.shared_bias)
        out = reshape(flat, (n, d, h))
    k = p.groups[layer]
    if p.mode != "shared_only" and k:
        e = matmul(q, p.E_proj[layer])
        if p.E_bias[layer] is not None:
            e = add(e, p.E_bias[layer])
        e = reshape(e, (n, k, r, r))
        # [K,d,r] @ [n,K,r,r] @ [K,r,h] -> [n,K,d,h]
        private = sum_axis(matmul(matmul(p.B[layer], e), p.A[layer]), 1)
        out = private if out is None else add(out, private)
    return Tensor.zeros((n, d, h)) if out is None else out


def init_static(p: StaticLorsParam, seed) -> None:
    """Kaiming-uniform shared weight and B factors; A factors zero."""
    rng = _rng(seed)
    p.shared.data[...] = kaiming_uniform(rng, p.shared.shape, fan_in=p.d)
    for i in range(p.n_layers):
        if p.groups[i]:
            p.B[i].data[...] = kaiming_uniform(rng, p.B[i].shape, fan_in=p.d)
            p.A[i].data[...] = 0.0


def init_adaptive(p: AdaptiveLorsParam, seed) -> None:
    """Kaiming-uniform shared generator, B and A factors; E generators and all biases zero."""
    rng = _rng(seed)
    p.shared_proj.data[...] = kaiming_uniform(rng, p.shared_proj.shape, fan_in=p.d_q)
    if p.shared_bias is not None:
        p.shared_bias.data[...] = 0.0
    for i in range(p.n_layers):
        if not p.groups[i]:
            continue
        p.B[i].data[...] = kaiming_uniform(rng, p.B[i].shape, fan_in=p.d)
        p.A[i].data[...] = kaiming_uniform(rng, p.A[i].shape, fan_in=p.rank)
        p.E_proj[i].data[...] = 0.0
        if p.E_bias[i] is not None:
            p.E_bias[i].data[...] = 0.0


def lora_adapt(W: Tensor, B: Tensor, A: Tensor) -> Tensor:
    """W + B @ A."""
    if B.ndim != 2 or A.ndim != 2 or W.shape != (B.shape[0], A.shape[1]):
        raise DimensionError(f"lora_adapt: W {W.shape}, B {B.shape}, A {A.shape} inconsistent")
    return add(W, matmul(B, A))


def static_to_dense(p: StaticLorsParam, layer: int) -> np.ndarray:
    return static_fused_weight(p, layer).data.copy()


def adaptive_to_dense(p: AdaptiveLorsParam, layer: int) -> tuple[np.ndarray, np.ndarray]:
    """Equivalent dense generator (weight [d_q, d*h], bias [d*h]) for one layer.

    The fused weight is affine in q, so evaluating it at q = 0 and at the
    unit vectors recovers the generator exactly.
    """
    probes = Tensor(np.vstack([np.zeros((1, p.d_q)), np.eye(p.d_q)]))
    flat = adaptive_fused_weight(p, layer, probes).data.reshape(p.d_q + 1, -1)
    bias = flat[0].copy()
    return flat[1:] - bias, bias
