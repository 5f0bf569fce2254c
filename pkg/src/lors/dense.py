"""Per-layer dense baselines with the same ``weight(...)`` surface as the LORS containers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import DimensionError, Tensor, add, matmul, reshape
from .params import _rng, kaiming_uniform


class DenseStatic:
    """An independent [d, h] weight per layer."""

    def __init__(self, d: int, h: int, n_layers: int):
        self.d, self.h, self.n_layers = d, h, n_layers
        self.W = [Tensor.zeros((d, h), requires_grad=True) for _ in range(n_layers)]

    def weight(self, layer: int) -> Tensor:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        return self.W[layer]

    def init(self, seed) -> None:
        rng = _rng(seed)
        for w in self.W:
            w.data[...] = kaiming_uniform(rng, w.shape, fan_in=self.d)

    def named_parameters(self, component: str = "static") -> Iterator[tuple[str, Tensor]]:
        for i, w in enumerate(self.W):
            yield f"{component}/dense/L{i}.W", w


class DenseAdaptive:
    """Query-generated weight, ``reshape(q @ P_i + b_i, (d, h))``, independent per layer."""

    def __init__(self, d_q: int, d: int, h: int, n_layers: int, bias: bool = True):
        self.d_q, self.d, self.h, self.n_layers = d_q, d, h, n_layers
        self.proj = [Tensor.zeros((d_q, d * h), requires_grad=True) for _ in range(n_layers)]
        self.bias = [Tensor.zeros((d * h,), requires_grad=True) if bias else None for _ in range(n_layers)]

    def weight(self, layer: int, q: Tensor) -> Tensor:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range for {self.n_layers} layers")
        if q.ndim != 2 or q.shape[1] != self.d_q:
            raise DimensionError(f"query must be [batch, {self.d_q}], got {q.shape}")
        flat = matmul(q, self.proj[layer])
        if self.bias[layer] is not None:
            flat = add(flat, self.bias[layer])
        return reshape(flat, (q.shape[0], self.d, self.h))

    def init(self, seed) -> None:
        rng = _rng(seed)
        for i in range(self.n_layers):
            self.proj[i].data[...] = kaiming_uniform(rng, self.proj[i].shape, fan_in=self.d_q)
            if self.bias[i] is not None:
                self.bias[i].data[...] = 0.0

    def named_parameters(self, component: str = "adaptive") -> Iterator[tuple[str, Tensor]]:
        for i in range(self.n_layers):
            yield f"{component}/dense/L{i}.proj", self.proj[i]
            if self.bias[i] is not None:
                yield f"{component}/bias/L{i}.proj", self.bias[i]

    def load_layer(self, layer: int, weight: np.ndarray, bias: np.ndarray) -> None:
        self.proj[layer].data[...] = weight
        if self.bias[layer] is not None:
            self.bias[layer].data[...] = bias
