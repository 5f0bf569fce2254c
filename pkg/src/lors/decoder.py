"""Toy AdaMixer-style decoder stack: adaptive channel mixing, adaptive spatial
mixing and an output projection back to the query, repeated N times.

Feature sampling is not modelled; each query arrives with pre-sampled
features of shape [g, P_in, C] that stay fixed across layers.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .autodiff import (
    DimensionError,
    Tensor,
    add,
    concat,
    layer_norm,
    matmul,
    relu,
    reshape,
    take,
    transpose2d,
)
from .dense import DenseAdaptive, DenseStatic
from .params import (
    MODES,
    AdaptiveLorsParam,
    StaticLorsParam,
    adaptive_to_dense,
    init_adaptive,
    init_static,
    static_to_dense,
)


class ConfigError(ValueError):
    pass


def ramp_schedule(n_layers: int, top: int = 3) -> list[int]:
    """Group counts rising 1..top over depth; gives [1, 1, 2, 2, 3, 3] at depth 6."""
    return [1 + (top * i) // n_layers for i in range(n_layers)]


@dataclass
class StackConfig:
    n_layers: int = 6
    d_q: int = 256
    channels: int = 64
    points_in: int = 64
    points_out: int = 128
    groups: int = 2
    rank_adaptive: int = 16
    rank_static: int = 8
    k_acm: list[int] | None = None
    k_asm: list[int] | None = None
    k_out: list[int] | None = None
    weight_mode: str = "lors"
    lors_mode: str = "full"
    bias: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.k_acm is None:
            self.k_acm = ramp_schedule(self.n_layers)
        if self.k_asm is None:
            self.k_asm = ramp_schedule(self.n_layers)
        if self.k_out is None:
            self.k_out = [1] * self.n_layers
        self.k_acm, self.k_asm, self.k_out = list(self.k_acm), list(self.k_asm), list(self.k_out)
        self.validate()

    def validate(self) -> None:
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        for name in ("d_q", "channels", "points_in", "points_out", "groups", "rank_adaptive", "rank_static"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("k_acm", "k_asm", "k_out"):
            ks = getattr(self, name)
            if len(ks) != self.n_layers:
                raise ConfigError(f"{name} has {len(ks)} entries for {self.n_layers} layers")
            if any(k < 0 for k in ks):
                raise ConfigError(f"{name} entries must be >= 0: {ks}")
        if self.weight_mode not in ("dense", "lors"):
            raise ConfigError(f"weight_mode must be dense or lors, got {self.weight_mode!r}")
        if self.lors_mode not in MODES:
            raise ConfigError(f"lors_mode must be one of {MODES}, got {self.lors_mode!r}")
        if self.ln_eps < 0:
            raise ConfigError("ln_eps must be >= 0")
        if self.weight_mode == "lors":
            if self.rank_adaptive > min(self.channels, self.points_in, self.points_out):
                raise ConfigError(
                    f"rank_adaptive={self.rank_adaptive} exceeds min(C, P_in, P_out)="
                    f"{min(self.channels, self.points_in, self.points_out)}"
                )
            if self.rank_static > min(self.out_features, self.d_q):
                raise ConfigError(f"rank_static={self.rank_static} exceeds min({self.out_features}, {self.d_q})")

    @property
    def out_features(self) -> int:
        """Flattened length of the mixed features fed to the output projection."""
        return self.groups * self.channels * self.points_out

    def replace(self, **changes) -> StackConfig:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return StackConfig(**values)


@dataclass
class DecoderState:
    queries: Tensor  # [..., d_q]
    sampled_features: Tensor  # [..., g, P_in, C]

    @classmethod
    def from_feature_source(cls, queries, features, groups: int) -> DecoderState:
        """Split [..., P_in, d_feat] features into g channel groups of C = d_feat / g."""
        features = np.asarray(features, dtype=np.float64)
        d_feat = features.shape[-1]
        if d_feat % groups:
            raise DimensionError(f"d_feat={d_feat} not divisible by g={groups}")
        lead, p_in = features.shape[:-2], features.shape[-2]
        split = features.reshape(lead + (p_in, groups, d_feat // groups))
        split = np.moveaxis(split, -2, -3)
        return cls(Tensor(queries), Tensor(np.ascontiguousarray(split)))


def _as_batch(x: Tensor, q: Tensor) -> tuple[Tensor, Tensor, bool]:
    if q.ndim == 1:
        return reshape(x, (1,) + x.shape), reshape(q, (1, q.shape[0])), True
    return x, q, False


def acm(x: Tensor, q: Tensor, generator, layer: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """relu(LayerNorm(x @ M_c(q))) for x [n, P_in, C] and q [n, d_q]."""
    x, q, single = _as_batch(x, q)
    m_c = generator.weight(layer, q)
    if x.ndim != 3 or x.shape[0] != q.shape[0] or x.shape[2] != m_c.shape[1]:
        raise DimensionError(f"acm: features {x.shape} vs channel mixer {m_c.shape}")
    out = relu(layer_norm(matmul(x, m_c), gamma, beta, eps))
    return reshape(out, out.shape[1:]) if single else out


def asm(x: Tensor, q: Tensor, generator, layer: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """relu(LayerNorm(x^T @ M_s(q))) for x [n, P_in, C]; returns [n, C, P_out]."""
    x, q, single = _as_batch(x, q)
    m_s = generator.weight(layer, q)
    if x.ndim != 3 or x.shape[0] != q.shape[0] or x.shape[1] != m_s.shape[1]:
        raise DimensionError(f"asm: features {x.shape} vs spatial mixer {m_s.shape}")
    out = relu(layer_norm(matmul(transpose2d(x), m_s), gamma, beta, eps))
    return reshape(out, out.shape[1:]) if single else out


def output_project(y: Tensor, generator, layer: int, bias: Tensor | None = None) -> Tensor:
    """Linear map of flattened [.., g*C*P_out] features to the query dimension."""
    w = generator.weight(layer)
    if y.shape[-1] != w.shape[0]:
        raise DimensionError(f"output_project: input length {y.shape[-1]}, weight expects {w.shape[0]}")
    single = y.ndim == 1
    if single:
        y = reshape(y, (1, y.shape[0]))
    out = matmul(y, w)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, (w.shape[1],)) if single else out


class MixerDecoder:
    def __init__(self, config: StackConfig, seed=None):
        c = self.config = config
        if c.weight_mode == "lors":
            self.acm = [
                AdaptiveLorsParam(c.d_q, c.channels, c.channels, c.n_layers, c.rank_adaptive, c.k_acm, c.lors_mode, c.bias)
                for _ in range(c.groups)
            ]
            self.asm = [
                AdaptiveLorsParam(c.d_q, c.points_in, c.points_out, c.n_layers, c.rank_adaptive, c.k_asm, c.lors_mode, c.bias)
                for _ in range(c.groups)
            ]
            self.out = StaticLorsParam(c.out_features, c.d_q, c.n_layers, c.rank_static, c.k_out, c.lors_mode)
        else:
            self.acm = [DenseAdaptive(c.d_q, c.channels, c.channels, c.n_layers, c.bias) for _ in range(c.groups)]
            self.asm = [DenseAdaptive(c.d_q, c.points_in, c.points_out, c.n_layers, c.bias) for _ in range(c.groups)]
            self.out = DenseStatic(c.out_features, c.d_q, c.n_layers)
        self.out_bias = [Tensor.zeros((c.d_q,), requires_grad=True) if c.bias else None for _ in range(c.n_layers)]
        self.acm_norm = [[self._norm(c.channels) for _ in range(c.groups)] for _ in range(c.n_layers)]
        self.asm_norm = [[self._norm(c.points_out) for _ in range(c.groups)] for _ in range(c.n_layers)]
        if seed is not None:
            self.init(seed)

    @staticmethod
    def _norm(width: int) -> tuple[Tensor, Tensor]:
        return Tensor(np.ones(width), requires_grad=True), Tensor.zeros((width,), requires_grad=True)

    def init(self, seed) -> None:
        rng = np.random.default_rng(seed)
        for gen in (*self.acm, *self.asm):
            init_adaptive(gen, rng) if isinstance(gen, AdaptiveLorsParam) else gen.init(rng)
        init_static(self.out, rng) if isinstance(self.out, StaticLorsParam) else self.out.init(rng)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for j, gen in enumerate(self.acm):
            yield from gen.named_parameters(f"acm.g{j}")
        for j, gen in enumerate(self.asm):
            yield from gen.named_parameters(f"asm.g{j}")
        yield from self.out.named_parameters("out")
        for i in range(self.config.n_layers):
            if self.out_bias[i] is not None:
                yield f"out/bias/L{i}", self.out_bias[i]
            for j in range(self.config.groups):
                yield f"acm.g{j}/norm/L{i}.gamma", self.acm_norm[i][j][0]
                yield f"acm.g{j}/norm/L{i}.beta", self.acm_norm[i][j][1]
                yield f"asm.g{j}/norm/L{i}.gamma", self.asm_norm[i][j][0]
                yield f"asm.g{j}/norm/L{i}.beta", self.asm_norm[i][j][1]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    # -- forward ----------------------------------------------------------
    def branches(self, layer: int, q: Tensor, xs: list[Tensor]) -> list[Tensor]:
        """Per-group ASM outputs [n, C, P_out] of one layer, before concatenation."""
        c = self.config
        out = []
        for j, x in enumerate(xs):
            a = acm(x, q, self.acm[j], layer, *self.acm_norm[layer][j], c.ln_eps)
            out.append(asm(a, q, self.asm[j], layer, *self.asm_norm[layer][j], c.ln_eps))
        return out

    def layer(self, layer: int, q: Tensor, xs: list[Tensor]) -> Tensor:
        n = q.shape[0]
        mixed = [reshape(s, (n, -1)) for s in self.branches(layer, q, xs)]
        y = concat(mixed, axis=1) if len(mixed) > 1 else mixed[0]
        return add(q, output_project(y, self.out, layer, self.out_bias[layer]))

    def split_groups(self, features: Tensor) -> list[Tensor]:
        return [take(features, (slice(None), j)) for j in range(self.config.groups)]

    def forward(self, queries: Tensor, features: Tensor) -> Tensor:
        c = self.config
        lead = queries.shape[:-1]
        if queries.shape[-1] != c.d_q:
            raise DimensionError(f"queries last extent {queries.shape[-1]} != d_q={c.d_q}")
        expected = lead + (c.groups, c.points_in, c.channels)
        if features.shape != expected:
            raise DimensionError(f"sampled features {features.shape}, expected {expected}")
        n = int(np.prod(lead, dtype=np.int64))
        q = reshape(queries, (n, c.d_q))
        xs = self.split_groups(reshape(features, (n,) + expected[len(lead):]))
        for i in range(c.n_layers):
            q = self.layer(i, q, xs)
        return reshape(q, lead + (c.d_q,))

    __call__ = forward

    # -- weight transplant -----------------------------------------------
    def to_dense(self) -> MixerDecoder:
        """Dense twin computing the same function (fused weights copied out)."""
        dense = MixerDecoder(self.config.replace(weight_mode="dense"))
        if self.config.weight_mode == "dense":
            src = dict(self.named_parameters())
            for name, t in dense.named_parameters():
                t.data[...] = src[name].data
            return dense
        for i in range(self.config.n_layers):
            for j in range(self.config.groups):
                dense.acm[j].load_layer(i, *adaptive_to_dense(self.acm[j], i))
                dense.asm[j].load_layer(i, *adaptive_to_dense(self.asm[j], i))
            dense.out.W[i].data[...] = static_to_dense(self.out, i)
            if self.out_bias[i] is not None:
                dense.out_bias[i].data[...] = self.out_bias[i].data
            for j in range(self.config.groups):
                for src, dst in ((self.acm_norm, dense.acm_norm), (self.asm_norm, dense.asm_norm)):
                    dst[i][j][0].data[...] = src[i][j][0].data
                    dst[i][j][1].data[...] = src[i][j][1].data
        return dense


def build_stack(config: StackConfig, seed=None) -> MixerDecoder:
    """Allocate and (if ``seed`` is given) initialize a decoder stack."""
    config.validate()
    return MixerDecoder(config, seed)


def decoder_forward(state: DecoderState, config: StackConfig, params: MixerDecoder) -> Tensor:
    if params.config is not config and params.config != config:
        raise DimensionError("decoder parameters were built for a different StackConfig")
    return params.forward(state.queries, state.sampled_features)
