"""Finite-difference gradient checks for the four standard targets.

Each target is a small instance whose parameters get a seeded perturbation
after initialization, so zero-initialized factors (A, E_proj) carry nonzero
values and every path contributes to the loss.
"""

from __future__ import annotations

import numpy as np

from .autodiff import CheckReport, Tensor, cross_entropy, grad_check, matmul, mse_loss
from .decoder import MixerDecoder, StackConfig
from .encoder import AllocationPlan, Encoder, EncoderConfig
from .params import AdaptiveLorsParam, StaticLorsParam, adaptive_fused_weight, init_adaptive, init_static, static_fused_weight

TARGETS = ("lors-static", "lors-adaptive", "decoder", "encoder")


def _perturb(named, rng, amount=0.3):
    for _, p in named:
        p.data += amount * rng.standard_normal(p.shape)


def build(target: str, seed: int = 0):
    """Return ``(loss_fn, named_params)`` for ``target``."""
    rng = np.random.default_rng(seed)
    if target == "lors-static":
        p = StaticLorsParam(d=5, h=4, n_layers=3, rank=2, groups=[1, 2, 0])
        init_static(p, rng)
        named = list(p.named_parameters("static"))
        _perturb(named, rng)
        xs = [Tensor(rng.standard_normal((6, 5))) for _ in range(3)]
        ys = [rng.standard_normal((6, 4)) for _ in range(3)]

        def f():
            total = mse_loss(matmul(xs[0], static_fused_weight(p, 0)), ys[0])
            for i in (1, 2):
                total = total + mse_loss(matmul(xs[i], static_fused_weight(p, i)), ys[i])
            return total

        return f, named
    if target == "lors-adaptive":
        p = AdaptiveLorsParam(d_q=4, d=3, h=4, n_layers=2, rank=2, groups=[1, 2])
        init_adaptive(p, rng)
        named = list(p.named_parameters("adaptive"))
        _perturb(named, rng)
        q = Tensor(rng.standard_normal((5, 4)))
        x = Tensor(rng.standard_normal((5, 2, 3)))
        probe = rng.standard_normal((5, 2, 4))

        def f():
            out = matmul(x, adaptive_fused_weight(p, 0, q))
            out = matmul(out, adaptive_fused_weight(p, 1, q).T)
            return mse_loss(matmul(out, adaptive_fused_weight(p, 1, q)), probe)

        return f, named
    if target == "decoder":
        cfg = StackConfig(n_layers=2, d_q=8, channels=4, points_in=4, points_out=8, groups=2, rank_adaptive=2, rank_static=2)
        model = MixerDecoder(cfg, seed=rng)
        named = list(model.named_parameters())
        _perturb(named, rng)
        q = Tensor(rng.standard_normal((3, 8)))
        feats = Tensor(rng.standard_normal((3, 2, 4, 4)))
        target_q = rng.standard_normal((3, 8))
        return (lambda: mse_loss(model(q, feats), target_q)), named
    if target == "encoder":
        cfg = EncoderConfig(
            depth=2, model_dim=16, heads=2, ffn_dim=32, patch_count=8, class_count=3,
            plan=AllocationPlan([1, 2], [2, 1], rank=4), weight_mode="lors",
        )
        model = Encoder(cfg, seed=rng)
        named = list(model.named_parameters())
        _perturb(named, rng)
        x = Tensor(rng.standard_normal((2, 8, 16)))
        labels = rng.integers(0, 3, size=2)
        return (lambda: cross_entropy(model(x), labels)), named
    raise ValueError(f"unknown target {target!r}; choose from {TARGETS}")


def run(target: str, seed: int = 0, max_entries: int | None = 24) -> CheckReport:
    f, named = build(target, seed)
    return grad_check(f, named, h=1e-5, tolerance=1e-4, max_entries=max_entries, seed=seed)

