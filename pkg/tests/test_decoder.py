import numpy as np
import pytest

from lors import gradchecks
from lors.autodiff import DimensionError, Tensor, layer_norm, matmul, relu, transpose2d
from lors.budget import count_model, decoder_budget
from lors.decoder import (
    ConfigError,
    DecoderState,
    MixerDecoder,
    StackConfig,
    acm,
    asm,
    build_stack,
    decoder_forward,
    output_project,
    ramp_schedule,
)
from lors.dense import DenseAdaptive
from lors.params import AdaptiveLorsParam, StaticLorsParam, init_adaptive, init_static

TINY = StackConfig(n_layers=2, d_q=8, channels=4, points_in=4, points_out=8, groups=2, rank_adaptive=2, rank_static=2)


def norm(c):
    return Tensor(np.ones(c)), Tensor(np.zeros(c))


def perturb(model, rng, amount=0.3):
    for _, t in model.named_parameters():
        t.data += amount * rng.standard_normal(t.shape)


def inputs(cfg, rng, n=3):
    return Tensor(rng.standard_normal((n, cfg.d_q))), Tensor(rng.standard_normal((n, cfg.groups, cfg.points_in, cfg.channels)))


# -- config -----------------------------------------------------------------
def test_full_size_defaults():
    c = StackConfig()
    assert (c.d_q, c.channels, c.points_in, c.points_out, c.groups, c.n_layers) == (256, 64, 64, 128, 2, 6)
    assert (c.rank_adaptive, c.rank_static) == (16, 8)
    assert c.k_acm == c.k_asm == [1, 1, 2, 2, 3, 3]
    assert c.k_out == [1] * 6
    assert ramp_schedule(6) == [1, 1, 2, 2, 3, 3]


@pytest.mark.parametrize(
    "change",
    [dict(channels=0), dict(k_acm=[1, 1, 1]), dict(k_out=[1, -1]), dict(weight_mode="sparse"), dict(lors_mode="half"), dict(rank_adaptive=5)],
)
def test_invalid_config(change):
    with pytest.raises(ConfigError):
        TINY.replace(**change)


# -- acm / asm / output projection -----------------------------------------
def test_acm_zero_feature(rng):
    gen = DenseAdaptive(8, 4, 4, 1)
    gen.init(rng)
    out = acm(Tensor(np.zeros((4, 4))), Tensor(rng.standard_normal(8)), gen, 0, *norm(4))
    assert out.shape == (4, 4) and np.all(out.data == 0.0)


def test_acm_full_size_shape(rng):
    gen = AdaptiveLorsParam(256, 64, 64, 1, rank=16, groups=1)
    init_adaptive(gen, rng)
    out = acm(Tensor(rng.standard_normal((64, 64))), Tensor(rng.standard_normal(256)), gen, 0, *norm(64))
    assert out.shape == (64, 64)


def test_acm_dense_vs_lors_construction(rng):
    dense = DenseAdaptive(6, 4, 4, 1)
    dense.init(rng)
    dense.bias[0].data[...] = rng.standard_normal(16)
    lors = AdaptiveLorsParam(6, 4, 4, 1, rank=2, groups=2)
    init_adaptive(lors, rng)
    lors.shared_proj.data[...] = dense.proj[0].data
    lors.shared_bias.data[...] = dense.bias[0].data
    x, q = Tensor(rng.standard_normal((3, 5, 4))), Tensor(rng.standard_normal((3, 6)))
    a = acm(x, q, dense, 0, *norm(4)).data
    b = acm(x, q, lors, 0, *norm(4)).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_asm_full_size_shape(rng):
    gen = DenseAdaptive(16, 64, 128, 1)
    gen.init(rng)
    out = asm(Tensor(rng.standard_normal((64, 64))), Tensor(rng.standard_normal(16)), gen, 0, *norm(128))
    assert out.shape == (64, 128)


def test_asm_zero_feature(rng):
    gen = DenseAdaptive(8, 4, 8, 1)
    gen.init(rng)
    out = asm(Tensor(np.zeros((4, 4))), Tensor(rng.standard_normal(8)), gen, 0, *norm(8))
    assert np.all(out.data == 0.0)


def test_asm_composition(rng):
    gen = AdaptiveLorsParam(8, 4, 8, 1, rank=2, groups=1)
    init_adaptive(gen, rng)
    gen.E_proj[0].data[...] = rng.standard_normal(gen.E_proj[0].shape)
    x, q = Tensor(rng.standard_normal((2, 4, 5))), Tensor(rng.standard_normal((2, 8)))
    g, b = Tensor(rng.uniform(0.5, 1.5, 8)), Tensor(rng.standard_normal(8))
    by_hand = relu(layer_norm(matmul(transpose2d(x), gen.weight(0, q)), g, b))
    assert np.array_equal(asm(x, q, gen, 0, g, b).data, by_hand.data)


def test_mixer_shape_errors(rng):
    gen = DenseAdaptive(8, 4, 4, 1)
    with pytest.raises(DimensionError):
        acm(Tensor(np.zeros((4, 5))), Tensor(np.zeros(8)), gen, 0, *norm(4))
    with pytest.raises(DimensionError):
        asm(Tensor(np.zeros((5, 4))), Tensor(np.zeros(8)), gen, 0, *norm(4))


def test_output_project_zero_input(rng):
    p = StaticLorsParam(12, 5, 1, rank=2)
    init_static(p, rng)
    bias = Tensor(rng.standard_normal(5))
    assert np.array_equal(output_project(Tensor(np.zeros(12)), p, 0, bias).data, bias.data)
    assert np.all(output_project(Tensor(np.zeros(12)), p, 0).data == 0.0)


def test_output_project_zero_a_is_shared(rng):
    p = StaticLorsParam(12, 5, 2, rank=2, groups=2)
    init_static(p, rng)
    p.B[1].data[...] = rng.standard_normal(p.B[1].shape)
    y = Tensor(rng.standard_normal((3, 12)))
    assert np.array_equal(output_project(y, p, 1).data, y.data @ p.shared.data)


def test_output_project_length_error():
    p = StaticLorsParam(12, 5, 1, rank=2)
    with pytest.raises(DimensionError):
        output_project(Tensor(np.zeros(11)), p, 0)


def test_full_size_output_length():
    assert StackConfig().out_features == 16384


# -- full stack -------------------------------------------------------------
def test_empty_stack_returns_queries(rng):
    cfg = TINY.replace(n_layers=0, k_acm=[], k_asm=[], k_out=[])
    model = build_stack(cfg, seed=0)
    q, f = inputs(cfg, rng)
    assert np.array_equal(model(q, f).data, q.data)


def test_fresh_lors_equals_shared_only(rng):
    full = MixerDecoder(TINY, seed=4)
    shared = MixerDecoder(TINY.replace(lors_mode="shared_only"), seed=4)
    q, f = inputs(TINY, rng)
    assert np.array_equal(full(q, f).data, shared(q, f).data)


@pytest.mark.parametrize("perturbed", [False, True])
def test_dense_lors_transplant(rng, perturbed):
    cfg = TINY.replace(rank_adaptive=4, rank_static=8, k_acm=[1, 1], k_asm=[1, 1], k_out=[1, 1])
    lors = MixerDecoder(cfg, seed=3)
    if perturbed:
        perturb(lors, rng)
    dense = lors.to_dense()
    q, f = inputs(cfg, rng, n=5)
    np.testing.assert_allclose(dense(q, f).data, lors(q, f).data, rtol=0, atol=1e-10)


def test_transplant_with_ramp_groups(rng):
    lors = MixerDecoder(TINY.replace(k_acm=[1, 2], k_asm=[2, 0], k_out=[0, 3]), seed=0)
    perturb(lors, rng)
    q, f = inputs(TINY, rng)
    np.testing.assert_allclose(lors.to_dense()(q, f).data, lors(q, f).data, atol=1e-10)


def test_group_independence(rng):
    model = MixerDecoder(TINY, seed=1)
    perturb(model, rng)
    q, f = inputs(TINY, rng)
    xs = model.split_groups(f)
    before = [b.data.copy() for b in model.branches(0, q, xs)]
    zeroed = f.data.copy()
    zeroed[:, 1] = 0.0
    after = [b.data for b in model.branches(0, q, model.split_groups(Tensor(zeroed)))]
    assert np.array_equal(before[0], after[0])
    assert not np.array_equal(before[1], after[1])


def test_permutation_equivariance(rng):
    model = MixerDecoder(TINY, seed=2)
    perturb(model, rng)
    q, f = inputs(TINY, rng, n=6)
    perm = rng.permutation(6)
    out = model(q, f).data
    out_p = model(Tensor(q.data[perm]), Tensor(f.data[perm])).data
    np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-12)


def test_leading_axes_and_decoder_state(rng):
    model = MixerDecoder(TINY, seed=5)
    q = rng.standard_normal((2, 3, 8))
    feats = rng.standard_normal((2, 3, 4, 8))  # d_feat = g * C
    state = DecoderState.from_feature_source(q, feats, groups=2)
    assert state.sampled_features.shape == (2, 3, 2, 4, 4)
    assert np.array_equal(state.sampled_features.data[..., 1, :, :], feats[..., 4:])
    out = decoder_forward(state, TINY, model)
    assert out.shape == (2, 3, 8)
    flat = model(Tensor(q.reshape(6, 8)), Tensor(state.sampled_features.data.reshape(6, 2, 4, 4))).data
    np.testing.assert_allclose(out.data.reshape(6, 8), flat, atol=1e-12)


def test_forward_shape_errors(rng):
    model = MixerDecoder(TINY, seed=0)
    q, f = inputs(TINY, rng)
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((3, 7))), f)
    with pytest.raises(DimensionError):
        model(q, Tensor(np.zeros((3, 2, 4, 5))))
    with pytest.raises(DimensionError):
        DecoderState.from_feature_source(q.data, np.zeros((3, 4, 7)), groups=2)


def test_decoder_grad_check():
    report = gradchecks.run("decoder", seed=0)
    assert report.passed, report.format()


def test_full_size_count_matches_closed_form():
    cfg = StackConfig()
    model = build_stack(cfg)  # allocation only; counts do not need values
    counts = count_model(model)
    expected = decoder_budget(cfg)
    for name in ("acm", "asm", "out"):
        assert counts.component_weights(name) == expected[name]
    assert counts.by_role["shared"] + counts.by_role["private"] == sum(expected.values())


@pytest.mark.parametrize("n", [3, 6, 9, 12])
def test_reference_depths_constructible(n):
    cfg = StackConfig(n_layers=n, k_acm=ramp_schedule(n), k_asm=ramp_schedule(n), k_out=[1] * n)
    model = build_stack(cfg)
    assert count_model(model).weights == sum(decoder_budget(cfg).values())


def test_same_seed_identical():
    a, b = build_stack(TINY, seed=9), build_stack(TINY, seed=9)
    assert a.num_parameters() == b.num_parameters()
    for (_, x), (_, y) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(x.data, y.data)


def test_norm_init():
    model = MixerDecoder(TINY, seed=0)
    for i in range(TINY.n_layers):
        for g, b in model.acm_norm[i] + model.asm_norm[i]:
            assert np.all(g.data == 1.0) and np.all(b.data == 0.0)
