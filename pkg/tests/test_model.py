import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agg.errors import ConfigurationError, InvalidMaskError
from agg.model import (AGG, ModelConfig, attention_head, conditional_attention, count_parameters,
                       encoder_block, generator_block, init_params, multi_head_self_attention,
                       parameter_breakdown)
from agg.numerics import ops
from agg.numerics.gradcheck import finite_diff_check
from agg.numerics.tensor import Parameter, ParameterStore

from conftest import random_batch, tiny_config


def _np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _np_layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + eps)


def _attn_store(r, D, heads, prefix="blk"):
    dk = D // heads
    store = ParameterStore()
    for j in range(heads):
        for name in ("WQ", "WK", "WV"):
            store.new(f"{prefix}.head.{j}.{name}", r.normal(size=(D, dk)))
    store.new(f"{prefix}.WO", r.normal(size=(heads * dk, D)))
    return store


def _permute_nodes(batch, perm):
    return dataclasses.replace(batch, y=batch.y[:, perm], t=batch.t[:, perm],
                               disc=batch.disc[:, perm], cont=batch.cont[:, perm],
                               mask=batch.mask[:, perm])


# attention head -----------------------------------------------------------------

def test_single_node_attention():
    r = np.random.default_rng(0)
    H, Wq, Wk, Wv = r.normal(size=(1, 4)), r.normal(size=(4, 2)), r.normal(size=(4, 2)), r.normal(size=(4, 3))
    out, w = attention_head(H, H, Wq, Wk, Wv)
    np.testing.assert_array_equal(w.value, [[1.0]])
    np.testing.assert_allclose(out.value, H @ Wv, atol=1e-15)


def test_zero_query_gives_mean_of_real_values():
    r = np.random.default_rng(1)
    H, Wk, Wv = r.normal(size=(5, 4)), r.normal(size=(4, 2)), r.normal(size=(4, 3))
    mask = np.array([1, 1, 0, 1, 0], dtype=bool)
    out, w = attention_head(H, H, np.zeros((4, 2)), Wk, Wv, pad_mask=mask)
    np.testing.assert_allclose(w.value, np.tile(mask / 3.0, (5, 1)), atol=1e-15)
    np.testing.assert_allclose(out.value, np.tile((H @ Wv)[mask].mean(axis=0), (5, 1)), atol=1e-12)


def test_two_node_scalar_attention_hand_oracle():
    h = np.array([[0.5], [-1.5]])
    wq, wk, wv = 2.0, 0.7, -3.0
    out, w = attention_head(h, h, [[wq]], [[wk]], [[wv]])
    for i in range(2):
        s = [h[i, 0] * wq * h[j, 0] * wk for j in range(2)]  # d_k = 1, so no rescaling
        e = [math.exp(v) for v in s]
        a = [v / sum(e) for v in e]
        np.testing.assert_allclose(w.value[i], a, atol=1e-9)
        assert out.value[i, 0] == pytest.approx(sum(a[j] * h[j, 0] * wv for j in range(2)), abs=1e-9)


def test_all_keys_padded_raises():
    H = np.ones((2, 2))
    with pytest.raises(InvalidMaskError):
        attention_head(H, H, np.eye(2), np.eye(2), np.eye(2), pad_mask=np.zeros(2, bool))


def test_attention_weights_are_stochastic_and_zero_on_padding():
    r = np.random.default_rng(2)
    store = _attn_store(r, 6, 3)
    mask = np.array([[1, 1, 1, 0], [1, 0, 0, 0]], dtype=bool)
    _, w = multi_head_self_attention(r.normal(size=(2, 4, 6)), store, "blk", 3, mask,
                                     return_weights=True)
    np.testing.assert_allclose(w.value.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(w.value[0, :, :, 3] == 0.0)
    assert np.all(w.value[1, :, :, 1:] == 0.0)


# multi-head self-attention --------------------------------------------------------

def test_one_head_with_identity_output_projection():
    r = np.random.default_rng(3)
    store = _attn_store(r, 4, 1)
    store["blk.WO"].value[...] = np.eye(4)
    H = r.normal(size=(5, 4))
    single, _ = attention_head(H, H, store["blk.head.0.WQ"], store["blk.head.0.WK"],
                               store["blk.head.0.WV"])
    np.testing.assert_allclose(multi_head_self_attention(H, store, "blk", 1).value, single.value,
                               atol=1e-12)


def test_two_heads_against_explicit_concatenation():
    r = np.random.default_rng(4)
    store = _attn_store(r, 4, 2)
    H = r.normal(size=(3, 4))
    mask = np.array([True, True, False])
    heads = []
    for j in range(2):
        W = [store[f"blk.head.{j}.{n}"].value for n in ("WQ", "WK", "WV")]
        Q, K, V = H @ W[0], H @ W[1], H @ W[2]
        s = Q @ K.T / math.sqrt(2.0)
        s[:, ~mask] = -np.inf
        heads.append(_np_softmax(s) @ V)
    expected = np.concatenate(heads, axis=-1) @ store["blk.WO"].value
    out = multi_head_self_attention(H, store, "blk", 2, mask).value
    np.testing.assert_allclose(out, expected, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**16))
def test_self_attention_is_permutation_equivariant(L, seed):
    r = np.random.default_rng(seed)
    store = _attn_store(r, 4, 2)
    H = r.normal(size=(L, 4))
    perm = r.permutation(L)
    a = multi_head_self_attention(H, store, "blk", 2).value
    b = multi_head_self_attention(H[perm], store, "blk", 2).value
    np.testing.assert_allclose(b, a[perm], atol=1e-9)


# encoder block ----------------------------------------------------------------------

REF = ModelConfig(d_y=1, vocab_sizes=(12,), n_continuous=2, dropout=0.0)


def test_encoder_block_preserves_shape():
    store = init_params(REF, seed=0)
    H = np.random.default_rng(0).normal(size=(7, 80))
    assert encoder_block(H, store, "encoder.0", REF).shape == (7, 80)


def test_stacked_encoder_blocks_deterministic():
    H = np.random.default_rng(1).normal(size=(2, 5, 80))

    def run():
        store = init_params(REF, seed=9)
        x = H
        for i in range(2):
            x = encoder_block(x, store, f"encoder.{i}", REF)
        return x.value

    assert np.array_equal(run(), run())


def test_encoder_block_finite_differences():
    cfg = tiny_config()
    store = init_params(cfg, seed=1)
    H = np.random.default_rng(2).normal(size=(4, cfg.d_encoder))
    params = [p for p in store if p.name.startswith("encoder.0.")]
    w = np.random.default_rng(3).normal(size=(4, cfg.d_encoder))
    assert finite_diff_check(lambda: ops.sum(ops.mul(encoder_block(H, store, "encoder.0", cfg), w)),
                             params) < 1e-4


# conditional attention and generator ------------------------------------------------

def test_conditional_attention_single_node():
    cfg = tiny_config()
    store = init_params(cfg, seed=4)
    r = np.random.default_rng(4)
    H, g = r.normal(size=(1, cfg.d_encoder)), r.normal(size=(cfg.d_g,))
    out = conditional_attention(g, H, store, cfg.heads).value
    h_bar = _np_layer_norm(H)
    WV = np.concatenate([store[f"generator.head.{j}.WV"].value for j in range(cfg.heads)], axis=-1)
    np.testing.assert_allclose(out, (h_bar @ WV)[0], atol=1e-12)


def test_conditional_attention_zero_query_is_uniform():
    cfg = tiny_config()
    store = init_params(cfg, seed=5)
    store["generator.WG"].value[...] = 0.0
    r = np.random.default_rng(5)
    H, g = r.normal(size=(4, cfg.d_encoder)), r.normal(size=(cfg.d_g,))
    mask = np.array([1, 0, 1, 1], dtype=bool)
    _, w = conditional_attention(g, H, store, cfg.heads, mask, return_weights=True)
    np.testing.assert_allclose(w.value[:, 0], np.tile(mask / 3.0, (cfg.heads, 1)), atol=1e-15)


def test_conditional_attention_two_node_hand_oracle():
    cfg = tiny_config()
    store = init_params(cfg, seed=6)
    r = np.random.default_rng(6)
    H, g = r.normal(size=(2, cfg.d_encoder)), r.normal(size=(cfg.d_g,))
    g_bar, h_bar = _np_layer_norm(g), _np_layer_norm(H)
    dk = cfg.d_k
    G = g_bar @ store["generator.WG"].value
    expected = []
    for j in range(cfg.heads):
        K = h_bar @ store[f"generator.head.{j}.WK"].value
        V = h_bar @ store[f"generator.head.{j}.WV"].value
        a = _np_softmax(G[j * dk:(j + 1) * dk] @ K.T / math.sqrt(dk))
        expected.append(a @ V)
    out = conditional_attention(g, H, store, cfg.heads).value
    np.testing.assert_allclose(out, np.concatenate(expected), atol=1e-9)


def test_generator_scalar_output_and_finite_differences():
    cfg = tiny_config(generator_dim=1)
    store = init_params(cfg, seed=7)
    r = np.random.default_rng(7)
    H, g = r.normal(size=(3, cfg.d_encoder)), r.normal(size=(cfg.d_g,))
    assert generator_block(g, H, store, cfg).shape == (1,)
    cfg = tiny_config()
    store = init_params(cfg, seed=7)
    params = [p for p in store if p.name.startswith("generator.")]
    w = r.normal(size=(cfg.d_gen,))
    assert finite_diff_check(lambda: ops.sum(ops.mul(generator_block(g, H, store, cfg), w)),
                             params) < 1e-4


# full model -------------------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**16))
def test_model_permutation_invariance(L, seed):
    r = np.random.default_rng(seed)
    model = AGG(tiny_config(), seed=seed)
    batch = random_batch(r, model.config, B=2, L=L, n_real=L)
    perm = r.permutation(L)
    shuffled = _permute_nodes(batch, perm)
    np.testing.assert_allclose(model.forward_impute(shuffled).value,
                               model.forward_impute(batch).value, atol=1e-9)
    np.testing.assert_allclose(model.encode(shuffled).value, model.encode(batch).value[:, perm],
                               atol=1e-9)


def test_untrained_model_finite_on_100_nodes(rng):
    cfg = ModelConfig(d_y=1, vocab_sizes=(12,), n_continuous=2)
    model = AGG(cfg, seed=0)
    assert np.all(np.isfinite(model.forward_impute(random_batch(rng, cfg, 1, 100, 100)).value))


@pytest.mark.parametrize("uniform", [True, False])
def test_duplicating_every_node_leaves_output_unchanged(rng, uniform):
    model = AGG(tiny_config(), seed=8)
    if uniform:
        for p in model.params:
            if p.name.endswith(("WQ", "WG")):
                p.value[...] = 0.0
    b = random_batch(rng, model.config, 3, 5, n_real=5)
    doubled = dataclasses.replace(b, **{k: np.concatenate([getattr(b, k)] * 2, axis=1)
                                        for k in ("y", "t", "disc", "cont", "mask")})
    np.testing.assert_allclose(model.forward_impute(doubled).value, model.forward_impute(b).value,
                               atol=1e-9)


def test_future_condition_accepted(rng, tiny_model):
    b = random_batch(rng, tiny_model.config, 2, 6)
    future = dataclasses.replace(b, tau_g=np.array([-1.0, -3.5]))
    out = tiny_model.forward_impute(future).value
    assert out.shape == (2, 1) and np.all(np.isfinite(out))
    assert not np.allclose(out, tiny_model.forward_impute(b).value)


@settings(max_examples=20, deadline=None)
@given(st.integers(-2**16, 2**16), st.integers(0, 2**10))
def test_time_translation_bitwise(shift_num, seed):
    r = np.random.default_rng(seed)
    model = AGG(tiny_config(), seed=seed)
    b = random_batch(r, model.config, 2, 6)
    b = dataclasses.replace(b, t=np.round(b.t * 64) / 64, t_ref=np.round(b.t_ref * 64) / 64)
    shift = shift_num / 128.0
    moved = dataclasses.replace(b, t=b.t + shift, t_ref=b.t_ref + shift)
    assert np.array_equal(model.forward_impute(moved).value, model.forward_impute(b).value)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 8), st.integers(1, 7), st.integers(0, 2**16))
def test_padding_neutrality(n, extra, seed):
    r = np.random.default_rng(seed)
    model = AGG(tiny_config(), seed=seed)
    b = random_batch(r, model.config, 2, n, n_real=n)

    def pad(a, fill):
        widths = [(0, 0)] * a.ndim
        widths[1] = (0, extra)
        return np.pad(a, widths, constant_values=fill)

    padded = dataclasses.replace(b, y=pad(b.y, 0.0), disc=pad(b.disc, 0), cont=pad(b.cont, 0.0),
                                 mask=pad(b.mask, False),
                                 t=np.concatenate([b.t, np.repeat(b.t_ref[:, None], extra, 1)], 1))
    np.testing.assert_allclose(model.forward_impute(padded).value, model.forward_impute(b).value,
                               atol=1e-9)


def test_full_model_finite_differences(rng):
    model = AGG(tiny_config(), seed=11)
    b = random_batch(rng, model.config, 1, 4, n_real=4)
    loss = lambda: ops.mean(ops.square(ops.sub(model.forward_impute(b), b.target)))
    assert finite_diff_check(loss, list(model.params)) < 1e-4


def test_zero_head_gives_probability_half(rng):
    model = AGG(tiny_config(task="classification"), seed=12)
    model.params["head.W"].value[...] = 0.0
    p = model.classify(random_batch(rng, model.config, 3, 6)).value
    np.testing.assert_array_equal(p, np.full(3, 0.5))


def test_classification_deterministic_at_eval(rng):
    model = AGG(tiny_config(task="classification", dropout=0.3), seed=13)
    b = random_batch(rng, model.config, 4, 6)
    p = model.classify(b).value
    assert p.shape == (4,) and np.all((p > 0) & (p < 1))
    assert np.array_equal(p, model.classify(b).value)


# configuration and parameter counts -------------------------------------------------

def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        tiny_config(heads=4, value_dim=3)


def test_single_linear_layer_count():
    assert ParameterStore([Parameter("W", np.zeros((2, 3)))]).count() == 6


def test_extra_encoder_layer_adds_one_block():
    cfg = ModelConfig(d_y=1, vocab_sizes=(5,), n_continuous=1, heads=4)
    D, l, dk = cfg.d_encoder, cfg.heads, cfg.d_k
    block = 3 * l * D * dk + l * dk * D + (D * l * D + l * D + l * D * D + D) + 4 * D
    one = count_parameters(cfg.replace(encoder_layers=1))
    assert count_parameters(cfg.replace(encoder_layers=2)) - one == block
    assert count_parameters(cfg.replace(encoder_layers=4)) - count_parameters(cfg) == 2 * block


def test_breakdown_sums_to_count_and_matches_init():
    cfg = tiny_config()
    breakdown = parameter_breakdown(cfg)
    assert sum(breakdown.values()) == count_parameters(cfg) == init_params(cfg).count()


def test_reference_configuration_within_band():
    cfg = ModelConfig(d_y=1, vocab_sizes=(12, 11), n_continuous=1)
    assert cfg.d_encoder == 80
    assert 340_000 <= count_parameters(cfg) <= 420_000
