import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paraformer.autodiff import ConfigError, ShapeError, Tensor, backward, no_grad
from paraformer.blocks import (
    BlockParams, assemble_patches, classify_head, encoder_block_forward, extract_patches, ffn_forward,
    init_block, mha_forward, predict,
)
from paraformer.duat import random_block


def zero_block(d, heads):
    dh = d // heads
    z = lambda *s: Tensor(np.zeros(s))
    return BlockParams(z(heads, d, dh), z(heads, d, dh), z(heads, d, dh), z(d, d), z(d, 4), z(4), z(4, d), z(d))


def test_single_token_attention_is_value_projection(rng):
    p = random_block(rng, 4, 2, 8)
    x = rng.standard_normal((1, 4))
    with no_grad():
        out = mha_forward(Tensor(x), p).data
    wv = np.concatenate([p.wv.data[h] for h in range(2)], axis=1)
    np.testing.assert_allclose(out, x @ wv @ p.wo.data, atol=1e-13)


def test_zero_queries_keys_average_values(rng):
    p = random_block(rng, 4, 2, 8)
    p.wq.data[:] = 0.0
    p.wk.data[:] = 0.0
    x = rng.standard_normal((5, 4))
    with no_grad():
        out = mha_forward(Tensor(x), p).data
    wv = np.concatenate([p.wv.data[h] for h in range(2)], axis=1)
    mean_row = x.mean(axis=0, keepdims=True) @ wv @ p.wo.data
    np.testing.assert_allclose(out, np.repeat(mean_row, 5, axis=0), atol=1e-13)


def test_zero_block_is_identity(rng):
    p = zero_block(4, 2)
    x = rng.standard_normal((3, 4))
    with no_grad():
        out = encoder_block_forward(Tensor(x), p, "strict").data
    np.testing.assert_array_equal(out, x)


def test_ffn_is_position_wise(rng):
    p = random_block(rng, 4, 2, 8)
    x = rng.standard_normal((6, 4))
    with no_grad():
        whole = ffn_forward(Tensor(x), p).data
        rows = np.concatenate([ffn_forward(Tensor(x[i:i + 1]), p).data for i in range(6)])
    np.testing.assert_allclose(whole, rows, atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(5)), st.sampled_from(["strict", "practical"]))
def test_block_is_permutation_equivariant(perm, variant):
    rng = np.random.default_rng(7)
    p = init_block(rng, 4, 2, 8, variant, np.float64)
    x = rng.standard_normal((5, 4))
    perm = np.asarray(perm)
    with no_grad():
        a = encoder_block_forward(Tensor(x), p, variant).data[perm]
        b = encoder_block_forward(Tensor(x[perm]), p, variant).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_practical_block_needs_layer_norm(rng):
    p = random_block(rng, 4, 2, 8)
    with pytest.raises(ConfigError):
        encoder_block_forward(Tensor(np.zeros((2, 4))), p, "practical")


def test_unknown_variant_rejected(rng):
    with pytest.raises(ConfigError):
        encoder_block_forward(Tensor(np.zeros((2, 4))), random_block(rng, 4, 2, 8), "fancy")


@pytest.mark.parametrize("variant", ["strict", "practical"])
def test_every_block_parameter_receives_gradient(rng, variant):
    p = init_block(rng, 4, 2, 8, variant, np.float64)
    x = Tensor(rng.standard_normal((3, 4)))
    loss = (encoder_block_forward(x, p, variant) * Tensor(rng.standard_normal((3, 4)))).sum()
    params = [t for _, t in p.named()]
    backward(loss, params)
    for name, t in p.named():
        assert np.any(t.grad != 0), name


@pytest.mark.parametrize("hw,patch,count", [((32, 32), 4, 64), ((8, 8), 4, 4), ((6, 9), 3, 6)])
def test_patch_count(hw, patch, count):
    out = extract_patches(np.zeros((3,) + hw), patch)
    assert out.shape == (count, 3 * patch * patch)


def test_zero_image_gives_zero_patches():
    assert not extract_patches(np.zeros((2, 3, 8, 8)), 4).any()


def test_patch_layout_channel_major():
    img = np.arange(3 * 4 * 4, dtype=float).reshape(3, 4, 4)
    first = extract_patches(img, 2)[0]
    np.testing.assert_array_equal(first[:4], [0, 1, 4, 5])
    np.testing.assert_array_equal(first[4:8], [16, 17, 20, 21])
    np.testing.assert_array_equal(extract_patches(img, 2)[1][:4], [2, 3, 6, 7])


def test_patch_round_trip(rng):
    img = rng.standard_normal((2, 3, 12, 8))
    back = assemble_patches(extract_patches(img, 4), 3, 12, 8, 4)
    np.testing.assert_array_equal(back, img)


def test_indivisible_patch_rejected():
    with pytest.raises(ShapeError):
        extract_patches(np.zeros((3, 10, 10)), 4)


def test_head_reads_class_token_only(rng):
    tokens = rng.standard_normal((5, 4))
    w, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    out = classify_head(Tensor(tokens), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, tokens[0] @ w + b)
    tokens[1:] += 100.0
    np.testing.assert_allclose(classify_head(Tensor(tokens), Tensor(w), Tensor(b)).data, out)


def test_predict_ties_pick_lowest_index():
    np.testing.assert_array_equal(predict(np.array([[1.0, 3.0, 3.0], [2.0, 2.0, 2.0]])), [1, 0])


def test_full_block_gradients_match_finite_differences(rng):
    from paraformer.autodiff import grad_check_many

    for variant in ("strict", "practical"):
        p = init_block(rng, 4, 2, 8, variant, np.float64)
        for _, t in p.named():
            t.data = t.data + 0.2 * rng.standard_normal(t.shape)
        x = Tensor(rng.standard_normal((3, 4)))
        target = Tensor(rng.standard_normal((3, 4)))
        err = grad_check_many(lambda: (encoder_block_forward(x, p, variant) * target).sum(),
                              [t for _, t in p.named()])
        assert err < 1e-4, variant


def test_ffn_identity_weights_give_sigmoid(rng):
    p = zero_block(3, 1)
    p.w1, p.b1, p.w2, p.b2 = Tensor(np.eye(3)), Tensor(np.zeros(3)), Tensor(np.eye(3)), Tensor(np.zeros(3))
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(ffn_forward(Tensor(x), p, "sigmoid").data, 1 / (1 + np.exp(-x)), atol=1e-15)


def test_ffn_zero_output_weights_give_bias_rows(rng):
    p = random_block(rng, 4, 2, 8)
    p.w2.data[:] = 0.0
    out = ffn_forward(Tensor(rng.standard_normal((5, 4))), p).data
    np.testing.assert_array_equal(out, np.tile(p.b2.data, (5, 1)))


def test_practical_block_on_constant_rows(rng):
    p = init_block(rng, 4, 2, 8, "practical", np.float64)
    x = np.full((3, 4), 2.0)
    with no_grad():
        out = encoder_block_forward(Tensor(x), p, "practical").data
    # both norms see constant rows and emit beta = 0, so attention adds nothing
    ffn_of_zero = ffn_forward(Tensor(np.zeros((1, 4))), p, "gelu").data
    np.testing.assert_allclose(out, x + ffn_of_zero, atol=1e-12)


def test_embedding_shape_and_zero_case(rng):
    from paraformer.blocks import init_embed, patch_embed

    e = init_embed(rng, 48, 8, 65)
    assert patch_embed(rng.standard_normal((3, 32, 32)), e, 4).shape == (65, 8)
    e.pos.data[:] = 0.0
    e.cls.data[:] = rng.standard_normal(8)
    e.proj_b.data[:] = rng.standard_normal(8)
    out = patch_embed(np.zeros((3, 32, 32)), e, 4).data
    np.testing.assert_array_equal(out[0], e.cls.data)
    np.testing.assert_array_equal(out[1:], np.tile(e.proj_b.data, (64, 1)))


def test_head_zero_weights_and_selector(rng):
    tokens = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)
    np.testing.assert_array_equal(classify_head(Tensor(tokens), Tensor(np.zeros((4, 4))), Tensor(b)).data, b)
    sel = classify_head(Tensor(tokens), Tensor(np.eye(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(sel, tokens[0])
