import numpy as np
import pytest

from paraformer.autodiff import ConfigError, Tensor, no_grad
from paraformer.blocks import ffn_forward, mha_forward
from paraformer.duat import (
    CapacityError, UnquantifiedDepthError, bias_recursion_check, bias_uat_layers, degrees_of_freedom,
    expand_multi_layer, expand_single_layer, lift_ffn, lift_layer, lift_mha, random_block,
    run_verification, strict_stack_forward, unvec, vec, _act,
)


def test_vec_is_column_stacking():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(vec(x), [1, 3, 5, 2, 4, 6])
    np.testing.assert_array_equal(unvec(vec(x), 3, 2), x)


def test_kron_identity_holds_for_vec(rng):
    a, x, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(vec(a @ x @ b), np.kron(b.T, a) @ vec(x), atol=1e-13)


def test_zero_values_make_attention_lift_identity(rng):
    p = random_block(rng, 4, 2, 8)
    p.wv.data[:] = 0.0
    x = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(lift_mha(x, p), np.eye(12))
    np.testing.assert_array_equal(lift_mha(x, p, include_residual=False), np.zeros((12, 12)))


def test_single_token_lift_is_kron_of_value_projection(rng):
    p = random_block(rng, 4, 2, 8)
    x = rng.standard_normal((1, 4))
    wv = np.concatenate([p.wv.data[h] for h in range(2)], axis=1)
    np.testing.assert_allclose(lift_mha(x, p, False), (wv @ p.wo.data).T, atol=1e-13)


@pytest.mark.parametrize("s,d,heads,dff", [(1, 4, 2, 8), (3, 4, 2, 8), (5, 6, 3, 4), (4, 8, 1, 16)])
def test_lifts_match_direct_forward(rng, s, d, heads, dff):
    for _ in range(5):
        p = random_block(rng, d, heads, dff)
        x = rng.standard_normal((s, d))
        with no_grad():
            mha = mha_forward(Tensor(x), p).data
            ffn = ffn_forward(Tensor(x), p).data
        assert np.max(np.abs(lift_mha(x, p, False) @ vec(x) - vec(mha))) < 1e-10
        w2, b2, w3, b3 = lift_ffn(p, s)
        assert np.max(np.abs(w3 @ _act(w2 @ vec(x) + b2, "sigmoid") + b3 - vec(ffn))) < 1e-10


@pytest.mark.parametrize("depth,tol", [(1, 1e-9), (2, 1e-8), (3, 1e-7)])
def test_expansion_matches_stack(rng, depth, tol):
    for _ in range(5):
        layers = [random_block(rng, 4, 2, 8) for _ in range(depth)]
        x = rng.standard_normal((3, 4))
        direct = strict_stack_forward(x, layers)[-1]
        if depth == 1:
            value, _ = expand_single_layer(x, layers[0])
        else:
            value, state = expand_multi_layer(x, layers)
            assert bias_recursion_check(x, layers, state) < 1e-8
        assert np.max(np.abs(value - vec(direct))) < tol


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_one_activation_term_per_block(rng, depth):
    layers = [random_block(rng, 4, 2, 8) for _ in range(depth)]
    _, state = expand_multi_layer(rng.standard_normal((2, 4)), layers)
    assert state.n_terms == depth
    assert len(state.W2) == len(state.b2) == depth


def test_gelu_expansion_also_exact(rng):
    layers = [random_block(rng, 4, 2, 8) for _ in range(2)]
    x = rng.standard_normal((3, 4))
    value, _ = expand_multi_layer(x, layers, "gelu")
    assert np.max(np.abs(value - vec(strict_stack_forward(x, layers, "gelu")[-1]))) < 1e-8


def test_lifted_weights_depend_on_input_but_ffn_lift_does_not(rng):
    p = random_block(rng, 4, 2, 8)
    a = lift_layer(rng.standard_normal((3, 4)), p)
    b = lift_layer(rng.standard_normal((3, 4)), p)
    assert np.max(np.abs(a.W1 - b.W1)) > 1e-3
    assert np.max(np.abs(a.W2 - b.W2)) > 1e-3
    np.testing.assert_array_equal(a.ffn_in, b.ffn_in)
    np.testing.assert_array_equal(a.W3, b.W3)


@pytest.mark.parametrize("m,layers,dof", [(1, 24, 48), (6, 6, 15), (2, 24, 72), (3, 24, 72), (6, 24, 60),
                                          (1, 1, 2), (2, 2, 6), (3, 3, 9)])
def test_degrees_of_freedom(m, layers, dof):
    assert degrees_of_freedom(m, layers) == dof


@pytest.mark.parametrize("m", [4, 5, 12])
def test_unquantified_depth(m):
    with pytest.raises(UnquantifiedDepthError, match="not quantified"):
        degrees_of_freedom(m, 24)


def test_layers_must_split_into_branches():
    with pytest.raises(ConfigError):
        degrees_of_freedom(6, 8)


@pytest.mark.parametrize("m,branches,per,total", [(1, 24, [], 0), (2, 12, [1, 2], 36), (3, 8, [1, 2, 3], 48),
                                                  (6, 4, [1, 2, 3, 4, 5, 6], 84), (6, 1, [1, 2, 3, 4, 5, 6], 21)])
def test_bias_layer_counts(m, branches, per, total):
    assert bias_uat_layers(m, branches) == (per, total)


def test_capacity_cap(rng):
    p = random_block(rng, 32, 2, 64)
    with pytest.raises(CapacityError, match="S\\*d = 640"):
        lift_mha(np.zeros((20, 32)), p)
    with pytest.raises(CapacityError, match="S\\*d_ff"):
        lift_ffn(p, 10)
    with pytest.raises(CapacityError):
        run_verification(s=20, d=30)


def test_verification_report():
    report = run_verification(seeds=3)
    assert report.passed
    names = [r.construct for r in report.rows]
    assert {"lift_mha", "lift_ffn", "expand_1", "expand_2", "expand_3", "bias_recursion"} <= set(names)
    assert "PASS" in report.to_text()
    assert not run_verification(seeds=1, depths=(1,), tolerance=0.0).passed


def test_single_token_ffn_lift_is_raw_matrices(rng):
    p = random_block(rng, 4, 2, 8)
    w2, b2, w3, b3 = lift_ffn(p, 1)
    np.testing.assert_array_equal(w2, p.w1.data.T)
    np.testing.assert_array_equal(w3, p.w2.data.T)
    np.testing.assert_array_equal(b2, p.b1.data)
    np.testing.assert_array_equal(b3, p.b2.data)


def test_zero_ffn_weights_give_constant_output(rng):
    p = random_block(rng, 4, 2, 8)
    p.w1.data[:] = 0.0
    w2, b2, w3, b3 = lift_ffn(p, 3)
    outs = [w3 @ _act(w2 @ vec(rng.standard_normal((3, 4))) + b2, "sigmoid") + b3 for _ in range(3)]
    np.testing.assert_allclose(outs[0], outs[1], atol=0)
    np.testing.assert_allclose(outs[0], np.kron(p.b2.data + _act(p.b1.data, "sigmoid") @ p.w2.data, np.ones(3)),
                               atol=1e-14)


def test_zero_attention_projections_leave_residual_plus_ffn(rng):
    p = random_block(rng, 4, 2, 8)
    for t in (p.wq, p.wk, p.wv, p.wo):
        t.data[:] = 0.0
    x = rng.standard_normal((3, 4))
    value, layer = expand_single_layer(x, p)
    np.testing.assert_array_equal(layer.W1, np.eye(12))
    w2, b2, w3, b3 = lift_ffn(p, 3)
    np.testing.assert_allclose(value, vec(x) + w3 @ _act(w2 @ vec(x) + b2, "sigmoid") + b3, atol=1e-14)


def test_all_zero_block_expands_to_identity(rng):
    p = random_block(rng, 4, 2, 8)
    for _, t in p.named():
        t.data[:] = 0.0
    x = rng.standard_normal((3, 4))
    value, _ = expand_single_layer(x, p)
    np.testing.assert_array_equal(value, vec(x))


def test_depth_one_recursion_matches_single_layer(rng):
    p = random_block(rng, 4, 2, 8)
    x = rng.standard_normal((3, 4))
    single, _ = expand_single_layer(x, p)
    multi, _ = expand_multi_layer(x, [p])
    np.testing.assert_allclose(multi, single, atol=1e-14)
