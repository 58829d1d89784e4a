import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paraformer.autodiff import ConfigError, ShapeError, backward, cross_entropy
from paraformer.models import (
    ModelSpec, aggregate, branch_forward, build, embed_tokens, forward, forward_batch, forward_serial,
    logits_tensor, param_count,
)
from tests.conftest import tiny_spec


@pytest.mark.parametrize("name,topology,depth,branches", [
    ("para-former-1-6", "parallel", 1, 6), ("Para-Former-6-1", "parallel", 6, 1), ("vit-8", "serial", 8, 1),
])
def test_name_grammar(name, topology, depth, branches):
    spec = ModelSpec.from_name(name)
    assert (spec.topology, spec.depth, spec.branches) == (topology, depth, branches)
    assert spec.name == name.lower()


@pytest.mark.parametrize("bad", ["para-former-1", "vit", "resnet-18", "para-former-0-2"])
def test_bad_names(bad):
    with pytest.raises(ConfigError):
        ModelSpec.from_name(bad)


def test_spec_validation_collects_problems():
    with pytest.raises(ConfigError, match="heads.*patch"):
        ModelSpec(dim=10, heads=4, patch=5)


def test_spec_text_round_trip():
    spec = tiny_spec("vit-3", aggregation="mean", seed=9)
    assert ModelSpec.from_text(spec.to_text()) == spec


@pytest.mark.parametrize("variant", ["strict", "practical"])
@pytest.mark.parametrize("m", [1, 3])
def test_single_branch_equals_serial(variant, m, rng):
    par, ser = build(tiny_spec(f"para-former-{m}-1", variant=variant)), build(tiny_spec(f"vit-{m}", variant=variant))
    img = rng.standard_normal((3, 8, 8))
    assert np.array_equal(forward(par, img), forward(ser, img))
    assert np.array_equal(forward_serial(par, img), forward(ser, img))


def test_forward_is_deterministic(rng):
    model = build(tiny_spec("para-former-2-3"))
    img = rng.standard_normal((3, 8, 8))
    first = forward(model, img)
    for _ in range(5):
        assert np.array_equal(forward(model, img), first)


def test_build_is_seeded():
    a, b, c = build(tiny_spec(seed=1)), build(tiny_spec(seed=1)), build(tiny_spec(seed=2))
    assert all(np.array_equal(x, y) for x, y in zip(a.state().values(), b.state().values()))
    assert not np.array_equal(a.head_w.data, c.head_w.data)


def test_duplicated_branches_sum_to_multiple(rng):
    model = build(tiny_spec("para-former-2-3"))
    for b in (1, 2):
        for dst, src in zip(model.branches[b], model.branches[0]):
            for (_, t), (_, s) in zip(dst.named(), src.named()):
                t.data = s.data.copy()
    img = rng.standard_normal((3, 8, 8))
    tokens = embed_tokens(model, img)
    one = branch_forward(model, tokens, 0).data
    total = aggregate([branch_forward(model, tokens, b) for b in range(3)]).data
    np.testing.assert_allclose(total, 3 * one, rtol=1e-14)


@settings(max_examples=10, deadline=None)
@given(st.permutations(range(4)))
def test_branch_order_does_not_matter(perm):
    model = build(tiny_spec("para-former-1-4"))
    img = np.random.default_rng(3).standard_normal((3, 8, 8))
    ref = forward(model, img)
    model.branches = [model.branches[i] for i in perm]
    np.testing.assert_allclose(forward(model, img), ref, atol=1e-12)


def test_aggregation_is_linear_in_branch_outputs(rng):
    model = build(tiny_spec("para-former-1-3"))
    tokens = embed_tokens(model, rng.standard_normal((3, 8, 8)))
    outs = [branch_forward(model, tokens, b) for b in range(3)]
    np.testing.assert_allclose(aggregate(outs).data, sum(o.data for o in outs), rtol=1e-14)
    np.testing.assert_allclose(aggregate(outs, "mean").data, sum(o.data for o in outs) / 3, rtol=1e-14)


def test_forward_batch_matches_single(rng):
    model = build(tiny_spec("para-former-1-2"))
    imgs = rng.standard_normal((4, 3, 8, 8))
    batch = forward_batch(model, imgs)
    assert batch.shape == (4, 4)
    for i in range(4):
        assert np.array_equal(batch[i], forward(model, imgs[i]))
    assert forward_batch(model, np.zeros((0, 3, 8, 8))).shape == (0, 4)


def test_wrong_image_shape(rng):
    with pytest.raises(ShapeError, match="expected image shape"):
        forward(build(tiny_spec()), rng.standard_normal((3, 9, 9)))


@pytest.mark.parametrize("variant,per_block", [("strict", 4 * 8 * 8 + 8 * 16 + 16 + 16 * 8 + 8),
                                               ("practical", 4 * 8 * 8 + 8 * 16 + 16 + 16 * 8 + 8 + 4 * 8)])
def test_param_count(variant, per_block):
    counts = param_count(build(tiny_spec("para-former-2-3", variant=variant)))
    assert counts["branches"] == 6 * per_block
    assert counts["embed"] == 48 * 8 + 8 + 8 + 5 * 8
    assert counts["head"] == 8 * 4 + 4
    assert counts["total"] == counts["embed"] + counts["branches"] + counts["head"]


def test_every_parameter_gets_gradient(rng):
    model = build(tiny_spec("para-former-2-3"))
    loss = cross_entropy(logits_tensor(model, rng.standard_normal((2, 3, 8, 8))), [1, 3])
    backward(loss, model.parameters())
    for name, t in model.named_parameters():
        assert t.grad is not None and np.any(t.grad != 0), name


def test_load_state_round_trip(rng):
    a, b = build(tiny_spec(seed=1)), build(tiny_spec(seed=2))
    b.load_state(a.state())
    img = rng.standard_normal((3, 8, 8))
    assert np.array_equal(forward(a, img), forward(b, img))


def test_one_branch_matches_serial_structure():
    par, ser = build(tiny_spec("para-former-1-1")), build(tiny_spec("vit-1"))
    assert [(n, t.shape) for n, t in par.named_parameters()] == [(n, t.shape) for n, t in ser.named_parameters()]
    assert param_count(par) == param_count(ser)


def test_branch_count_and_block_ordering():
    from paraformer.models import block_param_count

    counts = {n: param_count(build(tiny_spec(n))) for n in ("para-former-1-24", "para-former-6-6", "para-former-6-24")}
    p_block = block_param_count(build(tiny_spec("vit-1")).branches[0][0])
    assert counts["para-former-1-24"]["branches"] == 24 * p_block
    assert [counts[n]["branches"] for n in counts] == [24 * p_block, 36 * p_block, 144 * p_block]
    six = build(tiny_spec("para-former-6-6"))
    assert sum(block_param_count(b) for b in six.branches[0]) == param_count(build(tiny_spec("vit-6")))["branches"]
    assert counts["para-former-6-6"]["head"] == 8 * 4 + 4


def test_identical_images_give_identical_rows(rng):
    model = build(tiny_spec("para-former-1-2"))
    img = rng.standard_normal((3, 8, 8))
    out = forward_batch(model, np.stack([img, img]))
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(forward_batch(model, img[None])[0], forward(model, img))
