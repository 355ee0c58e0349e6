"""Top-down fusion wiring, token blocks, shift mechanics, placement."""

import numpy as np
import pytest

from dtfsal import ops
from dtfsal.encoder import FeaturePyramid
from dtfsal.enhancement import (
    EnhancementStack,
    ShiftSpec,
    ShiftTokenFusionBlock,
    TokenBank,
    TokenEnhancementBlock,
    TopDownFusion,
    parse_block_placement,
)
from dtfsal.tensor import GradTape, Tensor


def _pyramid(rng, c=4, t=2, h=16, w=16):
    levels = [
        Tensor(rng.standard_normal((1, c * 2**i, t, h // 2**i, w // 2**i)))
        for i in range(4)
    ]
    return FeaturePyramid(levels)


def test_topdown_zero_pyramid_zero_output():
    rng = np.random.default_rng(0)
    fuse = TopDownFusion([4, 8, 16, 32], 6, rng=rng)
    for conv in fuse.project + fuse.refine:
        conv.bias.data[:] = 0.0
    pyr = FeaturePyramid([
        Tensor(np.zeros((1, 4 * 2**i, 2, 16 // 2**i, 16 // 2**i))) for i in range(4)
    ])
    refined = fuse(pyr)
    for lvl in refined.levels:
        np.testing.assert_array_equal(lvl.data, 0.0)


def test_topdown_level1_additive_structure():
    # With levels 2..4 zeroed, level 1 depends only on its own projection path.
    rng = np.random.default_rng(1)
    fuse = TopDownFusion([4, 8, 16, 32], 6, rng=rng)
    for conv in fuse.project + fuse.refine:
        conv.bias.data[:] = 0.0
    gen = np.random.default_rng(2)
    e1 = Tensor(gen.standard_normal((1, 4, 2, 16, 16)))
    zeros = [Tensor(np.zeros((1, 4 * 2**i, 2, 16 // 2**i, 16 // 2**i))) for i in range(1, 4)]
    refined = fuse(FeaturePyramid([e1, *zeros]))
    direct = fuse.refine[0](fuse.project[0](e1))
    np.testing.assert_allclose(refined.levels[0].data, direct.data, atol=1e-14)


def test_topdown_matches_equation_transcription():
    """Literal step-by-step wiring: project each level, inject level 4 into 3,
    levels 3 and 4 into 2, levels 2 and 4 into 1, then refine."""
    rng = np.random.default_rng(3)
    fuse = TopDownFusion([4, 8, 16, 32], 6, rng=rng)
    gen = np.random.default_rng(4)
    pyr = _pyramid(gen)
    got = fuse(pyr)

    def conv(mod, x):
        return ops.conv3d(x, mod.weight, mod.bias, mod.stride, mod.padding)

    def up(x, target):
        return ops.resize_trilinear(x, target.shape[2:])

    e1, e2, e3, e4 = pyr.levels
    r4 = conv(fuse.refine[3], conv(fuse.project[3], e4))
    f3 = conv(fuse.project[2], e3) + up(r4, e3)
    f2 = conv(fuse.project[1], e2) + up(f3, e2) + up(r4, e2)
    f1 = conv(fuse.project[0], e1) + up(f2, e1) + up(r4, e1)
    expect = [conv(fuse.refine[0], f1), conv(fuse.refine[1], f2), conv(fuse.refine[2], f3), r4]
    for lvl, ref in zip(got.levels, expect):
        np.testing.assert_allclose(lvl.data, ref.data, rtol=1e-12, atol=1e-13)


def test_topdown_symmetric_level1_flag_adds_level3_term():
    rng = np.random.default_rng(5)
    f_plain = TopDownFusion([4, 8, 16, 32], 6, rng=np.random.default_rng(5))
    f_sym = TopDownFusion([4, 8, 16, 32], 6, symmetric_level1=True, rng=np.random.default_rng(5))
    pyr = _pyramid(np.random.default_rng(6))
    a = f_plain(pyr).levels[0].data
    b = f_sym(pyr).levels[0].data
    assert not np.allclose(a, b)
    for i in (1, 2, 3):
        np.testing.assert_array_equal(f_plain(pyr).levels[i].data, f_sym(pyr).levels[i].data)


# -- token enhancement ---------------------------------------------------------


def test_lteb_zeroed_modulation_is_exact_identity():
    rng = np.random.default_rng(7)
    blk = TokenEnhancementBlock(4, n_tokens=3, token_hw=(3, 3), rng=rng)
    blk.modulation.field_conv.weight.data[:] = 0.0
    blk.modulation.field_conv.bias.data[:] = 0.0
    x = Tensor(np.random.default_rng(8).standard_normal((1, 4, 2, 6, 6)))
    out = blk(x)
    assert np.array_equal(out.data, x.data)


def test_lteb_token_weights_are_distribution_per_timestep():
    rng = np.random.default_rng(9)
    blk = TokenEnhancementBlock(4, n_tokens=5, token_hw=(3, 3), rng=rng)
    x = Tensor(np.random.default_rng(10).standard_normal((1, 4, 3, 6, 6)))
    blk(x)
    w = blk.modulation.last_token_weights  # [N, T, K]
    np.testing.assert_allclose(w.sum(axis=2), 1.0, atol=1e-12)
    assert np.all(w > 0)
    # Weights vary with time in the generic case.
    assert not np.allclose(w[0, 0], w[0, 1])


def test_lteb_single_token_matches_hand_pipeline():
    rng = np.random.default_rng(11)
    blk = TokenEnhancementBlock(4, n_tokens=1, token_hw=(3, 3), rng=rng)
    x = Tensor(np.random.default_rng(12).standard_normal((1, 4, 2, 6, 6)))
    out = blk(x)
    w = blk.modulation.last_token_weights
    np.testing.assert_allclose(w, 1.0, atol=1e-15)  # softmax of a single logit
    # Hand pipeline: K = P_1 for every step, interpolate, conv, gate into x.
    mod = blk.modulation
    p1 = mod.bank.tokens.data[0]  # [C, Hp, Wp]
    k_all = np.broadcast_to(p1[None, :, None], (1, 4, 2, 3, 3)).copy()
    field = ops.resize_trilinear(Tensor(k_all), (2, 6, 6))
    field = ops.conv3d(field, mod.field_conv.weight, mod.field_conv.bias, padding=(0, 1, 1))
    expect = x.data * field.data + x.data
    np.testing.assert_allclose(out.data, expect, rtol=1e-12, atol=1e-13)


def test_lteb_shape_preserving_across_shapes():
    rng = np.random.default_rng(13)
    blk = TokenEnhancementBlock(6, n_tokens=2, token_hw=(2, 2), rng=rng)
    gen = np.random.default_rng(14)
    for shape in ((1, 6, 1, 4, 4), (1, 6, 3, 5, 9), (2, 6, 2, 7, 3)):
        x = Tensor(gen.standard_normal(shape))
        assert blk(x).shape == shape


def test_token_bank_receives_gradients():
    rng = np.random.default_rng(15)
    blk = TokenEnhancementBlock(4, n_tokens=3, token_hw=(2, 2), rng=rng)
    x = Tensor(np.random.default_rng(16).standard_normal((1, 4, 2, 4, 4)))
    with GradTape() as tape:
        loss = (blk(x) * blk(x)).sum()
    tape.backward(loss)
    g = blk.modulation.bank.tokens.grad
    assert g is not None and np.any(g != 0)


# -- shift token fusion ----------------------------------------------------------


def test_dltfb_degenerate_shift_and_zero_convs_identity():
    rng = np.random.default_rng(17)
    blk = ShiftTokenFusionBlock(
        4, n_tokens=2, token_hw=(2, 2),
        width_spec=ShiftSpec("width", (0, 0, 0)),
        height_spec=ShiftSpec("height", (0, 0, 0)),
        rng=rng,
    )
    blk.post_conv.weight.data[:] = 0.0
    blk.post_conv.bias.data[:] = 0.0
    x = Tensor(np.random.default_rng(18).standard_normal((1, 4, 2, 5, 5)))
    np.testing.assert_array_equal(blk.shift_branch(x).data, x.data)
    blk.modulation.field_conv.weight.data[:] = 0.0
    blk.modulation.field_conv.bias.data[:] = 0.0
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_dltfb_shift_then_unshift_bit_exact():
    spec = ShiftSpec("width", (-1, 0, 1))
    x = Tensor(np.random.default_rng(19).standard_normal((1, 6, 2, 4, 7)))
    np.testing.assert_array_equal(spec.inverse().apply(spec.apply(x)).data, x.data)


def test_dltfb_matches_equation_transcription():
    rng = np.random.default_rng(20)
    blk = ShiftTokenFusionBlock(6, n_tokens=2, token_hw=(2, 2), rng=rng)
    x = Tensor(np.random.default_rng(21).standard_normal((1, 6, 2, 8, 8)))
    got = blk(x)

    def conv(mod, t):
        return ops.conv3d(t, mod.weight, mod.bias, mod.stride, mod.padding)

    shifted = ops.channel_shift(x, "width", (-1, 0, 1))
    y = conv(blk.mix_conv, ops.gelu(conv(blk.pre_conv, shifted)))
    y = ops.channel_shift(y, "height", (-1, 0, 1))
    normed = ops.layer_norm(y, axes=(1,), eps=blk.norm.eps)
    normed = normed * blk.norm.gamma.reshape((1, -1, 1, 1, 1)) + blk.norm.beta.reshape((1, -1, 1, 1, 1))
    f_sh = x + conv(blk.post_conv, normed)
    field = blk.modulation(x)
    expect = x.data * field.data + f_sh.data
    np.testing.assert_allclose(got.data, expect, rtol=1e-12, atol=1e-13)


def test_dltfb_shape_preserving():
    rng = np.random.default_rng(22)
    blk = ShiftTokenFusionBlock(4, n_tokens=2, token_hw=(2, 2), rng=rng)
    gen = np.random.default_rng(23)
    for shape in ((1, 4, 1, 4, 4), (1, 4, 2, 6, 10)):
        assert blk(Tensor(gen.standard_normal(shape))).shape == shape


# -- placement -------------------------------------------------------------------


def test_parse_block_placement():
    assert parse_block_placement("lteb:1,2,3,4") == {1: "lteb", 2: "lteb", 3: "lteb", 4: "lteb"}
    assert parse_block_placement("DLTFB:4") == {1: "none", 2: "none", 3: "none", 4: "dltfb"}
    assert parse_block_placement("none") == {i: "none" for i in (1, 2, 3, 4)}
    assert parse_block_placement("default") == {1: "lteb", 2: "lteb", 3: "lteb", 4: "dltfb"}
    assert parse_block_placement("lteb:1,2;dltfb:3,4")[3] == "dltfb"
    with pytest.raises(ValueError):
        parse_block_placement("swin:1")
    with pytest.raises(ValueError):
        parse_block_placement("lteb:5")


def test_placement_none_passes_through_unchanged():
    rng = np.random.default_rng(24)
    stack = EnhancementStack(4, parse_block_placement("none"), rng=rng)
    levels = [Tensor(np.random.default_rng(25).standard_normal((1, 4, 2, 8 // 2**i, 8 // 2**i))) for i in range(4)]
    from dtfsal.enhancement import RefinedPyramid

    out = stack(RefinedPyramid(levels))
    for a, b in zip(out.levels, levels):
        assert a is b


def test_placement_instantiates_expected_blocks():
    rng = np.random.default_rng(26)
    stack = EnhancementStack(4, parse_block_placement("lteb:1,2,3,4"), rng=rng)
    assert all(isinstance(b, TokenEnhancementBlock) for b in stack.blocks)
    stack = EnhancementStack(4, parse_block_placement("dltfb:4"), rng=rng)
    assert isinstance(stack.blocks[3], ShiftTokenFusionBlock)
    assert sum(isinstance(b, ShiftTokenFusionBlock) for b in stack.blocks) == 1
