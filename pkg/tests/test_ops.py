"""Kernel oracles: direct-loop convolution, brute-force resampling weights,
high-precision softmax, statistics checks, and shift bijections."""

import math

import numpy as np
import pytest

from dtfsal import ops
from dtfsal.gradcheck import check_gradients
from dtfsal.tensor import NumericsError, ShapeError, Tensor


def dyadic(rng, shape, lo=-8, hi=8):
    """Integer-valued float64 arrays: sums and products are exact, so any
    correct evaluation order must agree bit for bit."""
    return rng.integers(lo, hi + 1, size=shape).astype(np.float64)


# -- conv3d -------------------------------------------------------------------


def test_conv3d_identity_1x1():
    v = 3.75
    x = Tensor(np.full((1, 1, 1, 1, 1), v))
    w = Tensor(np.ones((1, 1, 1, 1, 1)))
    assert ops.conv3d(x, w).data.item() == v


def test_conv3d_allones_kernel_sums_entries():
    x = Tensor(np.arange(1.0, 10.0).reshape(1, 1, 1, 3, 3))
    w = Tensor(np.ones((1, 1, 1, 3, 3)))
    assert ops.conv3d(x, w).data.item() == 45.0


def test_conv3d_matches_loop_oracle_random_floats():
    rng = np.random.default_rng(7)
    x = Tensor(rng.standard_normal((1, 2, 4, 6, 6)))
    w = Tensor(rng.standard_normal((3, 2, 3, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    got = ops.conv3d(x, w, b, padding=(1, 1, 1)).data
    ref = ops.conv3d_reference(x.data, w.data, b.data, (1, 1, 1), (1, 1, 1))
    np.testing.assert_allclose(got, ref, rtol=1e-13, atol=1e-13)


def test_conv3d_bit_exact_on_integer_inputs():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n, c, co = rng.integers(1, 3), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kt, kh, kw = (int(rng.integers(1, 4)) for _ in range(3))
        t = int(rng.integers(kt, kt + 4))
        h = int(rng.integers(kh, kh + 5))
        w_in = int(rng.integers(kw, kw + 5))
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        pad = tuple(int(rng.integers(0, 2)) for _ in range(3))
        x = Tensor(dyadic(rng, (n, c, t, h, w_in)))
        w = Tensor(dyadic(rng, (co, c, kt, kh, kw), -4, 4))
        b = Tensor(dyadic(rng, (co,)))
        got = ops.conv3d(x, w, b, stride, pad).data
        ref = ops.conv3d_reference(x.data, w.data, b.data, stride, pad)
        assert np.array_equal(got, ref)


def test_conv3d_channel_mismatch_and_oversize_kernel():
    x = Tensor(np.zeros((1, 2, 3, 3, 3)))
    with pytest.raises(ShapeError):
        ops.conv3d(x, Tensor(np.zeros((1, 3, 1, 1, 1))))
    with pytest.raises(ShapeError):
        ops.conv3d(x, Tensor(np.zeros((1, 2, 5, 1, 1))))


def test_conv3d_output_size_formula():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, 1, 8, 9, 10)))
    w = Tensor(rng.standard_normal((1, 1, 3, 2, 4)))
    out = ops.conv3d(x, w, stride=(2, 3, 1), padding=(1, 0, 2))
    expect = tuple((i + 2 * p - k) // s + 1 for i, k, s, p in zip((8, 9, 10), (3, 2, 4), (2, 3, 1), (1, 0, 2)))
    assert out.shape[2:] == expect


# -- trilinear resampling ------------------------------------------------------


def test_upsample_constant_preserved_exactly():
    x = Tensor(np.full((1, 2, 2, 3, 3), 0.37))
    y = ops.trilinear_upsample(x, (2, 2, 2))
    assert np.all(y.data == 0.37)


def test_upsample_1d_hand_case():
    x = Tensor(np.array([0.0, 1.0]).reshape(1, 1, 1, 1, 2))
    y = ops.trilinear_upsample(x, (1, 1, 2))
    np.testing.assert_allclose(y.data.ravel(), [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def brute_force_resize2d(img, out_h, out_w):
    """Per-output-pixel half-pixel bilinear weights, evaluated directly."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        for j in range(out_w):
            sy = (i + 0.5) * in_h / out_h - 0.5
            sx = (j + 0.5) * in_w / out_w - 0.5
            y0, x0 = math.floor(sy), math.floor(sx)
            fy, fx = sy - y0, sx - x0
            acc = 0.0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy = min(max(y0 + dy, 0), in_h - 1)
                    xx = min(max(x0 + dx, 0), in_w - 1)
                    acc += wy * wx * img[yy, xx]
            out[i, j] = acc
    return out


def test_upsample_2x2_matches_weight_oracle():
    rng = np.random.default_rng(5)
    img = rng.standard_normal((2, 2))
    x = Tensor(img.reshape(1, 1, 1, 2, 2))
    y = ops.trilinear_upsample(x, (1, 2, 2)).data[0, 0, 0]
    np.testing.assert_allclose(y, brute_force_resize2d(img, 4, 4), rtol=1e-12, atol=1e-12)


def test_resize_arbitrary_matches_weight_oracle():
    rng = np.random.default_rng(6)
    img = rng.standard_normal((5, 7))
    x = Tensor(img.reshape(1, 1, 1, 5, 7))
    y = ops.resize_trilinear(x, (1, 8, 3)).data[0, 0, 0]
    np.testing.assert_allclose(y, brute_force_resize2d(img, 8, 3), rtol=1e-12, atol=1e-12)


def test_resize_preserves_bounds():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((1, 3, 4, 5, 6)))
    y = ops.resize_trilinear(x, (7, 11, 4))
    assert y.data.max() <= x.data.max() and y.data.min() >= x.data.min()


def test_upsample_rejects_bad_scale_and_empty():
    with pytest.raises(ValueError):
        ops.trilinear_upsample(Tensor(np.zeros((1, 1, 2, 2, 2))), (0.5, 1, 1))
    with pytest.raises(ShapeError):
        ops.resize_trilinear(Tensor(np.zeros((1, 1, 0, 2, 2))), (2, 2, 2))


# -- softmax, normalize, activations ------------------------------------------


def test_softmax_symmetry_and_closed_form():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(
        ops.softmax(Tensor([0.0, math.log(3.0)]), 0).data, [0.25, 0.75], atol=1e-14
    )


def test_softmax_matches_extended_precision_oracle():
    rng = np.random.default_rng(9)
    v = rng.standard_normal(7) * 30.0
    got = ops.softmax(Tensor(v), 0).data
    with np.errstate(over="ignore"):
        e = np.exp(np.asarray(v, dtype=np.longdouble))
    ref = (e / e.sum()).astype(np.float64)
    np.testing.assert_allclose(got, ref, rtol=1e-13)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((6, 9))
    y = ops.softmax(Tensor(x), 1).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)
    y_shift = ops.softmax(Tensor(x + 123.0), 1).data
    np.testing.assert_allclose(y, y_shift, atol=1e-12)
    assert np.all((y > 0) & (y < 1))


def test_layer_norm_constant_input_is_zero():
    y = ops.layer_norm(Tensor(np.full((4, 6), 2.5)), axes=(1,), eps=1e-5)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-12)


def test_layer_norm_hand_case():
    y = ops.layer_norm(Tensor([1.0, 2.0, 3.0]), axes=(0,), eps=1e-12)
    np.testing.assert_allclose(y.data, [-1.224744871, 0.0, 1.224744871], atol=1e-6)


def test_layer_norm_group_statistics():
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((3, 4, 5)) * 3 + 1)
    y = ops.layer_norm(x, axes=(1, 2), eps=1e-10).data
    mean = y.mean(axis=(1, 2))
    var = y.var(axis=(1, 2))
    assert np.all(np.abs(mean) < 1e-6)
    assert np.all(np.abs(var - 1) < 1e-5)


def test_layer_norm_empty_group_and_bad_eps():
    with pytest.raises(ShapeError):
        ops.layer_norm(Tensor(np.zeros((2, 0))), axes=(1,), eps=1e-5)
    with pytest.raises(ValueError):
        ops.layer_norm(Tensor(np.zeros((2, 2))), axes=(1,), eps=0.0)


def test_activation_values():
    assert ops.sigmoid(Tensor([0.0])).data.item() == 0.5
    assert ops.gelu(Tensor([0.0])).data.item() == 0.0
    x = np.array([-2.0, -0.5, 0.0, 0.5, 2.0])
    np.testing.assert_array_equal(ops.relu(Tensor(x)).data, np.maximum(x, 0))
    # gelu(1) = Phi(1) via the erf definition
    from scipy.special import erf

    expected = 0.5 * (1 + erf(1 / math.sqrt(2)))
    np.testing.assert_allclose(ops.gelu(Tensor([1.0])).data.item(), expected, rtol=1e-12)
    assert abs(ops.gelu(Tensor([1.0])).data.item() - 0.841345) < 1e-6
    with pytest.raises(ValueError):
        ops.activation(Tensor([0.0]), "swish")


def test_sigmoid_range():
    # Strict (0,1) holds wherever float64 can represent it (|x| < ~36).
    x = Tensor(np.linspace(-30, 30, 41))
    y = ops.sigmoid(x).data
    assert np.all((y > 0) & (y < 1))


# -- linear / pooling / narrow / concat ----------------------------------------


def test_linear_identity_and_row_sum():
    x = Tensor(np.array([[2.0, 3.0]]))
    eye = Tensor(np.eye(2))
    zero_b = Tensor(np.zeros(2))
    np.testing.assert_array_equal(ops.linear(x, eye, zero_b).data, x.data)
    w = Tensor(np.array([[1.0, 1.0]]))
    b = Tensor(np.array([0.0]))
    assert ops.linear(x, w, b).data.item() == 5.0


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((3, 2, 4))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(5)
    got = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros((3, 2, 5))
    for i in range(3):
        for j in range(2):
            for o in range(5):
                acc = b[o]
                for k in range(4):
                    acc += x[i, j, k] * w[o, k]
                ref[i, j, o] = acc
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    with pytest.raises(ShapeError):
        ops.linear(Tensor(x), Tensor(np.zeros((5, 3))), None)


def test_global_avg_pool():
    assert ops.global_avg_pool(Tensor(np.full((2, 3, 1, 2, 2), 4.2))).data.ravel()[0] == pytest.approx(4.2)
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 2, 2))
    assert ops.global_avg_pool(x).data.item() == 2.5
    rng = np.random.default_rng(14)
    arr = rng.standard_normal((2, 3, 2, 4, 5))
    got = ops.global_avg_pool(Tensor(arr)).data
    np.testing.assert_allclose(got, arr.sum(axis=(2, 3, 4)) / (2 * 4 * 5), rtol=1e-12)


def test_narrow_and_concat_roundtrip():
    rng = np.random.default_rng(15)
    x = Tensor(rng.standard_normal((2, 6, 3)), requires_grad=True)
    parts = [ops.narrow(x, 1, i, 2) for i in (0, 2, 4)]
    back = ops.concat(parts, axis=1)
    np.testing.assert_array_equal(back.data, x.data)
    with pytest.raises(ShapeError):
        ops.narrow(x, 1, 5, 2)


# -- channel shift --------------------------------------------------------------


def test_channel_shift_is_permutation_and_invertible():
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((1, 7, 2, 4, 5)))
    y = ops.channel_shift(x, "width", (-1, 0, 1))
    assert sorted(y.data.ravel()) == sorted(x.data.ravel())
    z = ops.channel_shift(y, "width", (1, 0, -1))
    assert np.array_equal(z.data, x.data)


def test_channel_shift_zero_boundary_discards():
    x = Tensor(np.ones((1, 2, 1, 1, 4)))
    y = ops.channel_shift(x, "width", (1, -1), boundary="zero")
    np.testing.assert_array_equal(y.data[0, 0, 0, 0], [0.0, 1.0, 1.0, 1.0])
    np.testing.assert_array_equal(y.data[0, 1, 0, 0], [1.0, 1.0, 1.0, 0.0])
    with pytest.raises(ValueError):
        ops.channel_shift(x, "depth", (0,))


# -- deformable conv -------------------------------------------------------------


def test_deformable_zero_offsets_bit_equals_conv3d():
    rng = np.random.default_rng(17)
    x = Tensor(rng.standard_normal((1, 3, 2, 6, 5)))
    w = Tensor(rng.standard_normal((4, 3, 1, 3, 3)))
    b = Tensor(rng.standard_normal(4))
    off = Tensor(np.zeros((1, 18, 2, 6, 5)))
    a = ops.deformable_conv3d(x, off, w, b).data
    c = ops.conv3d(x, w, b, (1, 1, 1), (0, 1, 1)).data
    assert np.array_equal(a, c)


def test_deformable_integer_offset_equals_shifted_conv():
    rng = np.random.default_rng(18)
    x_arr = rng.standard_normal((1, 2, 1, 5, 5))
    w = Tensor(rng.standard_normal((2, 2, 1, 3, 3)))
    off = np.zeros((1, 18, 1, 5, 5))
    off[:, 1::2] = 1.0  # +1 in x on every tap
    a = ops.deformable_conv3d(Tensor(x_arr), Tensor(off), w).data
    # A unit x-offset shifts the whole sampling grid right: the output at
    # column x equals the plain convolution's output at column x+1.
    c = ops.conv3d(Tensor(x_arr), w, None, (1, 1, 1), (0, 1, 1)).data
    np.testing.assert_allclose(a[..., :-1], c[..., 1:], rtol=1e-12, atol=1e-14)


def test_deformable_matches_bilinear_sampling_oracle():
    rng = np.random.default_rng(19)
    x = rng.standard_normal((1, 1, 1, 4, 4))
    w = rng.standard_normal((1, 1, 1, 3, 3))
    off = rng.uniform(-1.2, 1.2, (1, 18, 1, 4, 4))

    def sample(img, py, px):
        y0, x0 = math.floor(py), math.floor(px)
        fy, fx = py - y0, px - x0
        acc = 0.0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy, x0 + dx
                if 0 <= yy < 4 and 0 <= xx < 4:
                    acc += wy * wx * img[yy, xx]
        return acc

    ref = np.zeros((4, 4))
    for y in range(4):
        for x_pos in range(4):
            acc = 0.0
            for tap in range(9):
                ky, kx = divmod(tap, 3)
                py = y + ky - 1 + off[0, 2 * tap, 0, y, x_pos]
                px = x_pos + kx - 1 + off[0, 2 * tap + 1, 0, y, x_pos]
                acc += w[0, 0, 0, ky, kx] * sample(x[0, 0, 0], py, px)
            ref[y, x_pos] = acc

    got = ops.deformable_conv3d(Tensor(x), Tensor(off), Tensor(w)).data[0, 0, 0]
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-13)


def test_deformable_shape_validation():
    x = Tensor(np.zeros((1, 2, 1, 4, 4)))
    w = Tensor(np.zeros((2, 2, 1, 3, 3)))
    with pytest.raises(ShapeError):
        ops.deformable_conv3d(x, Tensor(np.zeros((1, 10, 1, 4, 4))), w)
    with pytest.raises(ShapeError):
        ops.deformable_conv3d(x, Tensor(np.zeros((1, 18, 1, 4, 4))), Tensor(np.zeros((2, 2, 2, 3, 3))))


# -- gradients for everything above ---------------------------------------------


def test_assorted_gradients_match_finite_differences():
    rng = np.random.default_rng(20)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    probe = Tensor(rng.standard_normal((2, 3, 4)))
    denom = Tensor(rng.standard_normal((2, 3, 4)) + 3.0)
    probe6 = Tensor(rng.standard_normal((2, 6, 4)))
    probe_n = Tensor(rng.standard_normal((2, 3, 2)))
    probe_t = Tensor(rng.standard_normal((4, 2, 3)))
    cases = [
        lambda: (ops.exp(x * 0.3) * probe).sum(),
        lambda: (ops.sqrt(ops.exp(x)) * probe).sum(),
        lambda: ((x / denom) * probe).sum(),
        lambda: (ops.clip(x, -0.7, 0.7) * probe).sum(),
        lambda: x.mean(axis=(0, 2)).sum(),
        lambda: (ops.concat([x, x * 2.0], axis=1) * probe6).sum(),
        lambda: (ops.narrow(x, 2, 1, 2) * probe_n).sum(),
        lambda: (x.transpose((2, 0, 1)) * probe_t).sum(),
    ]
    for fn in cases:
        assert check_gradients(fn, [x]) < 1e-4
