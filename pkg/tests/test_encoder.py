"""Pyramid shape law and patch partition contracts."""

import numpy as np
import pytest

from dtfsal.encoder import PatchPartition, PyramidEncoder, VideoClip, pyramid_level_shapes
from dtfsal.tensor import ShapeError, Tensor


def test_patch_partition_shape_law():
    rng = np.random.default_rng(0)
    pp = PatchPartition(96, rng=rng)
    x = Tensor(np.zeros((1, 3, 4, 32, 32)))
    assert tuple(pp(x).shape) == (1, 96, 2, 8, 8)


def test_patch_partition_zero_clip_zero_tokens():
    rng = np.random.default_rng(1)
    pp = PatchPartition(8, rng=rng)
    out = pp(Tensor(np.zeros((1, 3, 4, 32, 32))))
    np.testing.assert_array_equal(out.data, 0.0)


def test_patch_partition_rejects_indivisible():
    pp = PatchPartition(8, rng=np.random.default_rng(2))
    with pytest.raises(ShapeError):
        pp(Tensor(np.zeros((1, 3, 3, 32, 32))))


def test_video_clip_validation():
    with pytest.raises(ShapeError):
        VideoClip(np.zeros((3, 32, 32, 3)))  # odd T
    with pytest.raises(ShapeError):
        VideoClip(np.zeros((4, 33, 32, 3)))  # H not divisible by 32
    clip = VideoClip(np.zeros((4, 32, 64, 3)))
    assert tuple(clip.tensor().shape) == (1, 3, 4, 32, 64)


def test_channel_doubling_between_levels():
    rng = np.random.default_rng(3)
    enc = PyramidEncoder(base_channels=8, blocks_per_stage=(1, 1, 1, 1), rng=rng)
    pyr = enc(Tensor(np.random.default_rng(4).standard_normal((1, 3, 4, 32, 32))))
    shapes = pyr.shapes()
    for i in range(3):
        assert shapes[i + 1][1] == 2 * shapes[i][1]
    assert len({s[2] for s in shapes}) == 1  # temporal length shared


def test_shape_law_random_sizes():
    rng = np.random.default_rng(5)
    enc = PyramidEncoder(base_channels=4, blocks_per_stage=(1, 1, 1, 1), rng=rng)
    gen = np.random.default_rng(6)
    for _ in range(6):
        t = 2 * int(gen.integers(1, 4))
        h = 32 * int(gen.integers(1, 3))
        w = 32 * int(gen.integers(1, 3))
        pyr = enc(Tensor(gen.standard_normal((1, 3, t, h, w))))
        expect = [(1, *s) for s in pyramid_level_shapes(t, h, w, 4)]
        assert pyr.shapes() == expect


def test_forward_deterministic():
    rng = np.random.default_rng(7)
    enc = PyramidEncoder(base_channels=4, blocks_per_stage=(1, 1, 1, 1), rng=rng)
    x = Tensor(np.random.default_rng(8).standard_normal((1, 3, 4, 32, 32)))
    a = enc(x).levels[3].data
    b = enc(x).levels[3].data
    np.testing.assert_array_equal(a, b)
