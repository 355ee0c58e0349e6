"""Registered finite-difference cases: one per differentiable op and block.

Shapes are deliberately tiny so that exhaustive central differences stay
fast; every case returns a scalar loss closing over its trainable tensors.
"""

from __future__ import annotations

import numpy as np

from . import losses, ops
from .decoder import MultiDecoder, SingleDecoder, UNetDecoder
from .enhancement import ShiftSpec, ShiftTokenFusionBlock, TokenEnhancementBlock
from .fusion import TriStreamFusion
from .gradcheck import register_case
from .nn import BatchNorm3d
from .tensor import Tensor


def _t(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _probe(rng, shape):
    return Tensor(rng.standard_normal(shape))


@register_case("conv3d")
def _conv3d(rng):
    x = _t(rng, (1, 2, 3, 4, 4))
    w = _t(rng, (2, 2, 2, 3, 3), 0.5)
    b = _t(rng, (2,))
    probe = _probe(rng, (1, 2, 2, 2, 2))
    return lambda: (ops.conv3d(x, w, b, (2, 2, 2), (1, 1, 1)) * probe).sum(), [x, w, b]


@register_case("trilinear_upsample")
def _upsample(rng):
    x = _t(rng, (1, 2, 2, 3, 3))
    probe = _probe(rng, (1, 2, 4, 6, 6))
    return lambda: (ops.trilinear_upsample(x, (2, 2, 2)) * probe).sum(), [x]


@register_case("resize_trilinear")
def _resize(rng):
    x = _t(rng, (1, 2, 3, 4, 5))
    probe = _probe(rng, (1, 2, 2, 7, 3))
    return lambda: (ops.resize_trilinear(x, (2, 7, 3)) * probe).sum(), [x]


@register_case("softmax")
def _softmax(rng):
    x = _t(rng, (4, 7))
    probe = _probe(rng, (4, 7))
    return lambda: (ops.softmax(x, 1) * probe).sum(), [x]


@register_case("layer_norm")
def _layer_norm(rng):
    x = _t(rng, (2, 5, 3))
    probe = _probe(rng, (2, 5, 3))
    return lambda: (ops.layer_norm(x, axes=(2,), eps=1e-5) * probe).sum(), [x]


@register_case("batch_norm_train")
def _batch_norm(rng):
    bn = BatchNorm3d(3)
    x = _t(rng, (1, 3, 2, 3, 3))
    probe = _probe(rng, (1, 3, 2, 3, 3))
    params = [x] + bn.parameters()

    def fn():
        bn.running_mean.array[:] = 0.0  # keep forward independent of eval state
        bn.running_var.array[:] = 1.0
        return (bn(x) * probe).sum()

    return fn, params


@register_case("gelu")
def _gelu(rng):
    x = _t(rng, (3, 5))
    probe = _probe(rng, (3, 5))
    return lambda: (ops.gelu(x) * probe).sum(), [x]


@register_case("sigmoid")
def _sigmoid(rng):
    x = _t(rng, (3, 5))
    probe = _probe(rng, (3, 5))
    return lambda: (ops.sigmoid(x) * probe).sum(), [x]


@register_case("relu")
def _relu(rng):
    # Offset away from the kink at zero.
    x = Tensor(rng.standard_normal((3, 5)) + np.where(rng.standard_normal((3, 5)) > 0, 0.5, -0.5), requires_grad=True)
    probe = _probe(rng, (3, 5))
    return lambda: (ops.relu(x) * probe).sum(), [x]


@register_case("linear")
def _linear(rng):
    x = _t(rng, (4, 3))
    w = _t(rng, (2, 3))
    b = _t(rng, (2,))
    probe = _probe(rng, (4, 2))
    return lambda: (ops.linear(x, w, b) * probe).sum(), [x, w, b]


@register_case("global_avg_pool")
def _gap(rng):
    x = _t(rng, (2, 3, 2, 3, 3))
    probe = _probe(rng, (2, 3))
    return lambda: (ops.global_avg_pool(x) * probe).sum(), [x]


@register_case("matmul")
def _matmul(rng):
    a = _t(rng, (3, 4))
    b = _t(rng, (4, 2))
    probe = _probe(rng, (3, 2))
    return lambda: ((a @ b) * probe).sum(), [a, b]


@register_case("deformable_conv")
def _deform(rng):
    x = _t(rng, (1, 2, 2, 4, 4))
    # Fractional offsets keep samples away from integer grid corners.
    off = Tensor(rng.uniform(-0.7, 0.7, (1, 18, 2, 4, 4)) + 0.11, requires_grad=True)
    w = _t(rng, (2, 2, 1, 3, 3), 0.5)
    b = _t(rng, (2,))
    probe = _probe(rng, (1, 2, 2, 4, 4))
    return lambda: (ops.deformable_conv3d(x, off, w, b) * probe).sum(), [x, off, w, b]


@register_case("channel_shift")
def _shift(rng):
    x = _t(rng, (1, 6, 2, 3, 4))
    probe = _probe(rng, (1, 6, 2, 3, 4))
    spec = ShiftSpec("width", (-1, 0, 1))
    return lambda: (spec.apply(x) * probe).sum(), [x]


@register_case("lteb_block")
def _lteb(rng):
    blk = TokenEnhancementBlock(4, n_tokens=2, token_hw=(2, 2), rng=rng)
    x = _t(rng, (1, 4, 2, 3, 3), 0.5)
    probe = _probe(rng, (1, 4, 2, 3, 3))
    return lambda: (blk(x) * probe).sum(), [x] + blk.parameters()


@register_case("dltfb_block")
def _dltfb(rng):
    blk = ShiftTokenFusionBlock(4, n_tokens=2, token_hw=(2, 2), rng=rng)
    x = _t(rng, (1, 4, 2, 3, 3), 0.5)
    probe = _probe(rng, (1, 4, 2, 3, 3))
    return lambda: (blk(x) * probe).sum(), [x] + blk.parameters()


@register_case("amfb_block")
def _amfb(rng):
    blk = TriStreamFusion(3, audio_dim=4, rng=rng)
    # Move the zero-initialized offset head off integer sampling positions,
    # where bilinear interpolation is non-differentiable.
    blk.adaptive.offset_conv.bias.data = rng.uniform(0.1, 0.4, 18) * rng.choice((-1.0, 1.0), 18)
    x = _t(rng, (1, 3, 2, 3, 3), 0.5)
    tokens = _t(rng, (3, 4), 0.5)
    probe = _probe(rng, (1, 3, 2, 3, 3))

    def fn():
        for bn in (blk.local.bn, blk.global_.bn):
            bn.running_mean.array[:] = 0.0
            bn.running_var.array[:] = 1.0
        return (blk(x, tokens) * probe).sum()

    return fn, [x, tokens] + blk.parameters()


def _pyramid_levels(rng, channels=2):
    return [_t(rng, (1, channels, 1, 8 // 2**i, 8 // 2**i), 0.5) for i in range(4)]


@register_case("decoder_multi")
def _decoder_multi(rng):
    dec = MultiDecoder(2, width=2, min_width=2, rng=rng)
    levels = _pyramid_levels(rng)
    probe = _probe(rng, (32, 32))
    return lambda: (dec(levels)[0] * probe).sum(), levels + dec.parameters()


@register_case("decoder_one")
def _decoder_one(rng):
    dec = SingleDecoder(2, width=2, min_width=2, rng=rng)
    levels = _pyramid_levels(rng)
    probe = _probe(rng, (32, 32))
    return lambda: (dec(levels)[0] * probe).sum(), levels + dec.parameters()


@register_case("decoder_unet")
def _decoder_unet(rng):
    dec = UNetDecoder(2, width=2, min_width=2, rng=rng)
    levels = _pyramid_levels(rng)
    probe = _probe(rng, (32, 32))
    return lambda: (dec(levels)[0] * probe).sum(), levels + dec.parameters()


def _density_pair(rng, shape=(5, 5)):
    gt = rng.uniform(0.1, 1.0, shape)
    gt /= gt.sum()
    raw = rng.uniform(0.1, 1.0, shape)
    return gt, Tensor(raw, requires_grad=True)


@register_case("loss_kl")
def _loss_kl(rng):
    gt, pred = _density_pair(rng)
    return lambda: losses.kl_div(gt, losses.sum_normalize(pred)), [pred]


@register_case("loss_cc")
def _loss_cc(rng):
    gt, pred = _density_pair(rng)
    return lambda: losses.cc(gt, losses.sum_normalize(pred)), [pred]


@register_case("loss_composite")
def _loss_composite(rng):
    gt, pred = _density_pair(rng)
    return lambda: losses.prediction_loss(gt, pred), [pred]
