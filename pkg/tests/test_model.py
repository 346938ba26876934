import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mavnet import ops
from mavnet.autodiff import Tape, Var
from mavnet.model import (Classifier1x1, ConvConvPool, DWFab, Model, ModelConfig, NonBottleneck1D,
                          UpsamplerBlock, block_layers)
from mavnet.ops import receptive_field


def one_block(block, dtype=np.float64, seed=0):
    """A model whose first block is ``block`` (tail blocks only make the config valid)."""
    tail = {ConvConvPool: [UpsamplerBlock(block.out_c, 2), Classifier1x1(2, 2)]}.get(
        type(block), [Classifier1x1(block.out_c, 2)])
    if isinstance(block, UpsamplerBlock):
        cfg = ModelConfig([ConvConvPool(block.in_channels, block.in_channels), block,
                           Classifier1x1(block.out_c, 2)], 2, block.in_channels)
        model = Model(cfg, seed, dtype, zero_residual=False)
        return model, model.blocks[1]
    cfg = ModelConfig([block, *tail], 2, block.in_channels)
    model = Model(cfg, seed, dtype, zero_residual=False)
    return model, model.blocks[0]


def run(model, bp, x):
    return model.forward_block(Tape(record=False), bp, Var(x)).value


def zero_all(bp):
    for _, _, w, b in bp.convs:
        w.value[...] = 0
        b.value[...] = 0


def test_default_config_budget_and_layout():
    cfg = ModelConfig.default()
    kinds = [b.kind for b in cfg.blocks]
    assert kinds == ["conv_conv_pool"] * 2 + ["dwfab"] * 4 + ["upsampler", "non_bottleneck_1d",
                                                             "upsampler", "classifier"]
    assert [b.dilation for b in cfg.blocks if isinstance(b, DWFab)] == [2, 4, 8, 16]
    assert 3900 <= cfg.param_count() <= 4700


def test_single_classifier_params():
    cfg = ModelConfig([Classifier1x1(8, 4)], 4, 8)
    assert cfg.param_count() == 36 == Model(cfg).param_count()


def test_seed_determinism():
    a, b = Model(ModelConfig.default(), seed=5), Model(ModelConfig.default(), seed=5)
    assert all(np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), b.parameters()))
    c = Model(ModelConfig.default(), seed=6)
    assert any(not np.array_equal(p.value, q.value) for p, q in zip(a.parameters(), c.parameters()))


def test_config_validation():
    with pytest.raises(ValueError, match="Classifier1x1"):
        ModelConfig([DWFab(4)], 2, 4).validate()
    with pytest.raises(ValueError, match="channels"):
        ModelConfig([DWFab(4), Classifier1x1(4, 2)], 2, 3).validate()
    with pytest.raises(ValueError, match="downsampling"):
        ModelConfig([ConvConvPool(3, 4), Classifier1x1(4, 2)], 2, 3).validate()
    with pytest.raises(ValueError):
        DWFab(4, 3)


def test_config_dict_round_trip():
    cfg = ModelConfig.default(num_classes=4, input_channels=1, normalization=True)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    with pytest.raises(ValueError, match="unknown block"):
        ModelConfig.from_dict({"num_classes": 2, "blocks": [{"kind": "lstm"}]})


def test_conv_conv_pool_block():
    model, bp = one_block(ConvConvPool(3, 8))
    x = np.random.default_rng(0).normal(size=(1, 3, 64, 64))
    y = run(model, bp, x)
    assert y.shape == (1, 8, 32, 32)
    (_, s1, w1, b1), (_, s2, w2, b2) = bp.convs
    hand = ops.conv2d(x, s1, w1.value, b1.value)
    hand = ops.conv2d(np.maximum(hand, 0), s2, w2.value, b2.value)
    hand = ops.maxpool2x2(np.maximum(hand, 0))[0]
    assert np.array_equal(y, hand)
    zero_all(bp)
    assert np.all(run(model, bp, x) == 0)


@pytest.mark.parametrize("d", [1, 2, 4, 8, 16])
def test_dwfab_block(d):
    model, bp = one_block(DWFab(4, d))
    x = np.random.default_rng(d).normal(size=(2, 4, 32, 32))
    y = run(model, bp, x)
    assert y.shape == x.shape
    (_, s1, w1, b1), (_, s2, w2, b2), (_, s3, w3, b3), (_, s4, w4, b4) = bp.convs
    assert s1.dilation == 1 and s3.dilation == d and s1.groups == s3.groups == 4
    t = np.maximum(ops.conv2d(ops.conv2d(x, s1, w1.value, b1.value), s2, w2.value, b2.value), 0)
    t = ops.conv2d(ops.conv2d(t, s3, w3.value, b3.value), s4, w4.value, b4.value)
    assert np.array_equal(y, np.maximum(x + t, 0))
    zero_all(bp)
    assert np.array_equal(run(model, bp, x), np.maximum(x, 0))


def test_dwfab_receptive_field():
    # dw1 contributes 2, the D=16 depthwise 2 * 16
    for d in (2, 4, 8, 16):
        assert receptive_field(block_layers(DWFab(4, d))) == (3 + 2 * d, 3 + 2 * d)


def test_non_bottleneck_block():
    model, bp = one_block(NonBottleneck1D(4))
    x = np.random.default_rng(1).normal(size=(1, 4, 16, 16))
    (_, s1, w1, b1), (_, s2, w2, b2), (_, s3, w3, b3), (_, s4, w4, b4) = bp.convs
    assert [(s.kernel_h, s.kernel_w) for s in (s1, s2, s3, s4)] == [(3, 1), (1, 3), (3, 1), (1, 3)]
    t = np.maximum(ops.conv2d(x, s1, w1.value, b1.value), 0)
    t = ops.conv2d(ops.conv2d(t, s2, w2.value, b2.value), s3, w3.value, b3.value)
    t = ops.conv2d(np.maximum(t, 0), s4, w4.value, b4.value)
    assert np.array_equal(run(model, bp, x), np.maximum(x + t, 0))
    zero_all(bp)
    assert np.array_equal(run(model, bp, x), np.maximum(x, 0))


def test_upsampler_block():
    model, bp = one_block(UpsamplerBlock(8, 4))
    x = np.random.default_rng(2).normal(size=(1, 8, 16, 16))
    assert run(model, bp, x).shape == (1, 4, 32, 32)

    model, bp = one_block(UpsamplerBlock(3, 3))
    _, spec, w, b = bp.convs[0]
    w.value[...] = 0
    for k in range(3):
        w.value[k, k, 1, 1] = 1
    b.value[...] = 0
    x = np.abs(np.random.default_rng(3).normal(size=(1, 3, 5, 6)))
    assert np.array_equal(run(model, bp, x), ops.upsample_nearest_x2(x))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.floats(-2, 2))
def test_upsampler_no_checkerboard(seed, level):
    model, bp = one_block(UpsamplerBlock(3, 4), seed=seed % 1000)
    x = np.full((1, 3, 8, 8), level)
    y = run(model, bp, x)[:, :, 1:-1, 1:-1]
    # exact constancy (np.var itself rounds to ~1e-32 on identical values)
    assert np.all(np.ptp(y, axis=(2, 3)) == 0)


def test_full_forward_shapes_and_determinism():
    model = Model(ModelConfig.default())
    x = np.random.default_rng(4).random((1, 3, 64, 64), dtype=np.float32)
    y = model.forward(x)
    assert y.shape == (1, 2, 64, 64) and y.dtype == np.float32
    assert np.array_equal(y, model.forward(x))
    with pytest.raises(ValueError, match="divisible by 4"):
        model.forward(np.zeros((1, 3, 62, 64), np.float32))
    with pytest.raises(ValueError, match="channels"):
        model.forward(np.zeros((1, 1, 64, 64), np.float32))


def test_non_square_and_other_sizes():
    model = Model(ModelConfig.default(num_classes=4))
    for h, w in [(4, 8), (36, 20), (128, 96)]:
        assert model.forward(np.zeros((2, 3, h, w), np.float32)).shape == (2, 4, h, w)


def test_dilation_ablation_same_params_smaller_rf():
    full = ModelConfig.default()
    flat = ModelConfig.default(dilations=(1, 1, 1, 1))
    assert full.param_count() == flat.param_count()
    rf_full = receptive_field(full.layer_stack(full.encoder_blocks()))
    rf_flat = receptive_field(flat.layer_stack(flat.encoder_blocks()))
    assert rf_flat[0] < rf_full[0] and rf_flat[1] < rf_full[1]


def test_encoder_rf_strictly_increases():
    cfg = ModelConfig.default()
    sizes = []
    stack = []
    for b in cfg.encoder_blocks():
        stack += block_layers(b)
        sizes.append(receptive_field(stack)[0])
    assert all(a < b for a, b in zip(sizes, sizes[1:]))


@st.composite
def random_config(draw):
    c_in = draw(st.sampled_from([1, 3]))
    n = draw(st.integers(2, 5))
    c1, c2, c3 = (draw(st.integers(1, 12)) for _ in range(3))
    dil = tuple(draw(st.lists(st.sampled_from([1, 2, 4, 8, 16]), min_size=0, max_size=5)))
    norm = draw(st.booleans())
    blocks = [ConvConvPool(c_in, c1), ConvConvPool(c1, c2), *[DWFab(c2, d) for d in dil],
              UpsamplerBlock(c2, c3), *([NonBottleneck1D(c3)] * draw(st.integers(0, 2))),
              UpsamplerBlock(c3, c3), Classifier1x1(c3, n)]
    return ModelConfig(blocks, n, c_in, norm)


@settings(max_examples=50, deadline=None)
@given(random_config())
def test_param_count_matches_built_model(cfg):
    model = Model(cfg)
    assert cfg.param_count() == model.param_count()
    assert model.forward(np.zeros((1, cfg.input_channels, 8, 12), np.float32)).shape == (1, cfg.num_classes, 8, 12)


def test_residual_branches_start_as_identity():
    model = Model(ModelConfig.default(), seed=0)
    for bp in model.blocks:
        if isinstance(bp.block, (DWFab, NonBottleneck1D)):
            x = np.abs(np.random.default_rng(0).normal(size=(1, bp.block.channels, 8, 8)))
            assert np.array_equal(run(model, bp, x), x)
