from dataclasses import replace

import numpy as np
import pytest

from fusioncount import tensor as T
from fusioncount.analysis import parameter_count
from fusioncount.gradcheck import MODEL_TOLERANCE, model_gradcheck
from fusioncount.model import (REDUCTION_VARIANTS, ChannelReductionParams, FusionBlockParams,
                               FusionCount, ModelConfig, channel_reduce, conv_specs, decode,
                               encode, fuse_group, init_parameters, parameter_manifest)
from fusioncount.tensor import ConvParams, ShapeError


def _conv(rng, cin, cout, k=1, dil=1, scale=0.3, dtype=np.float64):
    w = (rng.standard_normal((cout, cin, k, k)) * scale).astype(dtype)
    b = (rng.standard_normal(cout) * 0.1).astype(dtype)
    return ConvParams(w, b, padding=dil if k == 3 else 0, dilation=dil)


def _block(rng, c, cs, f, use_contrast=True, dtype=np.float64):
    return FusionBlockParams(_conv(rng, c, cs, dtype=dtype), _conv(rng, c + cs, f, dtype=dtype),
                             use_contrast)


@pytest.fixture(scope="module")
def taps224():
    model = FusionCount(ModelConfig(seed=0))
    image = np.random.default_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
    taps, _ = encode(image, model.params)
    return model, image, taps


# -- encode -------------------------------------------------------------------

def test_encode_224_tap_shapes(taps224):
    _, _, taps = taps224
    assert len(taps) == 15
    assert taps[0].shape == (1, 64, 112, 112)
    assert taps[14].shape == (1, 512, 14, 14)
    channels = [t.shape[1] for t in taps.features]
    assert channels == [64, 128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512, 512, 512, 512]


def test_encode_group_sizes_32():
    model = FusionCount(ModelConfig(seed=0), dtype=np.float64)
    taps, _ = encode(np.zeros((1, 3, 32, 32)), model.params)
    sizes = []
    for k in range(4):
        leader, followers = taps.group(k)
        assert all(y.shape[2:] == leader.shape[2:] for y in followers)
        sizes.append(leader.shape[2])
    assert sizes == [16, 8, 4, 2]


def test_encode_rejects_indivisible_input():
    model = FusionCount(ModelConfig(seed=0))
    with pytest.raises(ShapeError, match="pad"):
        model.forward(np.zeros((1, 3, 30, 30), np.float32))


def test_encode_rejects_wrong_channels():
    model = FusionCount(ModelConfig(seed=0))
    with pytest.raises(ShapeError) as exc:
        model.forward(np.zeros((1, 1, 32, 32), np.float32))
    assert exc.value.dim == "c"


# -- fuse_group -------------------------------------------------------------------

def _reference_fusion(leader, followers, p, gate_override=None):
    """Straight-line evaluation of expand, contrast, gate, weighted sum, bottleneck."""
    n, c, h, w = leader.shape
    we = p.expand.weights[:, :, 0, 0]
    expanded = np.matmul(we, leader.reshape(n, c, h * w))
    expanded += p.expand.bias[None, :, None]
    expanded = expanded.reshape(n, -1, h, w)
    acc = None
    for y in followers:
        z = y - expanded if p.use_contrast else y
        with np.errstate(over="ignore"):
            e = np.exp(z)
            gate = np.where(z >= 0, 1 / (1 + np.exp(-z)), e / (1 + e))
        if gate_override is not None:
            gate = np.full_like(y, gate_override)
        term = gate * y
        acc = term if acc is None else acc + term
    cat = np.concatenate([leader, acc], axis=1)
    wb = p.bottleneck.weights[:, :, 0, 0]
    z = np.matmul(wb, cat.reshape(n, cat.shape[1], h * w))
    z += p.bottleneck.bias[None, :, None]
    return np.maximum(z, 0).reshape(n, -1, h, w)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("use_contrast", [True, False])
def test_fusion_matches_straight_line_oracle(dtype, use_contrast):
    rng = np.random.default_rng(3)
    p = _block(rng, 4, 6, 4, use_contrast, dtype)
    leader = rng.standard_normal((2, 4, 5, 7)).astype(dtype)
    followers = [rng.standard_normal((2, 6, 5, 7)).astype(dtype) for _ in range(3)]
    f, _ = fuse_group(leader, followers, p)
    assert f.dtype == dtype
    np.testing.assert_array_equal(f, _reference_fusion(leader, followers, p))


def test_zero_contrast_gives_half_gates():
    rng = np.random.default_rng(0)
    p = _block(rng, 3, 5, 4)
    leader = rng.standard_normal((1, 3, 4, 4))
    expanded = T.conv2d(leader, p.expand)
    followers = [expanded.copy(), expanded.copy()]
    f, cache = fuse_group(leader, followers, p)
    gates = cache[2]
    assert all((g == 0.5).all() for g in gates)
    acc = cache[3][:, 3:]
    np.testing.assert_array_equal(acc, 0.5 * (followers[0] + followers[1]))
    # with zero contrast, fixed 0.5 gating is indistinguishable from sigmoid gating
    np.testing.assert_array_equal(f, _reference_fusion(leader, followers, p, gate_override=0.5))


def test_fixed_half_gating_changes_output_on_nonzero_contrast():
    rng = np.random.default_rng(1)
    p = _block(rng, 3, 5, 4)
    leader = rng.standard_normal((1, 3, 4, 4))
    followers = [rng.standard_normal((1, 5, 4, 4)) for _ in range(2)]
    f, _ = fuse_group(leader, followers, p)
    assert not np.array_equal(f, _reference_fusion(leader, followers, p, gate_override=0.5))


def test_gates_strictly_inside_unit_interval():
    rng = np.random.default_rng(2)
    p = _block(rng, 3, 5, 4)
    leader = rng.standard_normal((1, 3, 4, 4)) * 100
    followers = [rng.standard_normal((1, 5, 4, 4)) * 1e4 for _ in range(3)]
    _, cache = fuse_group(leader, followers, p)
    for g in cache[2]:
        assert (g > 0).all() and (g < 1).all()


def test_fusion_group1_shape_224(taps224):
    model, _, taps = taps224
    leader, followers = taps.group(0)
    f, _ = fuse_group(leader, followers, model.fusion_params(1))
    assert f.shape == (1, 64, 112, 112)


def test_fusion_shape_errors():
    rng = np.random.default_rng(0)
    p = _block(rng, 3, 5, 4)
    with pytest.raises(ShapeError):
        fuse_group(np.zeros((1, 2, 4, 4)), [np.zeros((1, 5, 4, 4))], p)
    with pytest.raises(ShapeError):
        fuse_group(np.zeros((1, 3, 4, 4)), [np.zeros((1, 4, 4, 4))], p)
    with pytest.raises(ShapeError):
        fuse_group(np.zeros((1, 3, 4, 4)), [np.zeros((1, 5, 2, 4))], p)


# -- channel_reduce -----------------------------------------------------------------

def _reducer(rng, variant, cin, zero_bias=False):
    cout = cin // 2
    kw = {}
    if variant != "pointwise-only":
        kw["dilated1"] = _conv(rng, cin, cout, 3, 2)
        if variant != "one-dilated+pointwise":
            kw["dilated2"] = _conv(rng, cout, cout, 3, 2)
    if variant != "two-dilated-only":
        kw["pointwise"] = _conv(rng, cin, cout)
    if zero_bias:
        for v in kw.values():
            v.bias[:] = 0
    return ChannelReductionParams(variant, **kw)


@pytest.mark.parametrize("variant", REDUCTION_VARIANTS)
def test_reduce_zero_input_zero_output(variant):
    p = _reducer(np.random.default_rng(0), variant, 8, zero_bias=True)
    y, _ = channel_reduce(np.zeros((1, 8, 6, 6)), p)
    assert y.shape == (1, 4, 6, 6)
    assert not y.any()


def test_reduce_halves_channels_512():
    rng = np.random.default_rng(0)
    p = ChannelReductionParams("two-dilated+pointwise",
                               _conv(rng, 512, 256, 3, 2, 0.02, np.float32),
                               _conv(rng, 256, 256, 3, 2, 0.02, np.float32),
                               _conv(rng, 512, 256, 1, 1, 0.02, np.float32))
    y, _ = channel_reduce(rng.standard_normal((1, 512, 14, 14)).astype(np.float32), p)
    assert y.shape == (1, 256, 14, 14)


def test_pointwise_only_equals_bare_conv():
    rng = np.random.default_rng(4)
    p = _reducer(rng, "pointwise-only", 6)
    x = rng.standard_normal((2, 6, 5, 5))
    y, _ = channel_reduce(x, p)
    np.testing.assert_array_equal(y, T.conv2d(x, p.pointwise))


def test_two_stream_composition():
    rng = np.random.default_rng(5)
    p = _reducer(rng, "two-dilated+pointwise", 6)
    x = rng.standard_normal((1, 6, 7, 7))
    y, _ = channel_reduce(x, p)
    expect = T.relu(T.conv2d(T.relu(T.conv2d(x, p.dilated1)), p.dilated2)) + T.conv2d(x, p.pointwise)
    np.testing.assert_array_equal(y, expect)


def test_reduce_odd_channels():
    p = _reducer(np.random.default_rng(0), "pointwise-only", 6)
    with pytest.raises(ShapeError) as exc:
        channel_reduce(np.zeros((1, 7, 4, 4)), p)
    assert exc.value.dim == "c"


def test_reduction_params_validate_streams():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        ChannelReductionParams("pointwise-only", dilated1=_conv(rng, 4, 2, 3, 2),
                               pointwise=_conv(rng, 4, 2))


# -- decode / whole model -------------------------------------------------------------

def test_density_shape_224(taps224):
    model, image, _ = taps224
    density = model.forward(image, keep_cache=False)
    assert density.shape == (1, 1, 112, 112)
    assert density.min() >= 0


def test_all_zero_parameters_zero_density():
    model = FusionCount(ModelConfig(seed=0))
    params = {k: np.zeros_like(v) for k, v in model.params.items()}
    model = FusionCount(model.config, params)
    image = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    assert not model.forward(image).any()
    assert model.count(image)[0] == 0


def test_zero_input_zero_density_at_init():
    model = FusionCount(ModelConfig(seed=3))
    assert not model.forward(np.zeros((1, 3, 32, 32), np.float32)).any()


@pytest.mark.parametrize("seed", range(4))
def test_density_nonnegative_random(seed):
    rng = np.random.default_rng(seed)
    model = FusionCount(ModelConfig(seed=seed))
    for k, v in model.params.items():
        if k.endswith(".bias"):
            v[:] = rng.standard_normal(v.shape) * 0.1
    density = model.forward(rng.standard_normal((2, 3, 32, 48)).astype(np.float32))
    assert density.min() >= 0


@pytest.mark.parametrize("hw", [(16, 16), (32, 48), (48, 16), (64, 32)])
def test_output_is_half_resolution(hw):
    model = FusionCount(ModelConfig(seed=0))
    density = model.forward(np.zeros((1, 3, *hw), np.float32))
    assert density.shape == (1, 1, hw[0] // 2, hw[1] // 2)


def test_doubling_width_doubles_density_width():
    model = FusionCount(ModelConfig(seed=0))
    image = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    a = model.forward(image)
    b = model.forward(np.concatenate([image, image], axis=3))
    assert b.shape[3] == 2 * a.shape[3]
    assert b.shape[2] == a.shape[2]


def test_count_is_density_sum():
    model = FusionCount(ModelConfig(seed=2, init="he-encoder"))
    image = np.random.default_rng(2).standard_normal((2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(model.count(image), model.forward(image).sum(axis=(1, 2, 3)))


def test_decode_ladder_mismatch():
    model = FusionCount(ModelConfig(seed=0))
    reducers = {k: model.reduction_params(k) for k in (4, 3, 2)}
    head = model.fusion_params(1).bottleneck
    fused = [np.zeros((1, c, s, s), np.float32) for c, s in ((64, 16), (128, 8), (256, 4), (256, 2))]
    with pytest.raises(ShapeError, match="ladder"):
        decode(fused, reducers, head)


def test_config_rejects_bad_ladder_and_variant():
    with pytest.raises(ValueError):
        ModelConfig(fused_channels=(64, 100, 200, 400))
    with pytest.raises(ValueError):
        ModelConfig(reduction="three-dilated")
    with pytest.raises(ValueError):
        ModelConfig(init="xavier")


def test_params_validated_against_config():
    params = init_parameters(ModelConfig())
    with pytest.raises(KeyError):
        FusionCount(ModelConfig(reduction="pointwise-only"), params)
    params["head.weight"] = np.zeros((1, 32, 1, 1), np.float32)
    with pytest.raises(ShapeError):
        FusionCount(ModelConfig(), params)


def test_manifest_order():
    names = [n for n, _ in parameter_manifest(ModelConfig())]
    assert names[0] == "encoder.conv1_1.weight"
    assert names[25] == "encoder.conv5_3.bias"
    assert names[26] == "fusion1.expand.weight"
    assert names[-2:] == ["head.weight", "head.bias"]
    reduce_order = [n.split(".")[0] for n in names if n.startswith("reduce")]
    assert reduce_order == sorted(reduce_order, reverse=True)


# -- initialization ---------------------------------------------------------------

def test_init_deterministic_and_seed_sensitive():
    a = init_parameters(ModelConfig(seed=5))
    b = init_parameters(ModelConfig(seed=5))
    c = init_parameters(ModelConfig(seed=6))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith("weight"))
    assert all(not v.any() for k, v in a.items() if k.endswith("bias"))


def test_init_he_scale():
    params = init_parameters(ModelConfig(seed=0))
    w = params["encoder.conv3_2.weight"]
    assert abs(w.std() / np.sqrt(2 / (256 * 9)) - 1) < 0.01
    w = params["fusion4.bottleneck.weight"]
    assert abs(w.std() / np.sqrt(2 / 1024) - 1) < 0.01
    small = init_parameters(ModelConfig(seed=0, init="he-encoder"))
    np.testing.assert_array_equal(small["encoder.conv3_2.weight"], params["encoder.conv3_2.weight"])
    assert abs(small["fusion4.bottleneck.weight"].std() / 0.01 - 1) < 0.01


# -- ablation structure ---------------------------------------------------------------

def test_no_contrast_same_parameter_count_different_output():
    base = ModelConfig(seed=0)
    ablated = replace(base, use_contrast=False)
    assert parameter_count(base) == parameter_count(ablated)
    a = FusionCount(base, dtype=np.float64)
    b = FusionCount(ablated, {k: v.copy() for k, v in a.params.items()}, dtype=np.float64)
    assert a.num_parameters() == b.num_parameters()
    image = np.random.default_rng(0).standard_normal((1, 3, 32, 32))
    assert not np.array_equal(a.forward(image), b.forward(image))


def test_reduction_variant_parameter_ordering():
    counts = {v: parameter_count(ModelConfig(reduction=v)) for v in REDUCTION_VARIANTS}
    assert (counts["two-dilated+pointwise"] > counts["one-dilated+pointwise"]
            > counts["pointwise-only"])
    pointwise = sum(s.in_channels * s.out_channels + s.out_channels
                    for s in conv_specs(ModelConfig()) if s.name.endswith(".pointwise"))
    assert counts["two-dilated+pointwise"] - counts["two-dilated-only"] == pointwise
    for v in REDUCTION_VARIANTS:
        model = FusionCount(ModelConfig(reduction=v))
        assert model.num_parameters() == counts[v]
        density = model.forward(np.zeros((1, 3, 32, 32), np.float32))
        assert density.shape == (1, 1, 16, 16)


# -- gradients ---------------------------------------------------------------------

def test_backward_requires_cache():
    model = FusionCount(ModelConfig(seed=0))
    model.forward(np.zeros((1, 3, 16, 16), np.float32), keep_cache=False)
    with pytest.raises(RuntimeError):
        model.backward(np.zeros((1, 1, 8, 8), np.float32))


def test_backward_returns_every_parameter():
    model = FusionCount(ModelConfig(seed=0))
    model.forward(np.random.default_rng(0).standard_normal((1, 3, 16, 16)).astype(np.float32))
    grads = model.backward(np.ones((1, 1, 8, 8), np.float32))
    assert list(grads) == list(model.params)
    assert all(grads[k].shape == v.shape for k, v in model.params.items())


@pytest.mark.parametrize("config", [ModelConfig(seed=1),
                                    ModelConfig(seed=2, use_contrast=False,
                                                reduction="one-dilated+pointwise")])
def test_whole_model_gradient(config):
    worst, checked, _ = model_gradcheck(seed=config.seed, config=config)
    assert checked == 50
    assert worst < MODEL_TOLERANCE
