from dataclasses import replace

import pytest

from fusioncount import analysis
from fusioncount.model import REDUCTION_VARIANTS, ModelConfig

# independent 13-term sum: (out h, out w, sum over convs of cin*cout) per pooling level, 3x3 kernels
def encoder_oracle(h, w):
    levels = [(64 * 3 + 64 * 64), (64 * 128 + 128 * 128), (128 * 256 + 2 * 256 * 256),
              (256 * 512 + 2 * 512 * 512), 3 * 512 * 512]
    total = 0
    for pairs in levels:
        total += h * w * pairs * 9
        h, w = h // 2, w // 2
    return total


ENCODER_1080 = 633_798_328_320  # frozen from encoder_oracle(1080, 1920)


def test_oracle_frozen_value():
    assert encoder_oracle(1080, 1920) == ENCODER_1080


# -- receptive fields -------------------------------------------------------------

def test_rf_examples():
    sizes = analysis.receptive_fields().sizes
    assert len(sizes) == 15
    assert sizes[0] == 6
    assert sizes[3] == 16


def test_rf_by_hand_recurrence():
    # conv1_1, conv1_2, pool1, conv2_1, conv2_2, pool2
    steps = analysis.receptive_field([(3, 1, 1), (3, 1, 1), (2, 2, 1), (3, 1, 1), (3, 1, 1), (2, 2, 1)])
    assert [r for r, _ in steps] == [3, 5, 6, 10, 14, 16]
    assert steps[-1][1] == 4


def test_rf_single_conv():
    assert analysis.receptive_field([(3, 1, 1)]) == [(3, 1)]


def test_rf_dilation():
    assert analysis.receptive_field([(3, 1, 2)])[0][0] == 5


def test_rf_monotone_and_range():
    report = analysis.receptive_fields()
    sizes = report.sizes
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))
    conv_taps = [t[2] for t in report.taps if t[1].startswith("conv")]
    assert all(b > a for a, b in zip(conv_taps, conv_taps[1:]))
    assert report.min == 6
    assert 192 <= report.max <= 200


def test_rf_independent_of_config():
    assert (analysis.receptive_fields(ModelConfig(reduction="pointwise-only")).sizes
            == analysis.receptive_fields().sizes)


# -- mult-adds ----------------------------------------------------------------------

def test_single_conv_closed_formula():
    layer = analysis.conv_layer("c", "encoder", 64, 64, (112, 112))
    assert layer.out_hw == (112, 112)
    assert layer.mult_adds == 462_422_016


def test_dilated_conv_counts_like_plain_kernel():
    plain = analysis.conv_layer("a", "decoder", 64, 32, (20, 30))
    dilated = analysis.conv_layer("b", "decoder", 64, 32, (20, 30), dilation=2)
    assert dilated.out_hw == plain.out_hw
    assert dilated.mult_adds == plain.mult_adds


def test_non_conv_layers_are_free():
    report = analysis.mult_adds()
    assert all(l.mult_adds == 0 for l in report.layers if l.kind != "conv")


def test_encoder_subtotal_matches_oracle():
    assert analysis.mult_adds().subtotals["encoder"] == ENCODER_1080
    for h, w in ((224, 224), (540, 960), (96, 128)):
        assert analysis.mult_adds(height=h, width=w).subtotals["encoder"] == encoder_oracle(h, w)


def test_total_is_sum_of_parts():
    report = analysis.mult_adds()
    assert report.total == sum(report.subtotals.values())
    assert report.total == sum(l.mult_adds for l in report.layers)


def test_full_model_near_reported_cost():
    total = analysis.mult_adds().total
    assert abs(total / 815.00e9 - 1) <= 0.15
    assert total < 853.70e9


def test_calibration_fixture():
    ref = analysis.csrnet_mult_adds().total
    assert abs(ref / 856.99e9 - 1) <= 0.02


def test_area_linearity_when_every_level_divides():
    big = analysis.mult_adds(height=1088, width=1920)
    small = analysis.mult_adds(height=544, width=960)
    assert big.subtotals["encoder"] == 4 * small.subtotals["encoder"]
    assert big.total == 4 * small.total
    for a, b in zip(big.layers, small.layers):
        assert a.mult_adds == 4 * b.mult_adds


def test_area_linearity_at_540x960():
    # pools floor odd sizes, so only levels whose halving is exact scale by a quarter
    big = analysis.mult_adds(height=1080, width=1920)
    small = analysis.mult_adds(height=540, width=960)
    exact = 0
    for a, b in zip(big.layers, small.layers):
        if a.kind != "conv":
            continue
        assert a.mult_adds // (a.out_hw[0] * a.out_hw[1]) == b.mult_adds // (b.out_hw[0] * b.out_hw[1])
        if a.out_hw == (2 * b.out_hw[0], 2 * b.out_hw[1]):
            assert a.mult_adds == 4 * b.mult_adds
            exact += 1
    assert exact >= 9  # the first three pooling levels of the encoder at least


def test_mult_adds_proportional_to_output_area():
    for name in ("encoder.conv3_1", "fusion2.bottleneck", "reduce3.dilated1", "head"):
        per_pixel = set()
        for h, w in ((64, 64), (128, 96), (1088, 1920)):
            layer = next(l for l in analysis.mult_adds(height=h, width=w).layers if l.name == name)
            per_pixel.add(layer.mult_adds / (layer.out_hw[0] * layer.out_hw[1]))
        assert len(per_pixel) == 1, name


@pytest.mark.parametrize("config", [ModelConfig(reduction=v) for v in REDUCTION_VARIANTS]
                         + [ModelConfig(use_contrast=False),
                            ModelConfig(fused_channels=(32, 64, 128, 256))])
def test_encoder_independent_of_design_choices(config):
    assert analysis.mult_adds(config).subtotals["encoder"] == ENCODER_1080


def test_no_contrast_drops_expand_cost():
    full = analysis.mult_adds()
    ablated = analysis.mult_adds(replace(ModelConfig(), use_contrast=False))
    expand = sum(l.mult_adds for l in full.layers if l.name.endswith(".expand"))
    assert expand > 0
    assert full.total - ablated.total == expand


def test_odd_size_profile():
    report = analysis.mult_adds(height=1080, width=1920)
    pools = [l for l in report.layers if l.kind == "pool"]
    assert pools[-1].out_hw == (67, 120)


def test_cost_csv_rows():
    report = analysis.mult_adds()
    lines = analysis.cost_csv(report).strip().split("\n")
    assert lines[0] == "layer,kind,out_shape,mult_adds"
    assert len(lines) - 1 == len(report.layers)
    assert lines[1] == "encoder.conv1_1,conv,64x1080x1920,{}".format(1080 * 1920 * 3 * 64 * 9)


def test_text_table_mentions_total():
    text = analysis.format_cost(analysis.mult_adds())
    assert "718,074,101,760" in text
    assert "floor" in text
