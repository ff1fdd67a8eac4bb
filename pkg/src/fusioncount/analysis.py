"""Static analyzers over the architecture: receptive fields of the encoder
taps and per-layer mult-adds (one multiply-accumulate = one mult-add, conv
kernels only)."""
import csv
import io
from dataclasses import dataclass

from .model import ENCODER_LAYERS, ModelConfig, conv_specs

CLAIMED_RF_RANGE = (6, 192)


@dataclass(frozen=True)
class LayerDescriptor:
    name: str
    kind: str            # conv | pool | upsample | add | concat
    stage: str           # encoder | fusion | decoder
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    in_channels: int = 0
    out_channels: int = 0
    in_hw: tuple = (0, 0)
    out_hw: tuple = (0, 0)

    @property
    def mult_adds(self):
        if self.kind != "conv":
            return 0
        ho, wo = self.out_hw
        return ho * wo * self.in_channels * self.out_channels * self.kernel * self.kernel

    @property
    def out_shape(self):
        return (self.out_channels, *self.out_hw)


def conv_layer(name, stage, cin, cout, hw, kernel=3, dilation=1, stride=1):
    pad = dilation if kernel == 3 else 0
    span = dilation * (kernel - 1) + 1
    out = tuple((s + 2 * pad - span) // stride + 1 for s in hw)
    return LayerDescriptor(name, "conv", stage, kernel, stride, pad, dilation, cin, cout,
                           tuple(hw), out)


def pool_layer(name, stage, channels, hw):
    return LayerDescriptor(name, "pool", stage, 2, 2, 0, 1, channels, channels, tuple(hw),
                           (hw[0] // 2, hw[1] // 2))


# --------------------------------------------------------------------------
# Receptive fields


@dataclass
class RfReport:
    taps: list   # (tap label, layer name, receptive field, jump)

    @property
    def sizes(self):
        return [t[2] for t in self.taps]

    @property
    def min(self):
        return min(self.sizes)

    @property
    def max(self):
        return max(self.sizes)


def receptive_field(layers):
    """Receptive field and jump after each of ``layers``.

    ``layers`` is a sequence of ``(kernel, stride, dilation)`` triples. Effective
    kernel ``k + (k - 1)(d - 1)``; ``r += (k_eff - 1) * j``; ``j *= s``.
    """
    r, j = 1, 1
    out = []
    for k, s, d in layers:
        k_eff = k + (k - 1) * (d - 1)
        r += (k_eff - 1) * j
        j *= s
        out.append((r, j))
    return out


def receptive_fields(config=None):
    """Receptive field of each of the 15 encoder taps.

    The encoder is fixed, so ``config`` does not change the result; it is
    accepted so every analyzer shares one signature.
    """
    names, geometry = [], []
    pool_no = 0
    for layer in ENCODER_LAYERS:
        if layer == "pool":
            pool_no += 1
            names.append(f"pool{pool_no}")
            geometry.append((2, 2, 1))
        else:
            names.append(layer[0])
            geometry.append((3, 1, 1))
    fields = receptive_field(geometry)
    first_tap = names.index("pool1")
    taps = [(f"x{i + 1}", name, r, j)
            for i, (name, (r, j)) in enumerate(zip(names[first_tap:], fields[first_tap:]))]
    return RfReport(taps)


def format_rf(report):
    lines = [f"{'tap':<5}{'layer':<10}{'rf':>6}{'jump':>6}"]
    for label, name, r, j in report.taps:
        lines.append(f"{label:<5}{name:<10}{r:>6}{j:>6}")
    lines.append(f"min {report.min}  max {report.max} *")
    lines.append(f"* the commonly cited range is {CLAIMED_RF_RANGE[0]} to {CLAIMED_RF_RANGE[1]}; "
                 f"the jump/kernel recurrence gives {report.max} at the deepest tap")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# Mult-adds


@dataclass
class CostReport:
    height: int
    width: int
    layers: list

    @property
    def subtotals(self):
        out = {}
        for layer in self.layers:
            out[layer.stage] = out.get(layer.stage, 0) + layer.mult_adds
        return out

    @property
    def total(self):
        return sum(layer.mult_adds for layer in self.layers)


def _level_sizes(h, w, levels=5):
    sizes = [(h, w)]
    for _ in range(levels - 1):
        h, w = h // 2, w // 2
        sizes.append((h, w))
    return sizes


def model_layers(config, height, width):
    """Layer descriptors of the full model; pools use floor division, so
    sizes not divisible by 16 still produce a profile."""
    sizes = _level_sizes(height, width)
    layers = []
    hw = sizes[0]
    pool_no = 0
    for layer in ENCODER_LAYERS:
        if layer == "pool":
            pool_no += 1
            layers.append(pool_layer(f"encoder.pool{pool_no}", "encoder", layers[-1].out_channels, hw))
            hw = layers[-1].out_hw
        else:
            name, cin, cout = layer
            layers.append(conv_layer(f"encoder.{name}", "encoder", cin, cout, hw))

    specs = {s.name: s for s in conv_specs(config)}
    for k in range(1, 5):
        hw = sizes[k]
        expand = specs[f"fusion{k}.expand"]
        bottleneck = specs[f"fusion{k}.bottleneck"]
        if config.use_contrast:
            layers.append(conv_layer(expand.name, "fusion", expand.in_channels,
                                     expand.out_channels, hw, kernel=1))
        layers.append(LayerDescriptor(f"fusion{k}.concat", "concat", "fusion",
                                      in_channels=bottleneck.in_channels,
                                      out_channels=bottleneck.in_channels, in_hw=hw, out_hw=hw))
        layers.append(conv_layer(bottleneck.name, "fusion", bottleneck.in_channels,
                                 bottleneck.out_channels, hw, kernel=1))

    for k in (4, 3, 2):
        hw = sizes[k]
        cout = None
        for stream in ("dilated1", "dilated2", "pointwise"):
            s = specs.get(f"reduce{k}.{stream}")
            if s is None:
                continue
            layers.append(conv_layer(s.name, "decoder", s.in_channels, s.out_channels, hw,
                                     kernel=s.kernel, dilation=s.dilation))
            cout = s.out_channels
        up = (2 * hw[0], 2 * hw[1])
        layers.append(LayerDescriptor(f"reduce{k}.upsample", "upsample", "decoder", 2, 1, 0, 1,
                                      cout, cout, hw, up))
        layers.append(LayerDescriptor(f"add{k - 1}", "add", "decoder", in_channels=cout,
                                      out_channels=cout, in_hw=sizes[k - 1], out_hw=sizes[k - 1]))
    head = specs["head"]
    layers.append(conv_layer("head", "decoder", head.in_channels, 1, sizes[1], kernel=1))
    return layers


def mult_adds(config=None, height=1080, width=1920):
    config = config or ModelConfig()
    return CostReport(height, width, model_layers(config, height, width))


def csrnet_layers(height, width):
    """Calibration fixture: VGG-16 up to conv4_3 plus CSRNet's dilated back end
    (512, 512, 512, 256, 128, 64; dilation 2) and a 1x1 output layer."""
    layers = []
    hw = (height, width)
    pool_no = 0
    for layer in ENCODER_LAYERS[:13]:
        if layer == "pool":
            pool_no += 1
            layers.append(pool_layer(f"frontend.pool{pool_no}", "encoder",
                                     layers[-1].out_channels, hw))
            hw = layers[-1].out_hw
        else:
            name, cin, cout = layer
            layers.append(conv_layer(f"frontend.{name}", "encoder", cin, cout, hw))
    cin = 512
    for i, cout in enumerate((512, 512, 512, 256, 128, 64)):
        layers.append(conv_layer(f"backend.conv{i + 1}", "decoder", cin, cout, hw, dilation=2))
        cin = cout
    layers.append(conv_layer("output", "decoder", 64, 1, hw, kernel=1))
    return layers


def csrnet_mult_adds(height=1080, width=1920):
    return CostReport(height, width, csrnet_layers(height, width))


def format_cost(report):
    lines = [
        f"mult-adds for a {report.height}x{report.width} RGB input "
        f"(1 MAC = 1 mult-add, conv kernels only; pools floor odd sizes)",
        f"{'layer':<24}{'kind':<10}{'out shape':<20}{'mult-adds':>18}",
    ]
    for layer in report.layers:
        shape = "x".join(str(v) for v in layer.out_shape)
        lines.append(f"{layer.name:<24}{layer.kind:<10}{shape:<20}{layer.mult_adds:>18,}")
    for stage, value in report.subtotals.items():
        lines.append(f"{'subtotal ' + stage:<54}{value:>18,}")
    lines.append(f"{'total':<54}{report.total:>18,}  ({report.total / 1e9:.2f} G)")
    return "\n".join(lines)


def cost_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "out_shape", "mult_adds"])
    for layer in report.layers:
        w.writerow([layer.name, layer.kind, "x".join(str(v) for v in layer.out_shape),
                    layer.mult_adds])
    return buf.getvalue()


def parameter_count(config):
    return sum(s.in_channels * s.out_channels * s.kernel * s.kernel + s.out_channels
               for s in conv_specs(config))
