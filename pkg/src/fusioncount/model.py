"""FusionCount network: VGG-16 front end with 15 taps, contrast-weighted group
fusion, and a reverse-order decoder built from channel-reduction blocks.

Every stage is a pair of functions in the ``layer(x, params) -> (out, cache)`` /
``layer_backward(grad, cache)`` style; :class:`FusionCount` owns the parameter
dictionary and chains them.
"""
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvParams, ShapeError

REDUCTION_VARIANTS = (
    "two-dilated+pointwise",
    "one-dilated+pointwise",
    "pointwise-only",
    "two-dilated-only",
)

# (name, in_channels, out_channels) for convs, "pool" for 2x2 max-pooling
ENCODER_LAYERS = (
    ("conv1_1", 3, 64), ("conv1_2", 64, 64), "pool",
    ("conv2_1", 64, 128), ("conv2_2", 128, 128), "pool",
    ("conv3_1", 128, 256), ("conv3_2", 256, 256), ("conv3_3", 256, 256), "pool",
    ("conv4_1", 256, 512), ("conv4_2", 512, 512), ("conv4_3", 512, 512), "pool",
    ("conv5_1", 512, 512), ("conv5_2", 512, 512), ("conv5_3", 512, 512),
)

# tap indices (0-based) of each fusion group; the first entry is the pooled leader
GROUPS = ((0, 1, 2), (3, 4, 5, 6), (7, 8, 9, 10), (11, 12, 13, 14))
LEADER_CHANNELS = (64, 128, 256, 512)
FOLLOWER_CHANNELS = (128, 256, 512, 512)


@dataclass(frozen=True)
class ModelConfig:
    fused_channels: tuple = (64, 128, 256, 512)
    reduction: str = "two-dilated+pointwise"
    use_contrast: bool = True
    seed: int = 0
    divisor: int = 16
    dilation: int = 2
    init: str = "he"

    def __post_init__(self):
        if self.init not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.init!r}")
        if self.reduction not in REDUCTION_VARIANTS:
            raise ValueError(f"unknown reduction variant {self.reduction!r}; "
                             f"choose from {', '.join(REDUCTION_VARIANTS)}")
        f = tuple(self.fused_channels)
        if len(f) != 4:
            raise ValueError("fused_channels needs four widths")
        for lo, hi in zip(f, f[1:]):
            if hi != 2 * lo:
                raise ValueError(f"fused channel ladder must double at each level, got {f}")
        if f[0] < 1:
            raise ValueError("fused channel widths must be positive")


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution: where it sits and its shape.

    ``level`` is the number of 2x poolings between the input image and the
    feature map the conv runs on.
    """

    name: str
    in_channels: int
    out_channels: int
    kernel: int
    dilation: int
    level: int
    stage: str

    @property
    def padding(self):
        return self.dilation if self.kernel == 3 else 0

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)


def conv_specs(config):
    """Every convolution of the model in canonical (weight-file) order."""
    specs = []
    level = 0
    for layer in ENCODER_LAYERS:
        if layer == "pool":
            level += 1
            continue
        name, cin, cout = layer
        specs.append(ConvSpec(f"encoder.{name}", cin, cout, 3, 1, level, "encoder"))
    f = config.fused_channels
    for k in range(4):
        c, cs = LEADER_CHANNELS[k], FOLLOWER_CHANNELS[k]
        specs.append(ConvSpec(f"fusion{k + 1}.expand", c, cs, 1, 1, k + 1, "fusion"))
        specs.append(ConvSpec(f"fusion{k + 1}.bottleneck", c + cs, f[k], 1, 1, k + 1, "fusion"))
    d = config.dilation
    for k in (4, 3, 2):
        cin = f[k - 1]
        cout = cin // 2
        name = f"reduce{k}"
        if config.reduction != "pointwise-only":
            specs.append(ConvSpec(f"{name}.dilated1", cin, cout, 3, d, k, "decoder"))
            if config.reduction != "one-dilated+pointwise":
                specs.append(ConvSpec(f"{name}.dilated2", cout, cout, 3, d, k, "decoder"))
        if config.reduction != "two-dilated-only":
            specs.append(ConvSpec(f"{name}.pointwise", cin, cout, 1, 1, k, "decoder"))
    specs.append(ConvSpec("head", f[0], 1, 1, 1, 1, "decoder"))
    return specs


def parameter_manifest(config):
    """Ordered ``(tensor name, shape)`` pairs for every learnable tensor."""
    out = []
    for s in conv_specs(config):
        out.append((f"{s.name}.weight", s.weight_shape))
        out.append((f"{s.name}.bias", (s.out_channels,)))
    return out


INIT_SCHEMES = ("he", "he-encoder")


def init_parameters(config, seed=None, dtype=np.float32):
    """Normal weights, zero biases.

    ``"he"``: std = sqrt(2 / fan_in) everywhere. ``"he-encoder"``: He for the
    VGG layers, std 0.01 for fusion and decoder layers.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for s in conv_specs(config):
        fan_in = s.in_channels * s.kernel * s.kernel
        std = np.sqrt(2.0 / fan_in)
        if config.init == "he-encoder" and s.stage != "encoder":
            std = 0.01
        w = rng.standard_normal(s.weight_shape) * std
        params[f"{s.name}.weight"] = w.astype(dtype)
        params[f"{s.name}.bias"] = np.zeros(s.out_channels, dtype=dtype)
    return params


@dataclass
class EncoderTaps:
    """The 15 encoder feature maps x1..x15 in order."""

    features: list

    def __post_init__(self):
        if len(self.features) != 15:
            raise ValueError(f"expected 15 taps, got {len(self.features)}")
        for idx in GROUPS:
            hw = self.features[idx[0]].shape[2:]
            for i in idx[1:]:
                if self.features[i].shape[2:] != hw:
                    raise ShapeError(f"tap x{i + 1} spatial size {self.features[i].shape[2:]} "
                                     f"differs from its group leader's {hw}", dim="h")

    def group(self, k):
        """``(leader, followers)`` of fusion group ``k`` (0-based)."""
        idx = GROUPS[k]
        return self.features[idx[0]], [self.features[i] for i in idx[1:]]

    def __getitem__(self, i):
        return self.features[i]

    def __len__(self):
        return 15


@dataclass
class FusionBlockParams:
    expand: ConvParams
    bottleneck: ConvParams
    use_contrast: bool = True

    def __post_init__(self):
        if self.bottleneck.in_channels != self.expand.in_channels + self.expand.out_channels:
            raise ShapeError("bottleneck input width must equal leader + follower channels",
                             dim="c")


@dataclass
class ChannelReductionParams:
    variant: str
    dilated1: ConvParams = None
    dilated2: ConvParams = None
    pointwise: ConvParams = None

    def __post_init__(self):
        if self.variant not in REDUCTION_VARIANTS:
            raise ValueError(f"unknown reduction variant {self.variant!r}")
        need = {
            "two-dilated+pointwise": ("dilated1", "dilated2", "pointwise"),
            "one-dilated+pointwise": ("dilated1", "pointwise"),
            "pointwise-only": ("pointwise",),
            "two-dilated-only": ("dilated1", "dilated2"),
        }[self.variant]
        for name in ("dilated1", "dilated2", "pointwise"):
            present = getattr(self, name) is not None
            if present != (name in need):
                raise ValueError(f"variant {self.variant} {'needs' if name in need else 'has no'} {name}")


# --------------------------------------------------------------------------
# Encoder


def check_input(image, divisor=16):
    T.check_tensor(image, "image")
    if image.shape[1] != 3:
        raise ShapeError(f"image must have 3 channels, got {image.shape[1]}", dim="c")
    h, w = image.shape[2:]
    if h % divisor or w % divisor:
        raise ShapeError(
            f"image size {h}x{w} is not divisible by {divisor}; zero-pad it to "
            f"{-(-h // divisor) * divisor}x{-(-w // divisor) * divisor} first",
            dim="h" if h % divisor else "w",
        )


def encode(image, params, divisor=16):
    """Run the truncated VGG-16 and collect the 15 taps.

    Returns ``(taps, cache)``.
    """
    check_input(image, divisor)
    x = image
    taps = []
    steps = []
    seen_pool = False
    for layer in ENCODER_LAYERS:
        if layer == "pool":
            x, arg = T.maxpool2x2(x)
            steps.append(("pool", arg))
            seen_pool = True
        else:
            name = layer[0]
            p = _conv(params, f"encoder.{name}", 1)
            inp = x
            x = T.relu(T.conv2d(inp, p))
            steps.append(("conv", name, inp, x))
        if seen_pool:
            taps.append(x)
            steps[-1] = steps[-1] + (len(taps) - 1,)
    return EncoderTaps(taps), steps


def encode_backward(grad_taps, steps, params, grads):
    """Accumulate encoder parameter gradients into ``grads``."""
    g = None
    for step in reversed(steps):
        tap = step[-1] if isinstance(step[-1], int) else None
        if tap is not None and grad_taps[tap] is not None:
            g = grad_taps[tap] if g is None else g + grad_taps[tap]
        if g is None:
            continue
        if step[0] == "pool":
            g = T.maxpool2x2_backward(g, step[1])
        else:
            _, name, inp, out = step[:4]
            g = T.relu_backward(g, out)
            p = _conv(params, f"encoder.{name}", 1)
            first = name == "conv1_1"
            gx, gw, gb = T.conv2d_backward(inp, p, g, input_grad=not first)
            _accumulate(grads, f"encoder.{name}", gw, gb)
            g = gx
    return grads


# --------------------------------------------------------------------------
# Group fusion


def fuse_group(leader, followers, p):
    """Fuse a pooled leader with its conv followers.

    Expanded leader ``x*`` (1x1 conv, linear); contrasts ``c_j = x_j - x*``;
    gates ``w_j = sigmoid(c_j)`` (``sigmoid(x_j)`` without contrast);
    ``f = relu(bottleneck([leader | sum_j w_j * x_j]))``.
    """
    T.check_tensor(leader, "leader")
    if leader.shape[1] != p.expand.in_channels:
        raise ShapeError(f"leader has {leader.shape[1]} channels, expand expects "
                         f"{p.expand.in_channels}", dim="c")
    for j, y in enumerate(followers):
        T.check_tensor(y, f"follower {j + 1}")
        if y.shape[1] != p.expand.out_channels:
            raise ShapeError(f"follower {j + 1} has {y.shape[1]} channels, expected "
                             f"{p.expand.out_channels}", dim="c")
        if y.shape[0] != leader.shape[0] or y.shape[2:] != leader.shape[2:]:
            raise ShapeError(f"follower {j + 1} shape {y.shape} does not match leader "
                             f"{leader.shape}", dim="h")

    expanded = T.conv2d(leader, p.expand) if p.use_contrast else None
    gates = []
    acc = None
    for y in followers:
        w = T.sigmoid(T.sub(y, expanded) if p.use_contrast else y)
        gates.append(w)
        term = T.mul(w, y)
        acc = term if acc is None else T.add(acc, term)
    cat = T.concat_channels(leader, acc)
    z = T.conv2d(cat, p.bottleneck)
    f = T.relu(z)
    return f, (leader, followers, gates, cat, f, p)


def fuse_group_backward(grad_f, cache):
    """Returns ``(grad_leader, grad_followers, {"expand": (gw, gb) | None,
    "bottleneck": (gw, gb)})``."""
    leader, followers, gates, cat, f, p = cache
    gz = T.relu_backward(grad_f, f)
    gcat, gwb, gbb = T.conv2d_backward(cat, p.bottleneck, gz)
    g_leader, g_acc = T.split_channels(gcat, leader.shape[1])
    g_followers = []
    g_expanded = None
    for y, w in zip(followers, gates):
        g_w, g_y = T.mul_backward(g_acc, w, y)
        g_c = T.sigmoid_backward(g_w, w)
        g_followers.append(g_y + g_c)
        if p.use_contrast:
            g_expanded = -g_c if g_expanded is None else g_expanded - g_c
    out = {"bottleneck": (gwb, gbb), "expand": None}
    if p.use_contrast:
        gx, gwe, gbe = T.conv2d_backward(leader, p.expand, g_expanded)
        g_leader = g_leader + gx
        out["expand"] = (gwe, gbe)
    return g_leader, g_followers, out


# --------------------------------------------------------------------------
# Channel reduction and decoding


def channel_reduce(x, p):
    """Halve the channel count: dilated stream ``relu(d2(relu(d1(x))))`` plus
    pointwise stream ``pw(x)``, with streams dropped per ``p.variant``."""
    T.check_tensor(x)
    if x.shape[1] % 2:
        raise ShapeError(f"channel_reduce needs an even channel count, got {x.shape[1]}", dim="c")
    cache = {"x": x, "p": p}
    y = None
    if p.dilated1 is not None:
        r1 = T.relu(T.conv2d(x, p.dilated1))
        cache["r1"] = r1
        y = r1
        if p.dilated2 is not None:
            r2 = T.relu(T.conv2d(r1, p.dilated2))
            cache["r2"] = r2
            y = r2
    if p.pointwise is not None:
        pw = T.conv2d(x, p.pointwise)
        y = pw if y is None else T.add(y, pw)
    return y, cache


def channel_reduce_backward(grad, cache):
    """Returns ``(grad_x, {stream: (gw, gb)})``."""
    x, p = cache["x"], cache["p"]
    grads = {}
    gx = None
    if p.pointwise is not None:
        gx, gw, gb = T.conv2d_backward(x, p.pointwise, grad)
        grads["pointwise"] = (gw, gb)
    if p.dilated1 is not None:
        g = grad
        if p.dilated2 is not None:
            g = T.relu_backward(g, cache["r2"])
            g, gw, gb = T.conv2d_backward(cache["r1"], p.dilated2, g)
            grads["dilated2"] = (gw, gb)
        g = T.relu_backward(g, cache["r1"])
        g, gw, gb = T.conv2d_backward(x, p.dilated1, g)
        grads["dilated1"] = (gw, gb)
        gx = g if gx is None else gx + g
    return gx, grads


def decode(fused, reducers, head):
    """Fuse ``f4 -> f3 -> f2 -> f1`` and regress the density map.

    ``reducers`` maps level (4, 3, 2) to :class:`ChannelReductionParams`.
    Returns ``(density, cache)``.
    """
    for k in range(1, 4):
        lo, hi = fused[k - 1], fused[k]
        if hi.shape[1] != 2 * lo.shape[1]:
            raise ShapeError(f"fused ladder mismatch: f{k + 1} has {hi.shape[1]} channels, "
                             f"f{k} has {lo.shape[1]}", dim="c")
        if (2 * hi.shape[2], 2 * hi.shape[3]) != lo.shape[2:]:
            raise ShapeError(f"fused ladder mismatch: f{k + 1} is {hi.shape[2:]}, "
                             f"f{k} is {lo.shape[2:]}", dim="h")
    g = fused[3]
    caches = []
    for k in (4, 3, 2):
        r, rc = channel_reduce(g, reducers[k])
        g = T.add(fused[k - 2], T.upsample2x(r))
        caches.append((k, rc))
    z = T.conv2d(g, head)
    density = T.relu(z)
    return density, (caches, g, density, head)


def decode_backward(grad_density, cache):
    """Returns ``(grad_fused [f1..f4], {level: reduce grads}, head grads)``."""
    caches, g1, density, head = cache
    gz = T.relu_backward(grad_density, density)
    gg, gw, gb = T.conv2d_backward(g1, head, gz)
    head_grads = (gw, gb)
    grad_fused = [None] * 4
    reduce_grads = {}
    for k, rc in reversed(caches):
        grad_fused[k - 2], gu = T.add_backward(gg)
        gr = T.upsample2x_backward(gu)
        gg, reduce_grads[k] = channel_reduce_backward(gr, rc)
    grad_fused[3] = gg
    return grad_fused, reduce_grads, head_grads


# --------------------------------------------------------------------------
# Whole model


def _conv(params, name, dilation):
    w = params[f"{name}.weight"]
    k = w.shape[2]
    pad = dilation if k == 3 else 0
    return ConvParams(w, params[f"{name}.bias"], stride=1, padding=pad,
                      dilation=dilation if k == 3 else 1)


def _accumulate(grads, name, gw, gb):
    for key, g in ((f"{name}.weight", gw), (f"{name}.bias", gb)):
        if key in grads:
            grads[key] = grads[key] + g
        else:
            grads[key] = g


@dataclass
class FusionCount:
    """The full network. ``params`` maps manifest names to arrays."""

    config: ModelConfig = field(default_factory=ModelConfig)
    params: dict = None
    dtype: type = np.float32

    def __post_init__(self):
        if self.params is None:
            self.params = init_parameters(self.config, dtype=self.dtype)
        else:
            self.check_params(self.params)
        self._cache = None

    def check_params(self, params):
        manifest = parameter_manifest(self.config)
        names = {n for n, _ in manifest}
        for name in params:
            if name not in names:
                raise KeyError(f"unknown parameter {name!r} for this configuration")
        for name, shape in manifest:
            if name not in params:
                raise KeyError(f"missing parameter {name!r}")
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name!r} has shape {tuple(params[name].shape)}, "
                                 f"expected {shape}", dim=name)

    def init_parameters(self, seed):
        self.params = init_parameters(self.config, seed=seed, dtype=self.dtype)

    def astype(self, dtype):
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return FusionCount(self.config, params, dtype)

    def num_parameters(self):
        return sum(v.size for v in self.params.values())

    def fusion_params(self, k):
        """:class:`FusionBlockParams` of group ``k`` (1-based)."""
        return FusionBlockParams(_conv(self.params, f"fusion{k}.expand", 1),
                                 _conv(self.params, f"fusion{k}.bottleneck", 1),
                                 self.config.use_contrast)

    def reduction_params(self, k):
        """:class:`ChannelReductionParams` reducing level ``k`` (4, 3 or 2)."""
        d = self.config.dilation
        get = lambda s, dil: (_conv(self.params, f"reduce{k}.{s}", dil)
                              if f"reduce{k}.{s}.weight" in self.params else None)
        return ChannelReductionParams(self.config.reduction, get("dilated1", d),
                                      get("dilated2", d), get("pointwise", 1))

    def forward(self, image, keep_cache=True):
        """Density map ``(n, 1, H/2, W/2)`` for an ``(n, 3, H, W)`` image batch."""
        image = image.astype(self.dtype, copy=False)
        taps, enc_cache = encode(image, self.params, self.config.divisor)
        fused, fuse_caches = [], []
        for k in range(4):
            leader, followers = taps.group(k)
            f, fc = fuse_group(leader, followers, self.fusion_params(k + 1))
            fused.append(f)
            fuse_caches.append(fc)
        reducers = {k: self.reduction_params(k) for k in (4, 3, 2)}
        density, dec_cache = decode(fused, reducers, _conv(self.params, "head", 1))
        self._cache = (enc_cache, fuse_caches, dec_cache) if keep_cache else None
        return density

    __call__ = forward

    def count(self, image):
        return self.forward(image, keep_cache=False).sum(axis=(1, 2, 3))

    def activation_pattern(self):
        """Packed relu masks and pool winners of the last cached forward pass.

        Two passes with equal patterns lie on the same linear piece of the
        network, which the gradient checker uses to reject kink crossings.
        """
        if self._cache is None:
            raise RuntimeError("no cached forward pass")
        enc_cache, fuse_caches, dec_cache = self._cache
        parts = []
        for step in enc_cache:
            parts.append(step[1] if step[0] == "pool" else np.packbits(step[3] > 0))
        for fc in fuse_caches:
            parts.append(np.packbits(fc[4] > 0))
        caches, _, density, _ = dec_cache
        for _, rc in caches:
            for key in ("r1", "r2"):
                if key in rc:
                    parts.append(np.packbits(rc[key] > 0))
        parts.append(np.packbits(density > 0))
        return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)

    def backward(self, grad_density):
        """Parameter gradients for the last :meth:`forward` call."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward() with keep_cache=True")
        enc_cache, fuse_caches, dec_cache = self._cache
        grads = {}
        grad_fused, reduce_grads, head_grads = decode_backward(
            grad_density.astype(self.dtype, copy=False), dec_cache)
        _accumulate(grads, "head", *head_grads)
        for k, rg in reduce_grads.items():
            for stream, (gw, gb) in rg.items():
                _accumulate(grads, f"reduce{k}.{stream}", gw, gb)
        grad_taps = [None] * 15
        for k in range(4):
            g_leader, g_followers, fg = fuse_group_backward(grad_fused[k], fuse_caches[k])
            idx = GROUPS[k]
            grad_taps[idx[0]] = g_leader
            for i, g in zip(idx[1:], g_followers):
                grad_taps[i] = g
            _accumulate(grads, f"fusion{k + 1}.bottleneck", *fg["bottleneck"])
            if fg["expand"] is not None:
                _accumulate(grads, f"fusion{k + 1}.expand", *fg["expand"])
        encode_backward(grad_taps, enc_cache, self.params, grads)
        for name, v in self.params.items():
            if name not in grads:
                grads[name] = np.zeros_like(v)
        return {name: grads[name] for name in self.params}
