"""Finite-difference verification of every hand-written backward pass."""
from dataclasses import dataclass, replace

import numpy as np

from . import data
from . import tensor as T
from .model import FusionCount, ModelConfig

OP_TOLERANCE = 1e-6
MODEL_TOLERANCE = 1e-5


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(forward, backward, inputs, step=1e-5, dtype=np.float64, seed=0):
    """Worst relative error between ``backward`` and central differences.

    The scalar probed is ``sum(R * forward(*inputs))`` for a fixed random
    ``R``. ``backward(R, *inputs)`` returns one gradient per input, or None to
    skip that input. Every element of every input is perturbed.
    """
    rng = np.random.default_rng(seed)
    inputs = [np.array(x, dtype=dtype) for x in inputs]
    out = np.asarray(forward(*inputs))
    proj = rng.standard_normal(out.shape).astype(dtype)
    analytic = backward(proj, *inputs)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        if g is None:
            continue
        g = np.asarray(g, dtype=dtype).reshape(x.shape)
        for i in range(x.size):
            orig = x.flat[i]
            x.flat[i] = orig + step
            up = np.asarray(forward(*inputs))
            x.flat[i] = orig - step
            down = np.asarray(forward(*inputs))
            x.flat[i] = orig
            # difference the outputs before projecting: keeps roundoff local
            num = float(np.sum(proj * (up - down))) / (2 * step)
            worst = max(worst, relative_error(num, float(g.flat[i])))
    return worst


def _conv_case(cin, cout, size, kernel, dilation):
    pad = dilation if kernel == 3 else 0

    def fwd(x, w, b):
        return T.conv2d(x, T.ConvParams(w, b, 1, pad, dilation if kernel == 3 else 1))

    def bwd(g, x, w, b):
        return T.conv2d_backward(x, T.ConvParams(w, b, 1, pad, dilation if kernel == 3 else 1), g)

    def inputs(rng):
        return [rng.standard_normal((1, cin, size, size)),
                rng.standard_normal((cout, cin, kernel, kernel)),
                rng.standard_normal(cout)]

    return fwd, bwd, inputs


def _away_from_zero(rng, shape, margin=0.1):
    mag = rng.uniform(margin, 1.0, size=shape)
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    vals = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1
    return vals + rng.uniform(-0.01, 0.01, size=shape)


def op_cases():
    """``name -> (forward, backward, make_inputs)`` for every tensor-core op.

    Looked up at call time so a patched backward is what gets checked.
    """
    shape = (1, 2, 4, 6)

    def loss_inputs(rng):
        gt = rng.uniform(0, 1, size=(2, 1, 4, 4))
        pred = gt + rng.uniform(0.05, 0.2, size=gt.shape) * rng.choice([-1.0, 1.0], size=(2, 1, 1, 1))
        return [pred, gt]

    return {
        "conv2d": _conv_case(1, 1, 4, 3, 1),
        "conv2d_multichannel": _conv_case(2, 3, 5, 3, 1),
        "conv2d_dilated": _conv_case(2, 2, 5, 3, 2),
        "conv2d_pointwise": _conv_case(3, 2, 4, 1, 1),
        "maxpool2x2": (lambda x: T.maxpool2x2(x)[0],
                       lambda g, x: (T.maxpool2x2_backward(g, T.maxpool2x2(x)[1]),),
                       lambda rng: [_distinct(rng, (1, 2, 4, 4))]),
        "relu": (T.relu,
                 lambda g, x: (T.relu_backward(g, x),),
                 lambda rng: [_away_from_zero(rng, shape)]),
        "sigmoid": (T.sigmoid,
                    lambda g, x: (T.sigmoid_backward(g, T.sigmoid(x)),),
                    lambda rng: [rng.standard_normal(shape) * 3]),
        "upsample2x": (T.upsample2x,
                       lambda g, x: (T.upsample2x_backward(g),),
                       lambda rng: [rng.standard_normal((1, 2, 3, 4))]),
        "concat_channels": (T.concat_channels,
                            lambda g, a, b: T.split_channels(g, a.shape[1]),
                            lambda rng: [rng.standard_normal((1, 2, 3, 3)),
                                         rng.standard_normal((1, 1, 3, 3))]),
        "add": (T.add, lambda g, a, b: T.add_backward(g),
                lambda rng: [rng.standard_normal(shape), rng.standard_normal(shape)]),
        "sub": (T.sub, lambda g, a, b: T.sub_backward(g),
                lambda rng: [rng.standard_normal(shape), rng.standard_normal(shape)]),
        "mul": (T.mul, lambda g, a, b: T.mul_backward(g, a, b),
                lambda rng: [rng.standard_normal(shape), rng.standard_normal(shape)]),
        "loss": (lambda p, g: np.array(data.loss(p, g)[0]),
                 lambda r, p, g: (r * data.loss(p, g)[1], None),
                 loss_inputs),
    }


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self):
        return self.error < self.tolerance


def run_op_suite(seed=0, step=1e-5):
    results = []
    for i, (name, (fwd, bwd, make)) in enumerate(op_cases().items()):
        rng = np.random.default_rng([seed, i])
        err = finite_diff_check(fwd, bwd, make(rng), step=step, seed=seed + i)
        results.append(CheckResult(name, err, OP_TOLERANCE))
    return results


def model_gradcheck(seed=0, n_params=50, step=1e-4, config=None, size=32, max_draws=2000):
    """Whole-model check in float64 on a ``(1, 3, size, size)`` input.

    Samples ``n_params`` scalar parameters (tensor chosen uniformly, then an
    entry within it). A sample whose +/- step passes change any relu mask or
    pool winner is a kink crossing, not a gradient error; it is redrawn. A
    network whose density is zero everywhere has identically zero gradients,
    so the model seed is advanced until at least a tenth of the map is live.
    Returns ``(worst relative error, samples checked, crossings redrawn)``.
    """
    rng = np.random.default_rng(seed)
    config = config or ModelConfig(seed=seed)
    for attempt in range(20):
        model = FusionCount(replace(config, seed=config.seed + attempt), dtype=np.float64)
        image = rng.standard_normal((1, 3, size, size))
        density = model.forward(image)
        if np.mean(density > 0) >= 0.1:
            break
    else:
        raise RuntimeError("could not draw a model with a live density map")
    base = model.activation_pattern()
    proj = rng.standard_normal(density.shape)
    grads = model.backward(proj)
    names = list(model.params)
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(max_draws):
        if checked == n_params:
            break
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        i = int(rng.integers(p.size))
        orig = p.flat[i]
        p.flat[i] = orig + step
        up = model.forward(image)
        same = model.activation_pattern() == base
        p.flat[i] = orig - step
        down = model.forward(image)
        same = same and model.activation_pattern() == base
        p.flat[i] = orig
        if not same:
            skipped += 1
            continue
        num = float(np.sum(proj * (up - down))) / (2 * step)
        worst = max(worst, relative_error(num, float(grads[name].flat[i])))
        checked += 1
    return worst, checked, skipped
