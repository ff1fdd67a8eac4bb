"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--full]

Times each data-movement kernel on feature-map sizes taken from a 96x128
training patch, checks that both backends return identical arrays, and with
--full also times one forward+backward pass of the whole model per backend.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from fusioncount import _fallback

try:
    from fusioncount import _kernels
except ImportError:
    _kernels = None


def cases(rng):
    x1 = rng.standard_normal((2, 64, 96, 128)).astype(np.float32)
    x3 = rng.standard_normal((2, 256, 24, 32)).astype(np.float32)
    cols = _fallback.im2col(x3, 3, 3, 1, 2, 2)
    pooled, arg = _fallback.maxpool2x2(x1)
    up_in = rng.standard_normal((2, 128, 24, 32)).astype(np.float32)
    up_grad = rng.standard_normal((2, 128, 48, 64)).astype(np.float32)
    return [
        ("im2col 64x96x128 3x3", "im2col", (x1, 3, 3, 1, 1, 1)),
        ("im2col 256x24x32 dil2", "im2col", (x3, 3, 3, 1, 2, 2)),
        ("col2im 256x24x32 dil2", "col2im", (cols, x3.shape, 3, 3, 1, 2, 2)),
        ("maxpool 64x96x128", "maxpool2x2", (x1,)),
        ("maxpool_backward", "maxpool2x2_backward", (pooled, arg)),
        ("upsample 128x24x32", "upsample2x", (up_in,)),
        ("upsample_backward", "upsample2x_backward", (up_grad,)),
    ]


def same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(u, v) for u, v in zip(a, b))
    return np.array_equal(a, b)


MODEL_SNIPPET = """
import time, numpy as np, fusioncount
from fusioncount.model import FusionCount, ModelConfig
m = FusionCount(ModelConfig(seed=0, init="he-encoder"))
x = np.random.default_rng(0).standard_normal((2, 3, 96, 128)).astype(np.float32)
m.backward(np.ones_like(m.forward(x)))
t = time.perf_counter()
for _ in range({n}):
    m.backward(np.ones_like(m.forward(x)))
print(fusioncount.BACKEND, (time.perf_counter() - t) / {n})
"""


def time_model(pure, repeat):
    env = dict(os.environ, FUSIONCOUNT_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", MODEL_SNIPPET.format(n=repeat)], env=env,
                         capture_output=True, text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--full", action="store_true", help="also time a whole training step")
    args = parser.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1

    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'cython ms':>11}{'numpy ms':>11}{'speedup':>9}  identical")
    for label, name, call_args in cases(rng):
        fast, slow = getattr(_kernels, name), getattr(_fallback, name)
        t_fast = min(timeit.repeat(lambda: fast(*call_args), number=1, repeat=args.repeat))
        t_slow = min(timeit.repeat(lambda: slow(*call_args), number=1, repeat=args.repeat))
        ok = same(fast(*call_args), slow(*call_args))
        print(f"{label:<26}{1e3 * t_fast:>11.2f}{1e3 * t_slow:>11.2f}{t_slow / t_fast:>8.1f}x  {ok}")

    if args.full:
        for pure in (False, True):
            backend, seconds = time_model(pure, args.repeat)
            print(f"forward+backward, batch 2 at 96x128, {backend:<7}{seconds:8.3f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
