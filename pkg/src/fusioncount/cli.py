"""``fusioncount`` command-line interface.

Exit codes: 0 success, 1 failed check, 2 unreadable file, 3 malformed input
(image dimensions out of range or inconsistent, truncated/corrupt weight
file), 4 weights do not match the model configuration.
"""
import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, data, gradcheck, imageio, weights
from .model import REDUCTION_VARIANTS, FusionCount, ModelConfig

EXIT_CHECK_FAILED = 1
EXIT_UNREADABLE = 2
EXIT_MALFORMED = 3
EXIT_MISMATCH = 4


def _model_config(args, **kw):
    return ModelConfig(reduction=args.variant, use_contrast=not args.no_contrast, **kw)


def _add_model_flags(p):
    p.add_argument("--variant", choices=REDUCTION_VARIANTS, default=REDUCTION_VARIANTS[0],
                   help="channel-reduction variant (default: %(default)s)")
    p.add_argument("--no-contrast", action="store_true",
                   help="gate on the raw follower features instead of contrast features")


def pad_to_multiple(image, multiple=16):
    """Zero-fill an ``(n, c, h, w)`` tensor on the bottom/right."""
    h, w = image.shape[2:]
    ph, pw = -h % multiple, -w % multiple
    if not (ph or pw):
        return image
    return np.pad(image, ((0, 0), (0, 0), (0, ph), (0, pw)))


def cmd_predict(args):
    config = _model_config(args)
    try:
        params = weights.load_weights(args.weights, config)
    except OSError as exc:
        print(f"error: cannot read weights {args.weights}: {exc.strerror}", file=sys.stderr)
        return EXIT_UNREADABLE
    except weights.WeightFormatError as exc:
        print(f"error: {args.weights}: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except weights.WeightMismatchError as exc:
        print(f"error: {args.weights}: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    try:
        pixels = imageio.read_pnm(args.image)
    except imageio.ImageReadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except imageio.ImageDimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED

    image = imageio.to_tensor(pixels)
    if not args.no_normalize:
        image = data.normalize_image(image)
    image = pad_to_multiple(image, config.divisor)
    model = FusionCount(config, params)
    density = model.forward(image, keep_cache=False)[0, 0]
    print(f"{density.sum(dtype=np.float64):.2f}")

    if args.out_density:
        peak = float(density.max())
        scaled = density / peak * 255 if peak > 0 else np.zeros_like(density)
        imageio.write_pgm(args.out_density, np.rint(scaled).astype(np.uint8))
    if args.out_csv:
        np.savetxt(args.out_csv, density, delimiter=",", fmt="%.9g")
    return 0


def cmd_profile(args):
    config = _model_config(args)
    report = analysis.mult_adds(config, args.height, args.width)
    print(analysis.format_cost(report))
    if args.calibration:
        ref = analysis.csrnet_mult_adds(args.height, args.width)
        print(f"calibration: VGG-16 front end + CSRNet back end = {ref.total:,} "
              f"({ref.total / 1e9:.2f} G)")
    if args.csv:
        Path(args.csv).write_text(analysis.cost_csv(report))
    return 0


def cmd_rf(args):
    print(analysis.format_rf(analysis.receptive_fields()))
    return 0


def cmd_train_toy(args):
    from .train import TrainConfig, train_toy, write_history

    overrides = dict(iterations=args.iters, seed=args.seed, n_scenes=args.scenes)
    if args.lr is not None:
        overrides["lr"] = args.lr
    config = TrainConfig.preset(args.preset, **overrides)
    model_config = ModelConfig(seed=args.seed, init="he-encoder")
    start = time.perf_counter()
    result = train_toy(config, model_config)
    weights.save_weights(args.out, result.model.params, model_config)
    metrics = args.metrics or str(Path(args.out).with_suffix(".csv"))
    write_history(metrics, result.history)
    print(f"iteration 0: loss {result.initial['loss']:.6f}  MAE {result.initial['mae']:.3f}")
    print(f"iteration {config.iterations}: loss {result.final['loss']:.6f}  "
          f"MAE {result.final['mae']:.3f}")
    print(f"wrote {args.out} and {metrics} in {time.perf_counter() - start:.1f} s")
    return 0


def cmd_gradcheck(args):
    ok = True
    for r in gradcheck.run_op_suite(args.seed):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<22}{r.error:>12.3e}  < {r.tolerance:.0e}  {status}")
        ok &= r.passed
    err, checked, skipped = gradcheck.model_gradcheck(args.seed, n_params=args.params)
    passed = err < gradcheck.MODEL_TOLERANCE and checked == args.params
    status = "ok" if passed else "FAIL"
    print(f"{'model (3x32x32)':<22}{err:>12.3e}  < {gradcheck.MODEL_TOLERANCE:.0e}  {status}"
          f"  [{checked} params, {skipped} kink crossings redrawn]")
    ok &= passed
    return 0 if ok else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="fusioncount", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="count people in a PPM/PGM image",
                       description="Print the predicted count (sum of the density map) with "
                                   "two decimals. --out-csv writes the raw half-resolution "
                                   "density, one image row per CSV row, no header.")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="binary PPM (P6) or PGM (P5)")
    p.add_argument("--out-density", help="density map as PGM, scaled to its maximum")
    p.add_argument("--out-csv", help="raw density values as CSV")
    p.add_argument("--no-normalize", action="store_true",
                   help="skip ImageNet mean/std standardisation")
    _add_model_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("profile", help="per-layer mult-adds",
                       description="CSV columns: layer, kind, out_shape (CxHxW), mult_adds.")
    p.add_argument("--height", type=int, default=1080)
    p.add_argument("--width", type=int, default=1920)
    p.add_argument("--csv", help="also write the table as CSV")
    p.add_argument("--calibration", action="store_true",
                   help="also print the CSRNet calibration total")
    _add_model_flags(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("rf", help="receptive fields of the 15 encoder taps")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("train-toy", help="train on synthetic scenes",
                       description="Metrics CSV columns: iteration, loss, train_mae (batch "
                                   "values before that iteration's update).")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--preset", choices=("toy", "paper"), default="toy")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--metrics", help="metrics CSV (default: --out with .csv suffix)")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--params", type=int, default=50)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
